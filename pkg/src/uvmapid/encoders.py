"""Encoder interfaces and deterministic reference implementations.

The reference encoders are fixed seeded constructions (hashed lookup tables
and random projections), so the whole pipeline runs without pretrained
weights. Real models plug in by implementing the same small protocols, or as
precomputed vectors through :class:`EmbeddingStore`.
"""

from __future__ import annotations

import hashlib
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np
import torch
from torch import nn

from .errors import ValidationError
from .images import resample_area
from .render import SegmentationMap, UVLayoutSpec


@runtime_checkable
class TextEncoder(Protocol):
    max_tokens: int
    dim: int

    def encode(self, prompt: str) -> np.ndarray: ...


@runtime_checkable
class FaceEmbedder(Protocol):
    dim: int

    def embed(self, image: np.ndarray, key: str | None = None) -> np.ndarray: ...


@runtime_checkable
class ImageEmbedder(Protocol):
    def embed(self, image: np.ndarray, key: str | None = None) -> np.ndarray: ...


@runtime_checkable
class ProbClassifier(Protocol):
    num_classes: int

    def classify(self, image: np.ndarray, key: str | None = None) -> np.ndarray: ...


@runtime_checkable
class HumanParser(Protocol):
    label_set: tuple[int, ...]

    def parse(self, image: np.ndarray) -> SegmentationMap: ...


def _check_rgb(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ValidationError(f"expected an HxWx3 RGB image, got shape {img.shape}")
    return img


def token_hash(token: str, seed: int) -> int:
    """Keyed 64-bit hash of a token's UTF-8 bytes (platform and locale independent)."""
    digest = hashlib.blake2b(
        token.encode("utf-8"), digest_size=8, key=int(seed).to_bytes(8, "little", signed=False)
    ).digest()
    return int.from_bytes(digest, "little")


class ReferenceTextEncoder:
    """Whitespace tokens hashed into a fixed random embedding table.

    Row 0 of the table is the padding embedding; the empty prompt encodes to
    ``max_tokens`` padding rows.
    """

    def __init__(self, dim: int = 32, max_tokens: int = 8, vocab_size: int = 4096, seed: int = 1234):
        self.dim = dim
        self.max_tokens = max_tokens
        self.vocab_size = vocab_size
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.table = rng.standard_normal((vocab_size, dim))
        self.table.setflags(write=False)

    def token_ids(self, prompt: str) -> list[int]:
        tokens = prompt.lower().split()[: self.max_tokens]
        ids = [1 + token_hash(tok, self.seed) % (self.vocab_size - 1) for tok in tokens]
        return ids + [0] * (self.max_tokens - len(ids))

    def encode(self, prompt: str) -> np.ndarray:
        return self.table[self.token_ids(prompt)].copy()

    @property
    def null_embedding(self) -> np.ndarray:
        return self.encode("")


class ReferenceFaceEmbedder:
    """16x16 box-downsample, flatten, fixed Gaussian projection, L2-normalize."""

    def __init__(self, dim: int = 512, size: int = 16, seed: int = 4321):
        self.dim = dim
        self.size = size
        rng = np.random.default_rng(seed)
        self.projection = rng.standard_normal((dim, size * size * 3))
        self.projection.setflags(write=False)

    def embed(self, image: np.ndarray, key: str | None = None) -> np.ndarray:
        img = _check_rgb(image)
        x = resample_area(img, self.size, self.size).reshape(-1)
        v = self.projection @ x
        norm = np.linalg.norm(v)
        if norm == 0.0:
            warnings.warn("face image projects to the zero vector; returning e_1", RuntimeWarning, stacklevel=2)
            e1 = np.zeros(self.dim)
            e1[0] = 1.0
            return e1
        return v / norm


class ReferenceImageEmbedder:
    """Image side of the text-image alignment score; lives in the text-embedding space."""

    def __init__(self, dim: int = 32, size: int = 16, seed: int = 2468):
        self.dim = dim
        self.size = size
        rng = np.random.default_rng(seed)
        self.projection = rng.standard_normal((dim, size * size * 3)) / np.sqrt(size * size * 3)

    def embed(self, image: np.ndarray, key: str | None = None) -> np.ndarray:
        x = resample_area(_check_rgb(image), self.size, self.size).reshape(-1)
        return self.projection @ (2.0 * x - 1.0)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class ReferenceClassifier:
    """Fixed random affine map over an 8x8 thumbnail followed by softmax."""

    def __init__(self, num_classes: int = 10, size: int = 8, seed: int = 1357, temperature: float = 1.0):
        self.num_classes = num_classes
        self.size = size
        rng = np.random.default_rng(seed)
        n_in = size * size * 3
        self.weight = rng.standard_normal((num_classes, n_in)) * (4.0 / np.sqrt(n_in))
        self.bias = rng.standard_normal(num_classes) * 0.1
        self.temperature = temperature

    def classify(self, image: np.ndarray, key: str | None = None) -> np.ndarray:
        x = resample_area(_check_rgb(image), self.size, self.size).reshape(-1)
        return softmax((self.weight @ (2.0 * x - 1.0) + self.bias) / self.temperature)


class NearestColorParser:
    """Labels each pixel with the layout label whose palette colour is nearest (ties: lower id)."""

    def __init__(self, layout: UVLayoutSpec):
        self.label_set = layout.label_set
        self._ids = np.array(self.label_set)
        self._colors = np.array([layout.palette[k] for k in self.label_set], dtype=np.float64)

    def parse(self, image: np.ndarray) -> SegmentationMap:
        img = _check_rgb(image)
        d2 = ((img[:, :, None, :] - self._colors[None, None, :, :]) ** 2).sum(axis=-1)
        return SegmentationMap(self._ids[np.argmin(d2, axis=-1)], self.label_set)


class FaceProjector(nn.Module):
    """Linear map from a face embedding to ``num_tokens`` image tokens."""

    def __init__(self, d_face: int = 512, num_tokens: int = 4, d_img: int = 32, seed: int = 0):
        super().__init__()
        self.d_face = d_face
        self.num_tokens = num_tokens
        self.d_img = d_img
        self.proj = nn.Linear(d_face, num_tokens * d_img)
        gen = torch.Generator().manual_seed(seed)
        bound = 1.0 / np.sqrt(d_face)
        with torch.no_grad():
            self.proj.weight.uniform_(-bound, bound, generator=gen)
            self.proj.bias.uniform_(-bound, bound, generator=gen)

    def forward(self, embedding: torch.Tensor) -> torch.Tensor:
        return self.proj(embedding).reshape(*embedding.shape[:-1], self.num_tokens, self.d_img)

    def null_tokens(self) -> torch.Tensor:
        """Tokens of the all-zero embedding, i.e. the reshaped bias."""
        return self(torch.zeros(self.d_face, dtype=self.proj.weight.dtype))


def project_face(embedding, projector: FaceProjector) -> torch.Tensor:
    emb = embedding if isinstance(embedding, torch.Tensor) else torch.as_tensor(np.asarray(embedding))
    if emb.shape[-1] != projector.d_face:
        raise ValidationError(f"face embedding has dimension {emb.shape[-1]}, projector expects {projector.d_face}")
    return projector(emb.to(projector.proj.weight.dtype))


# Precomputed embedding files: b"UVEM", u32 dim, u32 key length, UTF-8 key, dim x float32 (all little-endian).
EMBEDDING_MAGIC = b"UVEM"


def write_embedding(path: str | Path, key: str, vector) -> None:
    vec = np.asarray(vector, dtype="<f4").reshape(-1)
    kb = key.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(EMBEDDING_MAGIC + struct.pack("<II", vec.size, len(kb)) + kb + vec.tobytes())


def read_embedding(path: str | Path) -> tuple[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != EMBEDDING_MAGIC or len(data) < 12:
        raise ValidationError(f"{path}: not an embedding record")
    dim, klen = struct.unpack_from("<II", data, 4)
    end = 12 + klen + 4 * dim
    if len(data) != end:
        raise ValidationError(f"{path}: truncated or oversized embedding record")
    key = data[12 : 12 + klen].decode("utf-8")
    vec = np.frombuffer(data, dtype="<f4", count=dim, offset=12 + klen).astype(np.float64)
    return key, vec


class EmbeddingStore:
    """Directory of ``*.emb`` records looked up by image path.

    Lookup tries the key as given, then its resolved absolute path, then its
    file name.
    """

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self._by_key: dict[str, np.ndarray] = {}
        self._by_name: dict[str, np.ndarray] = {}
        self._count = 0
        for path in sorted(self.directory.glob("*.emb")):
            key, vec = read_embedding(path)
            self._count += 1
            self._by_key[key] = vec
            self._by_key.setdefault(_resolved(key), vec)
            self._by_name.setdefault(Path(key.split("#")[0]).name + _suffix(key), vec)

    def __len__(self) -> int:
        return self._count

    def get(self, key: str) -> np.ndarray:
        for candidate in (key, _resolved(key)):
            if candidate in self._by_key:
                return self._by_key[candidate]
        name = Path(key.split("#")[0]).name + _suffix(key)
        if name in self._by_name:
            return self._by_name[name]
        raise KeyError(f"no precomputed embedding for {key!r} in {self.directory}")


def _suffix(key: str) -> str:
    return "#" + key.split("#", 1)[1] if "#" in key else ""


def _resolved(key: str) -> str:
    base = key.split("#")[0]
    return str(Path(base).resolve()) + _suffix(key)


class FileFaceEmbedder:
    def __init__(self, store: EmbeddingStore, dim: int):
        self.store = store
        self.dim = dim

    def embed(self, image: np.ndarray, key: str | None = None) -> np.ndarray:
        if key is None:
            raise KeyError("file-backed embedder needs the image path as key")
        v = self.store.get(key)
        if v.size != self.dim:
            raise ValidationError(f"embedding for {key!r} has dimension {v.size}, expected {self.dim}")
        return v / np.linalg.norm(v)


class FileImageEmbedder:
    def __init__(self, store: EmbeddingStore):
        self.store = store

    def embed(self, image: np.ndarray, key: str | None = None) -> np.ndarray:
        if key is None:
            raise KeyError("file-backed embedder needs the image path as key")
        return self.store.get(key)


class FileClassifier:
    def __init__(self, store: EmbeddingStore, num_classes: int):
        self.store = store
        self.num_classes = num_classes

    def classify(self, image: np.ndarray, key: str | None = None) -> np.ndarray:
        if key is None:
            raise KeyError("file-backed classifier needs the image path as key")
        p = self.store.get(key)
        if p.size != self.num_classes or (p < 0).any() or abs(p.sum() - 1.0) > 1e-5:
            raise ValidationError(f"stored probabilities for {key!r} are not on the {self.num_classes}-simplex")
        return p / p.sum()


@dataclass
class EncoderSuite:
    text: TextEncoder
    face: FaceEmbedder
    image: ImageEmbedder
    classifier: ProbClassifier
    parser: HumanParser

    @classmethod
    def reference(cls, layout: UVLayoutSpec, d_text: int = 32, max_tokens: int = 8, d_face: int = 512) -> "EncoderSuite":
        return cls(
            text=ReferenceTextEncoder(dim=d_text, max_tokens=max_tokens),
            face=ReferenceFaceEmbedder(dim=d_face),
            image=ReferenceImageEmbedder(dim=d_text),
            classifier=ReferenceClassifier(),
            parser=NearestColorParser(layout),
        )

    def with_embeddings_dir(self, directory: str | Path) -> "EncoderSuite":
        """Swap in file-backed encoders for each ``face/``, ``image/``, ``classifier/`` subdirectory present."""
        root = Path(directory)
        if not root.is_dir():
            raise ValidationError(f"embeddings directory {root} does not exist")
        face, image, classifier = self.face, self.image, self.classifier
        if (root / "face").is_dir():
            face = FileFaceEmbedder(EmbeddingStore(root / "face"), self.face.dim)
        if (root / "image").is_dir():
            image = FileImageEmbedder(EmbeddingStore(root / "image"))
        if (root / "classifier").is_dir():
            classifier = FileClassifier(EmbeddingStore(root / "classifier"), self.classifier.num_classes)
        return EncoderSuite(self.text, face, image, classifier, self.parser)
