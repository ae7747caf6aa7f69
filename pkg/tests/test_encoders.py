import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import fd_relative_errors
from oracles import hashed_token_rows
from uvmapid.encoders import (
    EmbeddingStore,
    EncoderSuite,
    FaceProjector,
    FaceEmbedder,
    FileClassifier,
    HumanParser,
    ImageEmbedder,
    ProbClassifier,
    NearestColorParser,
    ReferenceClassifier,
    ReferenceFaceEmbedder,
    ReferenceImageEmbedder,
    ReferenceTextEncoder,
    TextEncoder,
    project_face,
    read_embedding,
    write_embedding,
)
from uvmapid.errors import ValidationError
from uvmapid.synthetic import synthetic_face

images = st.builds(
    lambda seed, h, w: np.random.default_rng(seed).uniform(0, 1, (h, w, 3)),
    st.integers(0, 2**31 - 1), st.integers(1, 40), st.integers(1, 40),
)


def test_text_encoder_deterministic_and_null():
    enc = ReferenceTextEncoder()
    assert np.array_equal(enc.encode("a sks texturemap"), ReferenceTextEncoder().encode("a sks texturemap"))
    null = enc.encode("")
    assert null.shape == (8, 32)
    assert np.array_equal(null, enc.null_embedding)
    assert np.array_equal(null, np.repeat(enc.table[:1], 8, axis=0))


def test_text_encoder_matches_standalone_hash():
    enc = ReferenceTextEncoder(dim=32, max_tokens=8, vocab_size=4096, seed=1234)
    a, b = "a texturemap", "a texturemap of Asian woman"
    for prompt in (a, b, "  A   Texturemap ", "one two three four five six seven eight nine ten"):
        assert enc.token_ids(prompt) == hashed_token_rows(prompt, 1234, 4096, 8)
    ea, eb = enc.encode(a), enc.encode(b)
    assert np.array_equal(ea[:2], eb[:2])
    assert not np.array_equal(ea[2:5], eb[2:5])
    assert np.array_equal(ea[2:], np.repeat(enc.table[:1], 6, axis=0))


def test_text_encoder_truncates():
    enc = ReferenceTextEncoder(max_tokens=3)
    assert enc.encode("w " * 20).shape == (3, 32)


def test_face_embedder_unit_norm_and_ordering():
    emb = ReferenceFaceEmbedder()
    face = synthetic_face(0, "Asian", "female", 64)
    a = emb.embed(face)
    assert a.shape == (512,)
    assert abs(np.linalg.norm(a) - 1) <= 1e-6
    assert float(a @ emb.embed(face.copy())) == pytest.approx(1.0, abs=1e-12)
    tweaked = face.copy()
    tweaked[10, 10] = 1.0 - tweaked[10, 10]
    c = float(a @ emb.embed(tweaked))
    assert 0.9 < c < 1.0


def test_face_embedder_zero_image():
    with pytest.warns(RuntimeWarning):
        v = ReferenceFaceEmbedder().embed(np.zeros((8, 8, 3)))
    assert v[0] == 1.0 and not v[1:].any()


@settings(max_examples=50, deadline=None)
@given(images)
def test_reference_encoder_invariants(img):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        f = ReferenceFaceEmbedder(dim=64).embed(img)
    assert abs(np.linalg.norm(f) - 1) <= 1e-6
    p = ReferenceClassifier().classify(img)
    assert p.shape == (10,) and (p >= 0).all() and abs(p.sum() - 1) <= 1e-9
    assert np.array_equal(p, ReferenceClassifier().classify(img))
    assert ReferenceImageEmbedder().embed(img).shape == (32,)


def test_rejects_non_rgb():
    with pytest.raises(ValidationError):
        ReferenceFaceEmbedder().embed(np.zeros((4, 4)))
    with pytest.raises(ValidationError):
        ReferenceClassifier().classify(np.zeros((0, 4, 3)))


def test_parser_recovers_layout(layout):
    parser = NearestColorParser(layout)
    gt = layout.ground_truth(32, 48)
    seg = parser.parse(layout.colorize(gt))
    assert np.array_equal(seg.labels, gt.labels)


@settings(max_examples=30, deadline=None)
@given(images)
def test_parser_covers_every_pixel(img):
    from uvmapid.render import load_layout

    layout = load_layout()
    seg = NearestColorParser(layout).parse(img)
    assert seg.labels.shape == img.shape[:2]
    assert set(np.unique(seg.labels)) <= set(layout.label_set)


def test_projector_shape_zero_and_identity():
    proj = FaceProjector(d_face=8, num_tokens=2, d_img=4, seed=0).double()
    emb = torch.randn(8, dtype=torch.float64)
    assert project_face(emb, proj).shape == (2, 4)
    with torch.no_grad():
        proj.proj.weight.zero_()
        proj.proj.bias.zero_()
    assert not project_face(emb, proj).any()
    with torch.no_grad():
        proj.proj.weight.copy_(torch.eye(8, dtype=torch.float64))
    assert torch.equal(project_face(emb, proj), emb.reshape(2, 4))
    with pytest.raises(ValidationError):
        project_face(torch.zeros(7), proj)


def test_projector_null_tokens_are_bias():
    proj = FaceProjector(d_face=8, num_tokens=2, d_img=4, seed=3)
    assert torch.equal(proj.null_tokens(), proj.proj.bias.reshape(2, 4))
    assert proj.null_tokens().abs().sum() > 0


def test_projector_gradients_match_finite_differences():
    proj = FaceProjector(d_face=6, num_tokens=2, d_img=3, seed=1).double()
    g = torch.Generator().manual_seed(0)
    emb = torch.randn(3, 6, generator=g, dtype=torch.float64)
    target = torch.randn(3, 2, 3, generator=g, dtype=torch.float64)
    errors = fd_relative_errors(lambda: ((project_face(emb, proj).tanh() - target) ** 2).mean(),
                                dict(proj.named_parameters()))
    assert max(errors.values()) <= 1e-4


def test_embedding_file_roundtrip(tmp_path):
    vec = np.arange(5, dtype=np.float32) / 3
    write_embedding(tmp_path / "a.emb", "faces/id000.png", vec)
    key, out = read_embedding(tmp_path / "a.emb")
    assert key == "faces/id000.png"
    assert np.array_equal(out, vec.astype(np.float64))
    raw = (tmp_path / "a.emb").read_bytes()
    assert raw[:4] == b"UVEM"
    (tmp_path / "b.emb").write_bytes(raw[:-2])
    with pytest.raises(ValidationError):
        read_embedding(tmp_path / "b.emb")


def test_embedding_store_lookup(tmp_path):
    d = tmp_path / "store"
    d.mkdir()
    write_embedding(d / "x.emb", str(tmp_path / "img" / "x.png"), [1, 0, 0])
    write_embedding(d / "y.emb", "rel/y.png#face", [0, 1, 0])
    store = EmbeddingStore(d)
    assert len(store) == 2
    assert store.get(str(tmp_path / "img" / "x.png"))[0] == 1
    assert store.get("elsewhere/x.png")[0] == 1
    assert store.get("other/y.png#face")[1] == 1
    with pytest.raises(KeyError):
        store.get("z.png")


def test_file_classifier_checks_simplex(tmp_path):
    write_embedding(tmp_path / "p.emb", "p.png", [0.5, 0.7])
    clf = FileClassifier(EmbeddingStore(tmp_path), 2)
    with pytest.raises(ValidationError):
        clf.classify(np.zeros((2, 2, 3)), key="p.png")


def test_suite_substitution(tmp_path, layout):
    suite = EncoderSuite.reference(layout)
    for proto, obj in ((TextEncoder, suite.text), (FaceEmbedder, suite.face), (ImageEmbedder, suite.image),
                       (ProbClassifier, suite.classifier), (HumanParser, suite.parser)):
        assert isinstance(obj, proto)
    (tmp_path / "face").mkdir()
    vec = np.zeros(512)
    vec[3] = 2.0
    write_embedding(tmp_path / "face" / "f.emb", "f.png", vec)
    swapped = suite.with_embeddings_dir(tmp_path)
    out = swapped.face.embed(np.zeros((4, 4, 3)), key="f.png")
    assert out[3] == 1.0
    assert swapped.classifier is suite.classifier
    with pytest.raises(ValidationError):
        suite.with_embeddings_dir(tmp_path / "missing")
