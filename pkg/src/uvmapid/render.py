"""OBJ meshes with UVs, a software rasterizer, and the UV layout description.

Screen convention: x to the right, y down, pixel centres at ``(j + 0.5, i + 0.5)``.
The camera is orthographic and looks down ``-z`` in view space, so a larger
view-space ``z`` is nearer. Texture rows run top to bottom, so texture
coordinate ``v`` maps to row ``floor((1 - v) * H)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from .errors import DegenerateTriangleError, MissingUVError, ObjParseError, ValidationError
from .images import resample_area


@dataclass
class Mesh:
    vertices: np.ndarray  # (V, 3)
    uvs: np.ndarray  # (U, 2)
    faces: np.ndarray  # (F, 3, 2) of (vertex index, uv index), 0-based
    uv_policy: Literal["clamp", "wrap"] = "clamp"

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.uvs = np.asarray(self.uvs, dtype=np.float64).reshape(-1, 2)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3, 2)
        if self.uv_policy not in ("clamp", "wrap"):
            raise ValidationError(f"unknown uv policy {self.uv_policy!r}")
        if len(self.faces):
            if self.faces[..., 0].min() < 0 or self.faces[..., 0].max() >= len(self.vertices):
                raise ValidationError("face references a vertex index out of range")
            if self.faces[..., 1].min() < 0 or self.faces[..., 1].max() >= len(self.uvs):
                raise ValidationError("face references a uv index out of range")

    @classmethod
    def empty(cls) -> "Mesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 2)), np.zeros((0, 3, 2), dtype=np.int64))


def _parse_index(token: str, count: int, lineno: int, what: str) -> int:
    try:
        idx = int(token)
    except ValueError:
        raise ObjParseError(f"bad {what} index {token!r}", lineno) from None
    if idx == 0:
        raise ObjParseError(f"{what} index 0 is invalid (OBJ indices are 1-based)", lineno)
    resolved = idx - 1 if idx > 0 else count + idx
    if not 0 <= resolved < count:
        raise ObjParseError(f"{what} index {idx} out of range (have {count})", lineno)
    return resolved


def parse_obj(text: str) -> Mesh:
    vertices: list[list[float]] = []
    uvs: list[list[float]] = []
    faces: list[list[tuple[int, int]]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        tag, args = parts[0], parts[1:]
        try:
            if tag == "v":
                if len(args) < 3:
                    raise ObjParseError("vertex needs 3 coordinates", lineno)
                vertices.append([float(a) for a in args[:3]])
            elif tag == "vt":
                if len(args) < 2:
                    raise ObjParseError("texture coordinate needs 2 components", lineno)
                uvs.append([float(a) for a in args[:2]])
            elif tag == "f":
                if len(args) < 3:
                    raise ObjParseError("face needs at least 3 corners", lineno)
                corners = []
                for a in args:
                    fields = a.split("/")
                    if len(fields) < 2 or fields[1] == "":
                        raise MissingUVError("mesh has no UVs: face corner lacks a vt index", lineno)
                    corners.append(
                        (
                            _parse_index(fields[0], len(vertices), lineno, "vertex"),
                            _parse_index(fields[1], len(uvs), lineno, "uv"),
                        )
                    )
                # fan triangulation around the first corner
                for k in range(1, len(corners) - 1):
                    faces.append([corners[0], corners[k], corners[k + 1]])
        except ValueError as exc:
            raise ObjParseError(str(exc), lineno) from None
    return Mesh(np.array(vertices).reshape(-1, 3), np.array(uvs).reshape(-1, 2), np.array(faces).reshape(-1, 3, 2))


def load_obj(path: str | Path) -> Mesh:
    return parse_obj(Path(path).read_text(encoding="utf-8"))


def save_obj(mesh: Mesh, path: str | Path) -> None:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"vt {u!r} {v!r}" for u, v in mesh.uvs.tolist()]
    for face in mesh.faces.tolist():
        lines.append("f " + " ".join(f"{vi + 1}/{ti + 1}" for vi, ti in face))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


def barycentric(p: Sequence[float], a: Sequence[float], b: Sequence[float], c: Sequence[float]):
    """Weights ``(u, v, w)`` with ``u + v + w = 1`` and ``p = u a + v b + w c``."""
    area = _edge(a[0], a[1], b[0], b[1], c[0], c[1])
    if area == 0:
        raise DegenerateTriangleError("triangle has zero area")
    u = _edge(b[0], b[1], c[0], c[1], p[0], p[1]) / area
    v = _edge(c[0], c[1], a[0], a[1], p[0], p[1]) / area
    return u, v, 1.0 - u - v


@dataclass
class RenderConfig:
    width: int = 256
    height: int = 256
    view: Literal["front", "right", "back", "left"] = "front"
    # (xmin, xmax, ymin, ymax) of the view plane; None fits the mesh bounds
    frame: tuple[float, float, float, float] | None = None
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    depth_test: bool = True
    margin: float = 0.05

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValidationError("image size must be at least 1x1")
        if self.view not in _VIEW_ANGLES:
            raise ValidationError(f"unknown view {self.view!r}")
        if self.frame is not None:
            self.frame = tuple(float(f) for f in self.frame)

    @classmethod
    def from_dict(cls, d: dict) -> "RenderConfig":
        d = dict(d)
        if "background" in d:
            d["background"] = tuple(d["background"])
        return cls(**d)


_VIEW_ANGLES = {"front": 0.0, "right": 90.0, "back": 180.0, "left": 270.0}


def view_transform(vertices: np.ndarray, view: str) -> np.ndarray:
    if view == "front":
        return vertices.copy()
    theta = math.radians(_VIEW_ANGLES[view])
    c, s = round(math.cos(theta), 15), round(math.sin(theta), 15)
    x, y, z = vertices[:, 0], vertices[:, 1], vertices[:, 2]
    return np.stack([c * x + s * z, y, -s * x + c * z], axis=1)


def _fit_frame(view_verts: np.ndarray, cfg: RenderConfig) -> tuple[float, float, float, float]:
    if cfg.frame is not None:
        return cfg.frame
    if len(view_verts) == 0:
        return (-1.0, 1.0, -1.0, 1.0)
    xmin, ymin = view_verts[:, :2].min(axis=0)
    xmax, ymax = view_verts[:, :2].max(axis=0)
    cx, cy = (xmin + xmax) / 2, (ymin + ymax) / 2
    half_w = max((xmax - xmin) / 2, 1e-9) * (1 + cfg.margin)
    half_h = max((ymax - ymin) / 2, 1e-9) * (1 + cfg.margin)
    aspect = cfg.width / cfg.height
    if half_w / half_h < aspect:
        half_w = half_h * aspect
    else:
        half_h = half_w / aspect
    return (cx - half_w, cx + half_w, cy - half_h, cy + half_h)


def _is_top_left(ax, ay, bx, by) -> bool:
    # edge a->b of a triangle wound with positive _edge area in y-down screen space
    dx, dy = bx - ax, by - ay
    return (dy == 0 and dx > 0) or dy < 0


def _texel_index(coord: np.ndarray, size: int, policy: str) -> np.ndarray:
    if policy == "wrap":
        coord = coord - np.floor(coord)
    idx = np.floor(coord * size).astype(np.int64)
    return np.clip(idx, 0, size - 1)


def sample_texture(texture: np.ndarray, uv: np.ndarray, policy: str = "clamp") -> np.ndarray:
    h, w = texture.shape[:2]
    cols = _texel_index(uv[..., 0], w, policy)
    rows = _texel_index(1.0 - uv[..., 1], h, policy)
    return texture[rows, cols]


def rasterize(mesh: Mesh, texture: np.ndarray, cfg: RenderConfig | None = None) -> np.ndarray:
    """Render ``mesh`` textured with ``texture`` (HxWx3 floats) to an HxWx3 image."""
    cfg = cfg or RenderConfig()
    texture = np.asarray(texture, dtype=np.float64)
    W, H = cfg.width, cfg.height
    image = np.empty((H, W, 3))
    image[:] = np.asarray(cfg.background, dtype=np.float64)
    if len(mesh.faces) == 0:
        return image

    verts = view_transform(mesh.vertices, cfg.view)
    xmin, xmax, ymin, ymax = _fit_frame(verts, cfg)
    sx = (verts[:, 0] - xmin) / (xmax - xmin) * W
    sy = (ymax - verts[:, 1]) / (ymax - ymin) * H
    sz = verts[:, 2]
    depth = np.full((H, W), -np.inf)

    for face in mesh.faces:
        vi, ti = face[:, 0], face[:, 1]
        ax, ay, bx, by, cx, cy = sx[vi[0]], sy[vi[0]], sx[vi[1]], sy[vi[1]], sx[vi[2]], sy[vi[2]]
        order = [0, 1, 2]
        area = _edge(ax, ay, bx, by, cx, cy)
        if area == 0:
            continue
        if area < 0:
            order = [0, 2, 1]
            bx, by, cx, cy = cx, cy, bx, by
            area = -area
        vi, ti = vi[order], ti[order]

        j0 = max(int(math.floor(min(ax, bx, cx) - 0.5)), 0)
        j1 = min(int(math.ceil(max(ax, bx, cx) - 0.5)), W - 1)
        i0 = max(int(math.floor(min(ay, by, cy) - 0.5)), 0)
        i1 = min(int(math.ceil(max(ay, by, cy) - 0.5)), H - 1)
        if j0 > j1 or i0 > i1:
            continue
        px = np.arange(j0, j1 + 1, dtype=np.float64)[None, :] + 0.5
        py = np.arange(i0, i1 + 1, dtype=np.float64)[:, None] + 0.5

        w0 = _edge(bx, by, cx, cy, px, py)
        w1 = _edge(cx, cy, ax, ay, px, py)
        w2 = _edge(ax, ay, bx, by, px, py)
        inside = np.ones(w0.shape, dtype=bool)
        for wk, edge in ((w0, (bx, by, cx, cy)), (w1, (cx, cy, ax, ay)), (w2, (ax, ay, bx, by))):
            inside &= (wk > 0) | ((wk == 0) & _is_top_left(*edge))
        if not inside.any():
            continue

        u, v, w = w0 / area, w1 / area, w2 / area
        z = u * sz[vi[0]] + v * sz[vi[1]] + w * sz[vi[2]]
        region = depth[i0 : i1 + 1, j0 : j1 + 1]
        if cfg.depth_test:
            inside &= z > region
        if not inside.any():
            continue
        uv = (
            u[..., None] * mesh.uvs[ti[0]]
            + v[..., None] * mesh.uvs[ti[1]]
            + w[..., None] * mesh.uvs[ti[2]]
        )
        region[inside] = z[inside]
        colors = sample_texture(texture, uv[inside], mesh.uv_policy)
        image[i0 : i1 + 1, j0 : j1 + 1][inside] = colors
    return image


@dataclass
class SegmentationMap:
    labels: np.ndarray  # (H, W) int
    label_set: tuple[int, ...]

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.label_set = tuple(sorted(int(x) for x in self.label_set))
        if self.labels.ndim != 2:
            raise ValidationError("segmentation labels must be a 2-D grid")
        if not np.isin(self.labels, self.label_set).all():
            raise ValidationError("segmentation contains labels outside its label set")

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape


def _check_rect(rect: Sequence[float], what: str) -> tuple[float, float, float, float]:
    if len(rect) != 4:
        raise ValidationError(f"{what} must be [x0, y0, x1, y1]")
    x0, y0, x1, y1 = (float(r) for r in rect)
    if not (0.0 <= x0 <= 1.0 and 0.0 <= x1 <= 1.0 and 0.0 <= y0 <= 1.0 and 0.0 <= y1 <= 1.0):
        raise ValidationError(f"{what} {list(rect)} lies outside the unit square")
    if x1 <= x0 or y1 <= y0:
        raise ValidationError(f"{what} {list(rect)} has zero area")
    return x0, y0, x1, y1


@dataclass
class UVLayoutSpec:
    """Body-part layout of a UV texture.

    Rectangles are ``[x0, y0, x1, y1]`` in normalized image coordinates with
    the origin at the top-left texel corner. Regions are painted in order
    over the background label.
    """

    face_rect: tuple[float, float, float, float]
    labels: dict[int, str]
    palette: dict[int, tuple[float, float, float]]
    regions: list[tuple[int, tuple[float, float, float, float]]] = field(default_factory=list)
    background_label: int = 0
    name: str = "layout"

    def __post_init__(self):
        self.face_rect = _check_rect(self.face_rect, "face rectangle")
        self.regions = [(int(lbl), _check_rect(r, f"region {lbl}")) for lbl, r in self.regions]
        for lbl, _ in self.regions:
            if lbl not in self.labels:
                raise ValidationError(f"region label {lbl} missing from the label table")
        if set(self.palette) != set(self.labels):
            raise ValidationError("palette and label table must cover the same labels")

    @property
    def label_set(self) -> tuple[int, ...]:
        return tuple(sorted(self.labels))

    def ground_truth(self, height: int, width: int) -> SegmentationMap:
        labels = np.full((height, width), self.background_label, dtype=np.int64)
        ys = (np.arange(height) + 0.5) / height
        xs = (np.arange(width) + 0.5) / width
        for lbl, (x0, y0, x1, y1) in self.regions:
            rows = (ys >= y0) & (ys < y1)
            cols = (xs >= x0) & (xs < x1)
            labels[np.ix_(rows, cols)] = lbl
        return SegmentationMap(labels, self.label_set)

    def colorize(self, seg: SegmentationMap) -> np.ndarray:
        lut = np.zeros((max(self.labels) + 1, 3))
        for lbl, color in self.palette.items():
            lut[lbl] = color
        return lut[seg.labels]

    def template_texture(self, height: int, width: int) -> np.ndarray:
        return self.colorize(self.ground_truth(height, width))

    def face_pixel_box(self, height: int, width: int) -> tuple[int, int, int, int]:
        x0, y0, x1, y1 = self.face_rect
        return (
            int(round(y0 * height)),
            int(round(y1 * height)),
            int(round(x0 * width)),
            int(round(x1 * width)),
        )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "face_rect": list(self.face_rect),
            "background_label": self.background_label,
            "labels": [
                {"id": k, "name": self.labels[k], "color": [round(c * 255) for c in self.palette[k]]}
                for k in sorted(self.labels)
            ],
            "regions": [{"label": lbl, "rect": list(r)} for lbl, r in self.regions],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "UVLayoutSpec":
        labels = {int(e["id"]): str(e["name"]) for e in d["labels"]}
        palette = {int(e["id"]): tuple(c / 255.0 for c in e["color"]) for e in d["labels"]}
        regions = [(int(r["label"]), tuple(r["rect"])) for r in d.get("regions", [])]
        return cls(
            face_rect=tuple(d["face_rect"]),
            labels=labels,
            palette=palette,
            regions=regions,
            background_label=int(d.get("background_label", 0)),
            name=d.get("name", "layout"),
        )


def load_layout(path: str | Path | None = None) -> UVLayoutSpec:
    """Load a layout JSON file; ``None`` gives the bundled SMPL-style layout."""
    if path is None:
        text = resources.files("uvmapid").joinpath("data/smpl_layout.json").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return UVLayoutSpec.from_dict(json.loads(text))


def load_template_mesh() -> Mesh:
    text = resources.files("uvmapid").joinpath("data/smpl_template.obj").read_text(encoding="utf-8")
    return parse_obj(text)


def extract_face_region(
    texture: np.ndarray, layout: UVLayoutSpec, size: tuple[int, int] | None = None
) -> np.ndarray:
    """Crop the layout's face rectangle, optionally box-resampled to ``size`` (h, w)."""
    texture = np.asarray(texture, dtype=np.float64)
    h, w = texture.shape[:2]
    r0, r1, c0, c1 = layout.face_pixel_box(h, w)
    if r1 <= r0 or c1 <= c0:
        raise ValidationError(f"face rectangle covers no pixels at {h}x{w}")
    crop = texture[r0:r1, c0:c1]
    if size is not None:
        crop = resample_area(crop, size[0], size[1])
    return crop.copy()
