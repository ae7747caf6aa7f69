"""Regenerate the rasterizer golden PNGs: ``python3 tests/golden/make_goldens.py``.

Only rerun after an intentional rasterizer change; test_render checks the
goldens against an analytic per-pixel oracle as well as byte-for-byte.
"""

from pathlib import Path

import numpy as np

from uvmapid.images import save_png
from uvmapid.render import RenderConfig, load_obj, rasterize

HERE = Path(__file__).parent
CFG = RenderConfig(width=24, height=24, frame=(-1.0, 1.0, -1.0, 1.0), background=(0.0, 0.0, 0.0))


def gradient_texture(size=8):
    """Texel (i, j) = (j / (size-1), i / (size-1), 0.5); distinct per texel."""
    i, j = np.mgrid[0:size, 0:size]
    return np.stack([j / (size - 1), i / (size - 1), np.full((size, size), 0.5)], axis=-1)


def halves_texture():
    """Left half pure red, right half pure blue, 2x4 texels."""
    tex = np.zeros((2, 4, 3))
    tex[:, :2, 0] = 1.0
    tex[:, 2:, 2] = 1.0
    return tex


def render_single():
    return rasterize(load_obj(HERE / "single_triangle.obj"), gradient_texture(), CFG)


def render_depth():
    return rasterize(load_obj(HERE / "two_triangle_depth.obj"), halves_texture(), CFG)


if __name__ == "__main__":
    save_png(render_single(), HERE / "single_triangle.png")
    save_png(render_depth(), HERE / "two_triangle_depth.png")
    print("goldens written")
