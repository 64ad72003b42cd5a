"""Procedural RGB-D scenes, training-time augmentation and dataset files.

Scenes are a ground-like background whose depth grows from the bottom row to
the top row, plus fronto-parallel rectangles and ellipses. Colour is rendered
through exponential haze, so brightness and saturation carry depth, and
object size and texture frequency shrink with distance.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import pnm


@dataclass
class Sample:
    rgb: np.ndarray  # (1, 3, h, w) float32 in [0, 1]
    depth: np.ndarray  # (1, 1, h, w) float32 metres, 0 where invalid
    valid: np.ndarray  # (1, 1, h, w) bool

    @property
    def shape(self):
        return self.rgb.shape[2:]

    def equals(self, other: "Sample") -> bool:
        return (
            np.array_equal(self.rgb, other.rgb)
            and np.array_equal(self.depth, other.depth)
            and np.array_equal(self.valid, other.valid)
        )


@dataclass
class SceneSpec:
    seed: int = 0
    height: int = 64
    width: int = 64
    d_near: float = 1.5
    d_far: float = 12.0
    objects: tuple = (1, 4)
    haze: float = 0.2
    haze_color: tuple = (0.55, 0.7, 0.95)
    albedo_tint: float = 0.0
    invalid_fraction: float = 0.02
    focal: float = 20.0  # pixels per metre of object extent at 1 m
    texture: float = 0.25
    flat_background: bool = False

    def __post_init__(self):
        if not self.d_near > 0 or self.d_far < self.d_near:
            raise ValueError("need 0 < d_near <= d_far")
        if not 0 <= self.invalid_fraction < 1:
            raise ValueError("invalid_fraction must lie in [0, 1)")
        if self.objects[0] < 0 or self.objects[1] < self.objects[0]:
            raise ValueError("object count range must be 0 <= lo <= hi")
        if self.haze < 0:
            raise ValueError("haze coefficient must be non-negative")


def _log_uniform(rng, lo, hi):
    return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))


def _albedo(rng, tint):
    """Grey level with a small per-channel tint, so haze hue stays informative."""
    return rng.uniform(0.05, 0.7) * (1 + tint * rng.uniform(-1, 1, 3))


def generate_scene(spec: SceneSpec) -> Sample:
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width
    rows = np.arange(h, dtype=np.float64)[:, None]
    cols = np.arange(w, dtype=np.float64)[None, :]

    bg_albedo = _albedo(rng, spec.albedo_tint)
    if spec.flat_background:
        d_bg = _log_uniform(rng, spec.d_near, spec.d_far)
        depth = np.full((h, w), d_bg)
    else:
        d_bottom = _log_uniform(rng, spec.d_near, min(spec.d_far, 2.5 * spec.d_near))
        d_top = spec.d_far
        t = np.broadcast_to(rows / max(h - 1, 1), (h, w))  # 0 at top, 1 at bottom
        depth = np.exp(np.log(d_top) + t * (np.log(d_bottom) - np.log(d_top)))
    albedo = np.broadcast_to(bg_albedo, (h, w, 3)).copy()

    n_obj = int(rng.integers(spec.objects[0], spec.objects[1] + 1))
    for _ in range(n_obj):
        d = _log_uniform(rng, spec.d_near, spec.d_far)
        extent = rng.uniform(0.6, 1.6, 2) * spec.focal / d  # apparent half-size ~ 1/depth
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        if rng.random() < 0.5:
            inside = (np.abs(rows - cy) <= extent[0]) & (np.abs(cols - cx) <= extent[1])
        else:
            inside = ((rows - cy) / extent[0]) ** 2 + ((cols - cx) / extent[1]) ** 2 <= 1.0
        visible = inside & (d < depth)  # z-buffer
        if not visible.any():
            continue
        base = _albedo(rng, spec.albedo_tint)
        freq = rng.uniform(1.0, 3.0) * 2 * np.pi / (spec.focal / d * 0.5)
        phase = rng.uniform(0, 2 * np.pi)
        theta = rng.uniform(0, np.pi)
        pattern = np.sin(freq * (np.cos(theta) * cols + np.sin(theta) * rows) + phase)
        tex = base[None, None, :] * (1 + spec.texture * pattern[..., None])
        depth = np.where(visible, d, depth)
        albedo = np.where(visible[..., None], np.clip(tex, 0, 1), albedo)

    trans = np.exp(-spec.haze * depth)[..., None]
    rgb = albedo * trans + np.asarray(spec.haze_color) * (1 - trans)
    rgb = np.clip(np.rint(rgb * 255) / 255, 0, 1).astype(np.float32)

    valid = rng.random((h, w)) >= spec.invalid_fraction
    depth = np.where(valid, depth, 0.0).astype(np.float32)
    return Sample(rgb.transpose(2, 0, 1)[None].copy(), depth[None, None], valid[None, None])


def generate_dataset(spec: SceneSpec, count: int) -> list:
    """``count`` scenes, scene i seeded with ``spec.seed + i``."""
    out = []
    for i in range(count):
        sub = SceneSpec(**{**spec.__dict__, "seed": spec.seed + i})
        out.append(generate_scene(sub))
    return out


def fill_invalid(depth, valid) -> np.ndarray:
    """Copy the nearest valid depth into every invalid pixel.

    Distance is Euclidean; ties go to the smaller row, then smaller column.
    Works on (h, w) maps or any array whose last two axes are spatial.
    """
    depth = np.asarray(depth)
    valid = np.asarray(valid, dtype=bool)
    if depth.shape != valid.shape:
        raise ValueError(f"depth {depth.shape} and mask {valid.shape} differ")
    if depth.ndim > 2:
        out = depth.copy()
        for idx in np.ndindex(depth.shape[:-2]):
            out[idx] = fill_invalid(depth[idx], valid[idx])
        return out
    if not valid.any():
        raise ValueError("cannot fill a depth map with no valid pixels")
    out = depth.copy()
    holes = np.argwhere(~valid)
    if len(holes) == 0:
        return out
    src = np.argwhere(valid)  # row-major, so argmin picks (smaller row, smaller col) on ties
    vals = depth[valid]
    for chunk in np.array_split(holes, max(1, len(holes) // 256)):
        d2 = ((chunk[:, None, :] - src[None, :, :]) ** 2).sum(-1)
        out[chunk[:, 0], chunk[:, 1]] = vals[np.argmin(d2, axis=1)]
    return out


# -- augmentation -------------------------------------------------------------


@dataclass
class AugmentParams:
    color: tuple = (1.0, 1.0, 1.0)
    scale: float = 1.0
    flip: bool = False
    angle: float = 0.0  # degrees


def draw_augment_params(rng) -> AugmentParams:
    return AugmentParams(
        color=tuple(rng.uniform(0.9, 1.1, 3)),
        scale=float(rng.uniform(1.3, 1.5)),
        flip=bool(rng.random() < 0.5),
        angle=float(rng.uniform(-5.0, 5.0)),
    )


def _sample_grid(h, w, scale, angle_deg):
    """Source coordinates for each output pixel: zoom about the centre, then rotate."""
    cy, cx = (h - 1) / 2, (w - 1) / 2
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    a = np.deg2rad(angle_deg)
    # inverse rotation of output coordinates, then inverse zoom
    ry = np.cos(a) * (yy - cy) - np.sin(a) * (xx - cx)
    rx = np.sin(a) * (yy - cy) + np.cos(a) * (xx - cx)
    return ry / scale + cy, rx / scale + cx


def apply_augment(s: Sample, p: AugmentParams) -> Sample:
    rgb = np.clip(s.rgb[0] * np.asarray(p.color, dtype=np.float32)[:, None, None], 0, 1)
    depth = s.depth[0, 0].astype(np.float64)
    valid = s.valid[0, 0]
    h, w = depth.shape
    if p.scale != 1.0 or p.angle != 0.0:
        sy, sx = _sample_grid(h, w, p.scale, p.angle)
        inb = (sy >= -0.5) & (sy <= h - 0.5) & (sx >= -0.5) & (sx <= w - 0.5)
        coords = np.stack([sy, sx])
        rgb = np.stack([ndimage.map_coordinates(c, coords, order=1, mode="nearest") for c in rgb])
        ny = np.clip(np.rint(sy), 0, h - 1).astype(int)
        nx = np.clip(np.rint(sx), 0, w - 1).astype(int)
        valid = valid[ny, nx] & inb
        depth = np.where(valid, depth[ny, nx] / p.scale, 0.0)
    if p.flip:
        rgb, depth, valid = rgb[:, :, ::-1], depth[:, ::-1], valid[:, ::-1]
    return Sample(
        np.ascontiguousarray(rgb, dtype=np.float32)[None],
        np.ascontiguousarray(depth, dtype=np.float32)[None, None],
        np.ascontiguousarray(valid)[None, None],
    )


def augment_sample(s: Sample, rng) -> Sample:
    """Colour scale, zoom-and-centre-crop, horizontal flip and small rotation."""
    return apply_augment(s, draw_augment_params(rng))


def expand_offline(samples, seed: int, copies: int = 4) -> list:
    """Replace each base sample by ``copies`` independently augmented draws."""
    out = []
    for i, s in enumerate(samples):
        for k in range(copies):
            out.append(augment_sample(s, np.random.default_rng([seed, i, k])))
    return out


# -- dataset directory ----------------------------------------------------------

MANIFEST = "manifest.txt"


class DatasetError(ValueError):
    pass


def write_dataset(samples, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, s in enumerate(samples):
        sid = f"{i:06d}"
        names = (f"{sid}_rgb.ppm", f"{sid}_depth.pfm", f"{sid}_mask.pgm")
        pnm.write_ppm(d / names[0], s.rgb[0].transpose(1, 2, 0))
        pnm.write_pfm(d / names[1], np.where(s.valid[0, 0], s.depth[0, 0], 0.0))
        pnm.write_pgm(d / names[2], s.valid[0, 0])
        lines.append(f"{sid} {' '.join(names)}\n")
    (d / MANIFEST).write_text("".join(lines))


def read_manifest(directory) -> list:
    d = Path(directory)
    path = d / MANIFEST
    if not path.exists():
        raise DatasetError(f"{path}: manifest not found")
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 4:
            raise DatasetError(f"{path}:{lineno}: expected 'id rgb depth mask', got {len(parts)} fields")
        records.append(parts)
    return records


def read_dataset(directory) -> list:
    d = Path(directory)
    out = []
    for sid, rgb_p, depth_p, mask_p in read_manifest(d):
        try:
            rgb = pnm.read_ppm(d / rgb_p)
            depth = pnm.read_pfm(d / depth_p)
            valid = pnm.read_pgm(d / mask_p)
        except (pnm.FormatError, OSError) as exc:
            raise DatasetError(f"sample {sid}: {exc}") from exc
        if not (rgb.shape[:2] == depth.shape == valid.shape):
            raise DatasetError(f"sample {sid}: rgb {rgb.shape[:2]}, depth {depth.shape}, mask {valid.shape} disagree")
        out.append(Sample(rgb.transpose(2, 0, 1)[None].copy(), depth[None, None].copy(), valid[None, None].copy()))
    return out
