"""Deterministic synthetic stereo pairs with exact disparity and occlusion ground truth.

A scene is a smooth background surface plus a few fronto-parallel occluder
blobs at integer disparity. Each layer carries its own procedural texture,
defined continuously along x so the right view can be rendered exactly.
"""
import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from .exceptions import InvalidInputError, ManifestError
from .imaging import load_image, read_pfm, save_png, warp_with_disparity, write_pfm

TEXTURE_FAMILIES = ("perlin", "blobs")
SUPERSAMPLE = 4
TEXTURE_LOW, TEXTURE_HIGH = 0.15, 0.7


@dataclass
class SceneSpec:
    seed: int = 0
    height: int = 128
    width: int = 128
    max_disp: float = 8.0
    texture: str = "perlin"
    n_occluders: int = 3
    gain_range: tuple = (1.0, 1.0)
    bias_range: tuple = (0.0, 0.0)

    def __post_init__(self):
        self.gain_range = tuple(float(g) for g in self.gain_range)
        self.bias_range = tuple(float(b) for b in self.bias_range)
        self.validate()

    def validate(self):
        if self.height < 16 or self.width < 16:
            raise InvalidInputError(f"scene size {self.height}x{self.width} below 16x16")
        if not 0 <= self.max_disp <= min(32.0, self.width / 4):
            raise InvalidInputError(
                f"max_disp {self.max_disp} violates 0 <= max_disp <= min(32, width/4) = {min(32.0, self.width / 4)}")
        if self.texture not in TEXTURE_FAMILIES:
            raise InvalidInputError(f"unknown texture family {self.texture!r}")
        if self.n_occluders < 0:
            raise InvalidInputError("n_occluders must be >= 0")
        g0, g1 = self.gain_range
        b0, b1 = self.bias_range
        if not (0.8 <= g0 <= g1 <= 1.2):
            raise InvalidInputError(f"gain range {self.gain_range} outside [0.8, 1.2]")
        if not (-0.1 <= b0 <= b1 <= 0.1):
            raise InvalidInputError(f"bias range {self.bias_range} outside [-0.1, 0.1]")

    def to_dict(self):
        out = asdict(self)
        out["gain_range"] = list(self.gain_range)
        out["bias_range"] = list(self.bias_range)
        return out

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


@dataclass
class SyntheticScene:
    left: np.ndarray
    right: np.ndarray
    gt_disparity: np.ndarray  # left-referenced, >= 0
    gt_disparity_right: np.ndarray  # right-referenced, sign-flipped
    gt_occlusion: np.ndarray  # True = occluded in the left view
    right_clean: np.ndarray  # right view before photometric jitter
    spec: SceneSpec
    gain: float = 1.0
    bias: float = 0.0

    @property
    def warp_consistency(self):
        """Fraction of visible pixels reconstructed from the clean right view within 0.02."""
        recon = warp_with_disparity(self.right_clean, self.gt_disparity)
        err = np.abs(recon - self.left).max(axis=2)
        visible = ~self.gt_occlusion
        return float((err[visible] < 0.02).mean()) if visible.any() else 1.0


# ------------------------------------------------------------------ textures

def _fade(t):
    return t * t * t * (t * (t * 6 - 15) + 10)


def _value_noise(rng, ys, xs, cell):
    """Quintic-interpolated lattice noise evaluated on the grid ``ys x xs``."""
    gy, gx = ys / cell, xs / cell
    ny = int(np.floor(gy.max())) + 2
    nx = int(np.floor(gx.max() - gx.min())) + 3
    lattice = rng.uniform(-1.0, 1.0, size=(ny + 1, nx + 1))
    gx = gx - np.floor(gx.min())
    iy, ix = np.floor(gy).astype(int), np.floor(gx).astype(int)
    ty, tx = _fade(gy - iy)[:, None], _fade(gx - ix)[None, :]
    iy, ix = iy[:, None], ix[None, :]
    top = lattice[iy, ix] * (1 - tx) + lattice[iy, ix + 1] * tx
    bottom = lattice[iy + 1, ix] * (1 - tx) + lattice[iy + 1, ix + 1] * tx
    return top * (1 - ty) + bottom * ty


def _perlin_grid(rng, ys, xs):
    grid = np.zeros((ys.size, xs.size))
    for cell, amp in ((16.0, 0.5), (8.0, 0.3), (4.0, 0.2)):
        grid += amp * _value_noise(rng, ys, xs, cell)
    return grid


def _blob_grid(rng, ys, xs):
    area = (ys.max() - ys.min() + 1) * (xs.max() - xs.min() + 1)
    count = max(8, int(area / 18))
    cy = rng.uniform(ys.min() - 4, ys.max() + 4, count)
    cx = rng.uniform(xs.min() - 4, xs.max() + 4, count)
    sig = rng.uniform(1.6, 5.0, count)
    amp = rng.uniform(-1.0, 1.0, count)
    gy = np.exp(-0.5 * ((ys[None, :] - cy[:, None]) / sig[:, None]) ** 2)
    gx = np.exp(-0.5 * ((xs[None, :] - cx[:, None]) / sig[:, None]) ** 2)
    return (gy * amp[:, None]).T @ gx


class _Texture:
    """Procedural texture on integer rows and a supersampled, extended column range."""

    def __init__(self, rng, family, height, x_lo, x_hi):
        self.x_lo = float(x_lo)
        ys = np.arange(height, dtype=np.float64)
        xs = self.x_lo + np.arange(int((x_hi - x_lo) * SUPERSAMPLE) + 2) / SUPERSAMPLE
        grid = _perlin_grid(rng, ys, xs) if family == "perlin" else _blob_grid(rng, ys, xs)
        lo, hi = grid.min(), grid.max()
        self.grid = TEXTURE_LOW + (TEXTURE_HIGH - TEXTURE_LOW) * (grid - lo) / max(hi - lo, 1e-12)

    def __call__(self, rows, x):
        u = np.clip((x - self.x_lo) * SUPERSAMPLE, 0, self.grid.shape[1] - 1.000001)
        i = np.floor(u).astype(int)
        t = u - i
        return self.grid[rows, i] * (1 - t) + self.grid[rows, i + 1] * t


# ------------------------------------------------------------------- geometry

class _Background:
    """Smooth disparity surface: tilted plane plus low-frequency undulation."""

    def __init__(self, rng, height, width, max_disp):
        self.height, self.width = height, width
        lo, hi = 0.1 * max_disp, 0.55 * max_disp
        self.base = rng.uniform(lo, 0.5 * (lo + hi))
        self.tilt_x = rng.uniform(-0.25, 0.25) * (hi - lo)
        self.tilt_y = rng.uniform(-0.25, 0.25) * (hi - lo)
        self.wave_amp = rng.uniform(0.0, 0.2) * (hi - lo)
        self.wave_kx = rng.uniform(0.5, 1.5) * 2 * np.pi / width
        self.wave_ky = rng.uniform(0.5, 1.5) * 2 * np.pi / height
        self.phase = rng.uniform(0, 2 * np.pi)
        self.lo, self.hi = lo, hi

    def __call__(self, rows, cols):
        u = cols / self.width - 0.5
        v = rows / self.height - 0.5
        d = (self.base + self.tilt_x * u + self.tilt_y * v
             + self.wave_amp * np.sin(self.wave_kx * cols + self.wave_ky * rows + self.phase))
        return np.clip(d, self.lo, self.hi)

    def solve_right(self, rows, x, iterations=30):
        """Left column ``c`` with ``c - D(c) = x`` (fixed point; |dD/dc| < 1)."""
        c = x + self(rows, x)
        for _ in range(iterations):
            c = x + self(rows, c)
        return c


@dataclass
class _Occluder:
    cy: float
    cx: float
    ry: float
    rx: float
    disparity: float

    def covers(self, rows, cols):
        return ((rows - self.cy) / self.ry) ** 2 + ((cols - self.cx) / self.rx) ** 2 <= 1.0


def _make_occluders(rng, spec, background):
    occluders = []
    if spec.max_disp <= 0:
        return occluders
    d_lo = int(np.ceil(max(background.hi + 2.0, 0.7 * spec.max_disp)))
    d_hi = int(np.floor(spec.max_disp))
    d_lo = min(d_lo, d_hi)
    for _ in range(spec.n_occluders):
        ry = rng.uniform(0.08, 0.2) * spec.height
        rx = rng.uniform(0.08, 0.2) * spec.width
        cy = rng.uniform(0.15, 0.85) * spec.height
        cx = rng.uniform(0.15, 0.85) * spec.width
        occluders.append(_Occluder(cy, cx, ry, rx, float(rng.integers(d_lo, d_hi + 1))))
    return occluders


# ----------------------------------------------------------------- generation

def generate_scene(spec):
    """Render a stereo pair, left/right ground-truth disparity and the left occlusion mask."""
    if isinstance(spec, dict):
        spec = SceneSpec.from_dict(spec)
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width
    pad = spec.max_disp + 2
    background = _Background(rng, h, w, spec.max_disp)
    occluders = _make_occluders(rng, spec, background)
    bg_tex = _Texture(rng, spec.texture, h, -pad, w + pad)
    occ_tex = [_Texture(rng, spec.texture, h, -pad, w + pad) for _ in occluders]
    gain = float(rng.uniform(*spec.gain_range)) if spec.gain_range[0] < spec.gain_range[1] else spec.gain_range[0]
    bias = float(rng.uniform(*spec.bias_range)) if spec.bias_range[0] < spec.bias_range[1] else spec.bias_range[0]

    rows = np.broadcast_to(np.arange(h)[:, None], (h, w))
    cols = np.broadcast_to(np.arange(w, dtype=np.float64)[None, :], (h, w))

    # left view: front-most layer per pixel (-1 = background)
    layer_l = np.full((h, w), -1)
    disp_l = background(rows, cols)
    left = bg_tex(rows, cols)
    for k, occ in enumerate(occluders):
        hit = occ.covers(rows, cols) & (occ.disparity > disp_l)
        layer_l[hit] = k
        disp_l = np.where(hit, occ.disparity, disp_l)
        left = np.where(hit, occ_tex[k](rows, cols), left)

    # right view: background via the fixed-point inverse, then occluders in front
    src_c = background.solve_right(rows, cols)
    disp_r = background(rows, src_c)
    right = bg_tex(rows, src_c)
    for k, occ in enumerate(occluders):
        shifted = cols + occ.disparity
        hit = occ.covers(rows, shifted) & (occ.disparity > disp_r)
        disp_r = np.where(hit, occ.disparity, disp_r)
        right = np.where(hit, occ_tex[k](rows, shifted), right)

    # a left pixel is occluded if it leaves the frame or a nearer layer covers its match
    x = cols - disp_l
    occluded = (x < 0) | (x > w - 1)
    for occ in occluders:
        occluded |= occ.covers(rows, x + occ.disparity) & (occ.disparity > disp_l)

    right_clean = right[:, :, None]
    right_jit = np.clip(gain * right_clean + bias, 0.0, 1.0)
    return SyntheticScene(
        left=left[:, :, None], right=right_jit, gt_disparity=disp_l, gt_disparity_right=-disp_r,
        gt_occlusion=occluded, right_clean=right_clean, spec=spec, gain=gain, bias=bias)


# ------------------------------------------------------------------- manifest

_SCENE_FILES = ("left", "right", "gt", "gt_right", "occlusion")


def write_scene(scene, directory, stem):
    """Write one scene as PNG/PFM files; returns the manifest entry."""
    os.makedirs(directory, exist_ok=True)
    entry = {
        "left": f"{stem}_left.png",
        "right": f"{stem}_right.png",
        "gt": f"{stem}_gt.pfm",
        "gt_right": f"{stem}_gt_right.pfm",
        "occlusion": f"{stem}_occ.png",
        "spec": scene.spec.to_dict(),
    }
    save_png(scene.left, os.path.join(directory, entry["left"]))
    save_png(scene.right, os.path.join(directory, entry["right"]))
    write_pfm(scene.gt_disparity, os.path.join(directory, entry["gt"]))
    write_pfm(scene.gt_disparity_right, os.path.join(directory, entry["gt_right"]))
    save_png(scene.gt_occlusion.astype(np.float64), os.path.join(directory, entry["occlusion"]), bits=8)
    return entry


def scene_manifest(scenes, path):
    """Write every scene next to ``path`` and a JSON manifest listing their files and specs."""
    directory = os.path.dirname(os.path.abspath(path))
    entries = [write_scene(scene, directory, f"scene_{i:03d}") for i, scene in enumerate(scenes)]
    try:
        with open(path, "w") as fh:
            json.dump({"scenes": entries}, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise ManifestError(f"cannot write manifest {path}: {exc}", path) from exc
    return path


def read_manifest(path, load=True):
    """Parse a manifest; with ``load`` return loaded scene dicts, else the raw entries.

    Missing referenced files raise :class:`ManifestError` naming the path.
    """
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, ValueError) as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}", path) from exc
    base = os.path.dirname(os.path.abspath(path))
    entries = data.get("scenes", [])
    for entry in entries:
        for key in _SCENE_FILES:
            if key in entry:
                full = os.path.join(base, entry[key])
                if not os.path.isfile(full):
                    raise ManifestError(f"manifest {path} references missing file {full}", full)
    if not load:
        return entries
    loaded = []
    for entry in entries:
        item = {"spec": SceneSpec.from_dict(entry["spec"]) if "spec" in entry else None}
        item["left"] = load_image(os.path.join(base, entry["left"]))
        item["right"] = load_image(os.path.join(base, entry["right"]))
        if "gt" in entry:
            item["gt"] = read_pfm(os.path.join(base, entry["gt"]))
        if "occlusion" in entry:
            item["occlusion"] = load_image(os.path.join(base, entry["occlusion"]))[:, :, 0] > 0.5
        loaded.append(item)
    return loaded
