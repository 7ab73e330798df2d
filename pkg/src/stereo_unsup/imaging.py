"""Image containers, pyramids, bilinear sampling/warping, gradients and file IO.

Images are float64 arrays of shape ``(H, W, C)`` with C in {1, 3} and values in
[0, 1]. Disparity fields are float64 ``(H, W)`` arrays of signed pixels.

Sign convention: a positive disparity ``d`` at left pixel ``(r, c)`` means it
matches right pixel ``(r, c - d)``, so ``warp_with_disparity(I_r, d_l)``
reconstructs ``I_l``.
"""
import os

import numpy as np
from PIL import Image

from .exceptions import ImageReadError, UnsupportedBitDepthError
from .validation import MIN_SIDE, check_field, check_image, check_same_hw

N_LEVELS = 3

_ACCEPTED_FORMATS = {"PNG", "PPM"}


# --------------------------------------------------------------------------- IO

def load_image(path):
    """Load an 8- or 16-bit PNG/PGM file as an ``(H, W, C)`` float image in [0, 1].

    Grayscale stays single channel; an alpha channel is dropped.
    """
    if not os.path.isfile(path):
        raise ImageReadError(f"{path}: no such file")
    try:
        with Image.open(path) as im:
            im.load()
            fmt, mode = im.format, im.mode
            arr = np.asarray(im)
    except (OSError, ValueError, SyntaxError) as exc:
        raise ImageReadError(f"{path}: unreadable image ({exc})") from exc
    if fmt not in _ACCEPTED_FORMATS:
        raise ImageReadError(f"{path}: unsupported format {fmt!r}, expected PNG or PGM")

    if mode in ("L", "LA", "RGB", "RGBA"):
        scale = 255.0
    elif mode in ("I;16", "I;16B", "I;16L", "I"):
        scale = 65535.0
        if arr.size and (arr.min() < 0 or arr.max() > 65535):
            raise UnsupportedBitDepthError(f"{path}: sample values exceed 16 bits")
    else:
        raise UnsupportedBitDepthError(f"{path}: mode {mode!r} is not 8- or 16-bit gray/RGB")

    arr = arr.astype(np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    elif mode == "LA":
        arr = arr[:, :, :1]
    elif mode == "RGBA":
        arr = arr[:, :, :3]
    return arr / scale


def save_png(img, path, bits=16):
    """Write a [0, 1] image as 8- or 16-bit PNG (gray if single channel)."""
    arr = check_image(img)
    if bits not in (8, 16):
        raise UnsupportedBitDepthError(f"cannot write {bits}-bit PNG")
    top = 255 if bits == 8 else 65535
    q = np.rint(arr * top)
    if arr.shape[2] == 1:
        q = q[:, :, 0]
        out = Image.fromarray(q.astype(np.uint8 if bits == 8 else np.uint16))
    else:
        if bits == 16:
            raise UnsupportedBitDepthError("16-bit RGB PNG writing is not supported")
        out = Image.fromarray(q.astype(np.uint8), mode="RGB")
    out.save(path, format="PNG")


def write_pfm(field, path):
    """Write a disparity field (or ``(H, W, 3)`` array) as little-endian PFM."""
    arr = np.asarray(field, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim == 2:
        tag = b"Pf"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        tag = b"PF"
    else:
        raise ValueError(f"PFM stores (H, W) or (H, W, 3) arrays, got {arr.shape}")
    height, width = arr.shape[:2]
    header = tag + b"\n" + f"{width} {height}\n-1.0\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(np.flipud(arr)).astype("<f4").tobytes())


def _pfm_token(fh):
    token = b""
    while True:
        ch = fh.read(1)
        if not ch:
            break
        if ch.isspace():
            if token:
                break
            continue
        token += ch
    return token


def read_pfm(path):
    """Read a PFM file; returns float64 ``(H, W)`` for ``Pf`` or ``(H, W, 3)`` for ``PF``."""
    if not os.path.isfile(path):
        raise ImageReadError(f"{path}: no such file")
    with open(path, "rb") as fh:
        tag = _pfm_token(fh)
        if tag not in (b"Pf", b"PF"):
            raise ImageReadError(f"{path}: not a PFM file (header {tag!r})")
        try:
            width = int(_pfm_token(fh))
            height = int(_pfm_token(fh))
            scale = float(_pfm_token(fh))
        except ValueError as exc:
            raise ImageReadError(f"{path}: malformed PFM header") from exc
        channels = 3 if tag == b"PF" else 1
        dtype = "<f4" if scale < 0 else ">f4"
        raw = fh.read()
    count = width * height * channels
    if len(raw) < 4 * count:
        raise ImageReadError(f"{path}: truncated PFM raster")
    data = np.frombuffer(raw[:4 * count], dtype=dtype).astype(np.float64)
    shape = (height, width) if channels == 1 else (height, width, 3)
    return np.flipud(data.reshape(shape)).copy()


# ------------------------------------------------------------------- pyramids

def _box_halve(arr):
    """2x2 box average; odd trailing rows/columns average over the available pixels."""
    h, w = arr.shape[:2]
    h2, w2 = -(-h // 2), -(-w // 2)
    pad = [(0, 2 * h2 - h), (0, 2 * w2 - w)] + [(0, 0)] * (arr.ndim - 2)
    summed = np.pad(arr, pad)
    count = np.pad(np.ones((h, w)), pad[:2])
    summed = summed.reshape((h2, 2, w2, 2) + arr.shape[2:]).sum(axis=(1, 3))
    count = count.reshape(h2, 2, w2, 2).sum(axis=(1, 3))
    if arr.ndim == 3:
        count = count[:, :, None]
    return summed / count


def build_pyramid(img, levels=N_LEVELS):
    """Three-level box pyramid; level 0 is the input, each next level is half size (rounded up)."""
    img = check_image(img, min_side=MIN_SIDE)
    pyramid = [img]
    for _ in range(1, levels):
        pyramid.append(_box_halve(pyramid[-1]))
    return pyramid


def level_shapes(height, width, levels=N_LEVELS):
    shapes = [(height, width)]
    for _ in range(1, levels):
        h, w = shapes[-1]
        shapes.append((-(-h // 2), -(-w // 2)))
    return shapes


# ------------------------------------------------------------------- sampling

def bilinear_sample(img, x, y):
    """Bilinear lookup at continuous column ``x`` and row ``y``, clamped to the border.

    ``x`` and ``y`` may be scalars or broadcastable arrays; the result carries a
    trailing channel axis.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w = img.shape[:2]
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, w - 1)
    y = np.clip(np.asarray(y, dtype=np.float64), 0.0, h - 1)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    top = (1.0 - fx) * img[y0, x0] + fx * img[y0, x1]
    bottom = (1.0 - fx) * img[y1, x0] + fx * img[y1, x1]
    return (1.0 - fy) * top + fy * bottom


def warp_with_disparity(src, disp, return_derivative=False):
    """Resample ``src`` at ``(r, c - disp(r, c))``.

    With ``return_derivative`` also returns ``d out / d disp`` per channel; it is
    zero where the sample coordinate is clamped.
    """
    src = check_image(src, name="src")
    disp = check_field(disp)
    check_same_hw(src, disp, names=("src", "disp"))
    h, w, _ = src.shape
    x = np.arange(w, dtype=np.float64)[None, :] - disp
    inside = (x >= 0.0) & (x <= w - 1)
    xc = np.clip(x, 0.0, w - 1)
    x0 = np.floor(xc).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    fx = (xc - x0)[:, :, None]
    rows = np.arange(h)[:, None]
    left = src[rows, x0]
    right = src[rows, x1]
    out = (1.0 - fx) * left + fx * right
    if not return_derivative:
        return out
    # d out / d x = right - left; x = c - d
    deriv = -(right - left) * inside[:, :, None]
    return out, deriv


def upsample_field(field, height, width):
    """Bilinearly resize a disparity field to ``(height, width)`` and rescale its values.

    Pixel centres are aligned (half-pixel convention). Values are multiplied by
    ``width / source_width`` so they stay in pixels of the target grid.
    """
    field = check_field(field)
    hs, ws = field.shape
    if height < hs or width < ws:
        raise ValueError(f"target {height}x{width} smaller than source {hs}x{ws}")
    if (height, width) == (hs, ws):
        return field.copy()
    ys = (np.arange(height) + 0.5) * (hs / height) - 0.5
    xs = (np.arange(width) + 0.5) * (ws / width) - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    values = bilinear_sample(field, xx, yy)[:, :, 0]
    return values * (width / ws)


def downsample_map(values, height, width):
    """Box-average a per-pixel map down to a pyramid level shape (values unchanged)."""
    values = check_field(values)
    out = values
    while out.shape[0] > height or out.shape[1] > width:
        out = _box_halve(out)
    if out.shape != (height, width):
        raise ValueError(f"{values.shape} does not reduce to {(height, width)} by halving")
    return out


def downsample_field(field, height, width):
    """Box-average a field down to a pyramid level shape, rescaling values by the width ratio."""
    field = check_field(field)
    return downsample_map(field, height, width) * (width / field.shape[1])


def image_gradients(img):
    """Forward-difference gradients ``(dx, dy)`` as ``(H, W)`` arrays.

    The last column of ``dx`` and last row of ``dy`` are zero. Multi-channel
    images reduce to the channel mean of the absolute gradient.
    """
    img = check_image(img)
    dx = np.zeros_like(img)
    dy = np.zeros_like(img)
    dx[:, :-1] = img[:, 1:] - img[:, :-1]
    dy[:-1, :] = img[1:, :] - img[:-1, :]
    if img.shape[2] == 1:
        return dx[:, :, 0], dy[:, :, 0]
    return np.abs(dx).mean(axis=2), np.abs(dy).mean(axis=2)


def to_gray(img):
    """Channel-mean intensity as an ``(H, W)`` array."""
    return check_image(img).mean(axis=2)
