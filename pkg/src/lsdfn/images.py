"""PGM/PPM writers and the flow color coding.

Binary netpbm only: P5 (grayscale) and P6 (RGB), 8-bit, with a single
"P5\\n<w> <h>\\n255\\n" style header so files are reproducible byte for byte.

Flow rendering: hue from the motion direction, colorfulness from the
magnitude. With m = clip(|flow| / max_magnitude, 0, 1) and the fully
saturated hue wheel at h = atan2(dv, du),
    rgb = (1 - m) * 0.5 + m * hue_rgb(h)
which is the HSL wheel at lightness 0.5 with saturation m: zero motion is
exactly mid-gray (128, 128, 128), full magnitude is the pure hue.
Quantization is floor(255 * c + 0.5).
"""

from __future__ import annotations

import numpy as np


def pgm_bytes(gray: np.ndarray) -> bytes:
    """Encode a (H, W) uint8 array as binary PGM (P5)."""
    g = np.asarray(gray)
    if g.ndim != 2:
        raise ValueError(f"grayscale image must be 2-d, got shape {g.shape}")
    if g.dtype != np.uint8:
        raise ValueError(f"grayscale image must be uint8, got {g.dtype}")
    h, w = g.shape
    return f"P5\n{w} {h}\n255\n".encode() + g.tobytes()


def ppm_bytes(rgb: np.ndarray) -> bytes:
    """Encode a (H, W, 3) uint8 array as binary PPM (P6)."""
    a = np.asarray(rgb)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError(f"rgb image must be (H, W, 3), got shape {a.shape}")
    if a.dtype != np.uint8:
        raise ValueError(f"rgb image must be uint8, got {a.dtype}")
    h, w, _ = a.shape
    return f"P6\n{w} {h}\n255\n".encode() + a.tobytes()


def write_pgm(path, gray: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(pgm_bytes(gray))


def write_ppm(path, rgb: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(ppm_bytes(rgb))


def parse_netpbm_header(blob: bytes):
    """Parse a P5/P6 header; returns (magic, width, height, maxval, offset).

    offset is the index of the first payload byte.
    """
    if blob[:2] not in (b"P5", b"P6"):
        raise ValueError(f"not a binary PGM/PPM: magic {blob[:2]!r}")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated netpbm header")
        fields.append(int(blob[start:pos]))
    pos += 1  # single whitespace byte after maxval
    return blob[:2].decode(), fields[0], fields[1], fields[2], pos


def _hue_rgb(h: np.ndarray) -> np.ndarray:
    """Fully saturated hue wheel: angle (radians) -> RGB in [0, 1]."""
    frac = (h / (2.0 * np.pi)) % 1.0
    h6 = frac * 6.0
    sector = np.floor(h6).astype(np.int64) % 6
    f = h6 - np.floor(h6)
    one = np.ones_like(f)
    q = 1.0 - f
    # Sector table for (r, g, b) with s = v = 1.
    r = np.choose(sector, [one, q, 0 * f, 0 * f, f, one])
    g = np.choose(sector, [f, one, one, q, 0 * f, 0 * f])
    b = np.choose(sector, [0 * f, 0 * f, f, one, one, q])
    return np.stack([r, g, b], axis=-1)


def flow_to_rgb(flow: np.ndarray, max_magnitude: float) -> np.ndarray:
    """Color-code a (2, H, W) flow field (channels du, dv) as uint8 RGB.

    See the module docstring for the exact formula; max_magnitude must be
    positive and is the clip point for full saturation.
    """
    fl = np.asarray(flow, dtype=np.float64)
    if fl.ndim != 3 or fl.shape[0] != 2:
        raise ValueError(f"flow must be (2, H, W), got shape {fl.shape}")
    if max_magnitude <= 0:
        raise ValueError(f"max_magnitude must be > 0, got {max_magnitude}")
    du, dv = fl[0], fl[1]
    mag = np.sqrt(du * du + dv * dv)
    m = np.clip(mag / max_magnitude, 0.0, 1.0)[..., None]
    hue = _hue_rgb(np.arctan2(dv, du))
    rgb = (1.0 - m) * 0.5 + m * hue
    return np.floor(255.0 * rgb + 0.5).astype(np.uint8)
