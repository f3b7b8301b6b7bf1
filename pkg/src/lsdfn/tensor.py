"""Deterministic tensor core: NCHW storage, seeded RNG, file IO, shared
convolution with analytical backward, and finite-difference gradient checking.

Everything here is bitwise reproducible: same inputs and seeds give the same
bytes on every run. Tensors are immutable once constructed; numerical ops
return new tensors. Layout is row-major with the trailing two axes spatial,
i.e. (batch, [sample,] channel, height, width) for the common ranks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

MAX_RANK = 5
MAGIC = b"LSDT"
FORMAT_VERSION = 1

_ALLOWED_DTYPES = (np.float32, np.float64)


class Tensor:
    """Dense rank-1..5 float array with frozen storage.

    The payload is always C-contiguous and read-only; mutation goes through
    constructing a new tensor. float32 is the storage default, float64 is
    allowed so gradient checks can run in double precision end to end.
    """

    __slots__ = ("_data",)

    def __init__(self, data, dtype=None):
        """Copy `data` into a validated, frozen array.

        Args:
            data: array-like of rank 1..5 with no zero extents.
            dtype: np.float32 or np.float64. Defaults to float32 unless
                `data` is already a float64 array.
        """
        arr = np.array(data, order="C", copy=True)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in _ALLOWED_DTYPES else np.float32
        if np.dtype(dtype) not in [np.dtype(d) for d in _ALLOWED_DTYPES]:
            raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
        arr = arr.astype(dtype, copy=False)
        if not 1 <= arr.ndim <= MAX_RANK:
            raise ValueError(f"rank must be 1..{MAX_RANK}, got {arr.ndim}")
        if any(e < 1 for e in arr.shape):
            raise ValueError(f"zero extent in shape {arr.shape}")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        self._data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Trusted constructor for freshly computed arrays: freezes without copying.
        t = object.__new__(cls)
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        t._data = arr
        return t

    @classmethod
    def zeros(cls, shape: Sequence[int], dtype=np.float32) -> "Tensor":
        return cls._wrap(np.zeros(tuple(shape), dtype=dtype))

    @classmethod
    def full(cls, shape: Sequence[int], value: float, dtype=np.float32) -> "Tensor":
        return cls._wrap(np.full(tuple(shape), value, dtype=dtype))

    @property
    def data(self) -> np.ndarray:
        """Read-only ndarray view of the payload."""
        return self._data

    @property
    def shape(self) -> tuple:
        return self._data.shape

    @property
    def rank(self) -> int:
        return self._data.ndim

    @property
    def dtype(self):
        return self._data.dtype

    @property
    def size(self) -> int:
        return self._data.size

    def astype(self, dtype) -> "Tensor":
        return Tensor(self._data, dtype=dtype)

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self._data
        return self._data.astype(dtype)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self._data.dtype.name})"


def as_array(x, rank: Optional[int] = None, name: str = "input") -> np.ndarray:
    """Accept a Tensor or ndarray, return the underlying ndarray.

    Args:
        x: Tensor or array-like.
        rank: if given, required number of dimensions.
        name: label used in error messages.
    """
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if arr.dtype not in _ALLOWED_DTYPES:
        arr = arr.astype(np.float32)
    if rank is not None and arr.ndim != rank:
        raise ValueError(f"{name}: expected rank {rank}, got {arr.ndim}")
    return arr


# ---------------------------------------------------------------------------
# Seeded RNG: splitmix64 + Box-Muller.
#
# The generator is specified exactly so other implementations can reproduce
# streams. Output n (1-based) for seed s is mix(s + n * 0x9E3779B97F4A7C15)
# mod 2^64, where mix(z) is:
#     z ^= z >> 30; z *= 0xBF58476D1CE4E5B9
#     z ^= z >> 27; z *= 0x94D049BB133111EB
#     z ^= z >> 31
# Uniforms take the top 53 bits: u = (out >> 11) * 2^-53 in [0, 1).
# Gaussians come from Box-Muller on consecutive uniform pairs; see
# Rng.gaussians for the exact convention.
# ---------------------------------------------------------------------------

_U64 = np.uint64
_MASK64 = (1 << 64) - 1
_GOLDEN = _U64(0x9E3779B97F4A7C15)
_MIX1 = _U64(0xBF58476D1CE4E5B9)
_MIX2 = _U64(0x94D049BB133111EB)


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> _U64(30))) * _MIX1
    z = (z ^ (z >> _U64(27))) * _MIX2
    return z ^ (z >> _U64(31))


def _splitmix64_block(seed: int, count: int, offset: int = 0) -> np.ndarray:
    """Raw outputs offset+1 .. offset+count of the splitmix64 stream."""
    idx = np.arange(offset + 1, offset + count + 1, dtype=np.uint64)
    return _mix64(_U64(seed & _MASK64) + idx * _GOLDEN)


def derive_seed(seed: int, index: int) -> int:
    """Child seed for stream `index` of `seed` (splitmix64 output index+1).

    Children are decorrelated by the mix, so per-trial / per-sample work can
    run in parallel while staying bitwise deterministic.
    """
    if index < 0:
        raise ValueError("index must be non-negative")
    return int(_splitmix64_block(seed, 1, offset=index)[0])


class Rng:
    """Sequential deterministic generator over the splitmix64 stream."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._consumed = 0

    def next_u64(self, count: int) -> np.ndarray:
        out = _splitmix64_block(self.seed, count, offset=self._consumed)
        self._consumed += count
        return out

    def uniforms(self, count: int) -> np.ndarray:
        """float64 uniforms in [0, 1), 53-bit resolution."""
        return (self.next_u64(count) >> _U64(11)).astype(np.float64) * 2.0 ** -53

    def gaussians(self, count: int) -> np.ndarray:
        """float64 standard normals via Box-Muller.

        Pair 2m, 2m+1 of raw outputs gives u1 = ((raw0 >> 11) + 1) * 2^-53
        (half-open (0, 1], so the log is finite) and u2 = (raw1 >> 11) * 2^-53;
        the pair of normals is r*cos(2*pi*u2), r*sin(2*pi*u2) with
        r = sqrt(-2*ln(u1)), emitted in that order.
        """
        pairs = (count + 1) // 2
        raw = self.next_u64(2 * pairs)
        u1 = ((raw[0::2] >> _U64(11)).astype(np.float64) + 1.0) * 2.0 ** -53
        u2 = (raw[1::2] >> _U64(11)).astype(np.float64) * 2.0 ** -53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.empty(2 * pairs, dtype=np.float64)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:count]

    def integers(self, low: int, high: int, count: int) -> np.ndarray:
        """int64 uniforms in [low, high) via floor(u * (high - low))."""
        if high <= low:
            raise ValueError(f"empty range [{low}, {high})")
        span = high - low
        return low + np.floor(self.uniforms(count) * span).astype(np.int64)


def gaussian_fill(shape: Sequence[int], seed: int, mean: float = 0.0,
                  std: float = 1.0, dtype=np.float32) -> Tensor:
    """Tensor of the given shape filled with seeded Gaussian draws.

    Args:
        shape: target extents (rank 1..5).
        seed: stream seed; equal seeds give bitwise-identical tensors.
        mean: distribution mean.
        std: distribution standard deviation, must be >= 0. std == 0 yields
            a constant tensor.
        dtype: storage dtype (float32 default).

    Returns:
        A frozen Tensor; values are drawn in index order.
    """
    if std < 0:
        raise ValueError(f"std must be >= 0, got {std}")
    shape = tuple(int(e) for e in shape)
    n = 1
    for e in shape:
        n *= e
    z = Rng(seed).gaussians(n)
    vals = (mean + std * z).astype(dtype).reshape(shape)
    return Tensor._wrap(vals)


# ---------------------------------------------------------------------------
# Tensor file IO.
#
# Format (little-endian throughout):
#   bytes 0..3   magic "LSDT"
#   u32          format version (1)
#   u32          rank r, 1 <= r <= 5
#   r * u32      extents, each >= 1
#   payload      product(extents) float32 values, row-major
# ---------------------------------------------------------------------------


class TensorFileError(Exception):
    """Malformed tensor file. `code` distinguishes the failure class."""

    code = "tensor file error"


class BadMagicError(TensorFileError):
    code = "bad magic"


class BadHeaderError(TensorFileError):
    code = "bad header"


class TruncatedPayloadError(TensorFileError):
    code = "truncated payload"


def write_tensor(path, tensor) -> None:
    """Write a tensor to `path` in the LSDT format (float32 payload)."""
    arr = as_array(tensor)
    if not 1 <= arr.ndim <= MAX_RANK:
        raise ValueError(f"rank must be 1..{MAX_RANK}, got {arr.ndim}")
    header = [MAGIC,
              np.asarray([FORMAT_VERSION, arr.ndim], dtype="<u4").tobytes(),
              np.asarray(arr.shape, dtype="<u4").tobytes()]
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(b"".join(header) + payload)


def read_tensor(path) -> Tensor:
    """Read an LSDT tensor file.

    Raises:
        BadMagicError: leading bytes are not "LSDT".
        BadHeaderError: unreadable header, unknown version, rank outside
            1..5, or a zero extent.
        TruncatedPayloadError: payload length disagrees with the header.
    """
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 12:
        raise BadHeaderError(f"{path}: header truncated at {len(blob)} bytes")
    version, rank = np.frombuffer(blob, dtype="<u4", count=2, offset=4)
    if version != FORMAT_VERSION:
        raise BadHeaderError(f"{path}: unknown format version {int(version)}")
    if not 1 <= rank <= MAX_RANK:
        raise BadHeaderError(f"{path}: rank {int(rank)} outside 1..{MAX_RANK}")
    rank = int(rank)
    if len(blob) < 12 + 4 * rank:
        raise BadHeaderError(f"{path}: header truncated at {len(blob)} bytes")
    extents = np.frombuffer(blob, dtype="<u4", count=rank, offset=12)
    if np.any(extents == 0):
        raise BadHeaderError(f"{path}: zero extent in shape {tuple(int(e) for e in extents)}")
    shape = tuple(int(e) for e in extents)
    count = 1
    for e in shape:
        count *= e
    expected = 12 + 4 * rank + 4 * count
    if len(blob) != expected:
        raise TruncatedPayloadError(
            f"{path}: header declares {4 * count} payload bytes, "
            f"found {len(blob) - 12 - 4 * rank}")
    vals = np.frombuffer(blob, dtype="<f4", offset=12 + 4 * rank).astype(np.float32)
    return Tensor._wrap(vals.reshape(shape))


# ---------------------------------------------------------------------------
# Shared 2-d convolution (one kernel bank for every spatial position).
# ---------------------------------------------------------------------------


def _check_conv_args(x: np.ndarray, w: np.ndarray, pad: Optional[int]):
    if x.ndim != 4:
        raise ValueError(f"input must be rank 4 (N, C, H, W), got rank {x.ndim}")
    if w.ndim != 4:
        raise ValueError(f"weight must be rank 4 (C_out, C_in, k, k), got rank {w.ndim}")
    c_out, c_in, kh, kw = w.shape
    if kh != kw:
        raise ValueError(f"kernel must be square, got {kh}x{kw}")
    if kh % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {kh}")
    if x.shape[1] != c_in:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, weight expects {c_in}")
    if pad is None:
        pad = kh // 2
    if not 0 <= pad <= kh - 1:
        raise ValueError(f"pad must be in 0..{kh - 1}, got {pad}")
    h_out = x.shape[2] + 2 * pad - kh + 1
    w_out = x.shape[3] + 2 * pad - kw + 1
    if h_out < 1 or w_out < 1:
        raise ValueError(f"empty output {h_out}x{w_out} for input {x.shape} kernel {kh}")
    return pad


def _conv2d(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray], pad: int) -> np.ndarray:
    k = w.shape[2]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    # win: (N, C_in, H_out, W_out, k, k); contract C_in and the window.
    y = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    y = np.moveaxis(y, 3, 1)
    y = np.ascontiguousarray(y, dtype=x.dtype)
    if b is not None:
        y += b.reshape(1, -1, 1, 1).astype(x.dtype)
    return y


def _conv2d_backward(grad_y: np.ndarray, x: np.ndarray, w: np.ndarray, pad: int):
    k = w.shape[2]
    if grad_y.shape[0] != x.shape[0] or grad_y.shape[1] != w.shape[0]:
        raise ValueError(f"grad shape {grad_y.shape} does not match input {x.shape} / weight {w.shape}")
    h_out = x.shape[2] + 2 * pad - k + 1
    w_out = x.shape[3] + 2 * pad - k + 1
    if grad_y.shape[2] != h_out or grad_y.shape[3] != w_out:
        raise ValueError(f"grad spatial {grad_y.shape[2:]} != expected {(h_out, w_out)}")

    grad_b = grad_y.sum(axis=(0, 2, 3))

    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    # grad_w[v,u,j,i] = sum_{n,y,x} grad_y[n,v,y,x] * window[n,u,y,x,j,i]
    grad_w = np.tensordot(grad_y, win, axes=([0, 2, 3], [0, 2, 3]))
    grad_w = np.ascontiguousarray(grad_w, dtype=w.dtype)

    # grad_x = full correlation of grad_y with the flipped kernel.
    fpad = k - 1 - pad
    gyp = np.pad(grad_y, ((0, 0), (0, 0), (fpad, fpad), (fpad, fpad)))
    gwin = np.lib.stride_tricks.sliding_window_view(gyp, (k, k), axis=(2, 3))
    wflip = w[:, :, ::-1, ::-1]
    grad_x = np.tensordot(gwin, wflip, axes=([1, 4, 5], [0, 2, 3]))
    grad_x = np.ascontiguousarray(np.moveaxis(grad_x, 3, 1), dtype=x.dtype)
    return grad_x, grad_w, grad_b


def conv2d_shared(x, weight, bias=None, pad: Optional[int] = None) -> Tensor:
    """Cross-correlate `x` with one shared kernel bank, zero padding.

    Args:
        x: (N, C_in, H, W).
        weight: (C_out, C_in, k, k), k odd.
        bias: optional (C_out,), added per output channel.
        pad: zero-padding width; defaults to k // 2 (shape preserving).

    Returns:
        Tensor of shape (N, C_out, H + 2*pad - k + 1, W + 2*pad - k + 1).
    """
    xa = as_array(x, rank=4, name="x")
    wa = as_array(weight, rank=4, name="weight")
    ba = as_array(bias, rank=1, name="bias") if bias is not None else None
    p = _check_conv_args(xa, wa, pad)
    if ba is not None and ba.shape[0] != wa.shape[0]:
        raise ValueError(f"bias length {ba.shape[0]} != out channels {wa.shape[0]}")
    return Tensor._wrap(_conv2d(xa, wa, ba, p))


def conv2d_shared_backward(grad_y, x, weight, pad: Optional[int] = None):
    """Adjoints of conv2d_shared.

    Args:
        grad_y: gradient at the output, (N, C_out, H_out, W_out).
        x: the forward input.
        weight: the forward kernel bank.
        pad: padding used in the forward pass.

    Returns:
        (grad_x, grad_weight, grad_bias) tensors; grad_bias is the channel
        sum of grad_y and is returned whether or not a bias was used.
    """
    ga = as_array(grad_y, rank=4, name="grad_y")
    xa = as_array(x, rank=4, name="x")
    wa = as_array(weight, rank=4, name="weight")
    p = _check_conv_args(xa, wa, pad)
    gx, gw, gb = _conv2d_backward(ga, xa, wa, p)
    return Tensor._wrap(gx), Tensor._wrap(gw), Tensor._wrap(gb)


# ---------------------------------------------------------------------------
# Finite differences and gradient checking.
# ---------------------------------------------------------------------------


def finite_diff_grad(f: Callable[[np.ndarray], float], x, epsilon: float = 1e-6) -> np.ndarray:
    """Central finite-difference gradient of scalar `f` at `x`.

    Runs in float64 regardless of the input dtype. Every coordinate is
    perturbed by +-epsilon; non-finite function values raise immediately
    with the offending coordinate.
    """
    xa = as_array(x).astype(np.float64, copy=True)
    grad = np.zeros_like(xa)
    for idx in np.ndindex(xa.shape):
        orig = xa[idx]
        xa[idx] = orig + epsilon
        fp = float(f(xa))
        xa[idx] = orig - epsilon
        fm = float(f(xa))
        xa[idx] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"non-finite function value at coordinate {idx}: f+={fp}, f-={fm}")
        grad[idx] = (fp - fm) / (2.0 * epsilon)
    return grad


@dataclass(frozen=True)
class GradCheckReport:
    """Outcome of one analytic-vs-numeric gradient comparison."""

    max_relative_error: float
    worst_coordinate: tuple
    epsilon_used: float
    tolerance: float
    passed: bool


def grad_check(f: Callable[[np.ndarray], float], x, analytic_grad,
               epsilon: float = 1e-6, tolerance: float = 1e-5) -> GradCheckReport:
    """Compare an analytic gradient against central finite differences.

    The relative error at each coordinate is
    |analytic - numeric| / max(|analytic|, |numeric|, 1.0); the 1.0 floor
    turns the comparison absolute near zero.

    Args:
        f: scalar function of one ndarray (evaluated in float64).
        x: point of evaluation.
        analytic_grad: gradient to verify, same shape as x.
        epsilon: central-difference step.
        tolerance: pass threshold on the max relative error.
    """
    ana = as_array(analytic_grad).astype(np.float64)
    num = finite_diff_grad(f, x, epsilon=epsilon)
    if ana.shape != num.shape:
        raise ValueError(f"analytic shape {ana.shape} != input shape {num.shape}")
    denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1.0)
    rel = np.abs(ana - num) / denom
    worst = np.unravel_index(int(np.argmax(rel)), rel.shape)
    max_err = float(rel[worst])
    return GradCheckReport(max_relative_error=max_err,
                           worst_coordinate=tuple(int(i) for i in worst),
                           epsilon_used=float(epsilon),
                           tolerance=float(tolerance),
                           passed=bool(max_err <= tolerance))
