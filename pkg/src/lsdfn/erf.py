"""Effective receptive field measurement.

Backpropagates a unit gradient from the center output position of a layer
stack and averages input-gradient magnitudes over random-input trials. A
separate interval-arithmetic calculator gives the theoretical dependency
footprint, so measured support can be checked against the hard bound:
empirical nonzero support is always contained in the theoretical box.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import derive_seed, gaussian_fill
from .layer import LsDfnConfig
from .stack import Stack, Conv2dStage, ReluStage, LsDfnStage, ConcatSkipStage


@dataclass
class ErfMap:
    """Gradient-magnitude map of one probe.

    values: (H, W) non-negative magnitudes, averaged over input channels,
    batch entries, and trials. peak: max of values. center: the probed
    output coordinate (y, x).
    """

    values: np.ndarray
    peak: float
    center: tuple

    def normalized(self) -> np.ndarray:
        """values scaled so the peak is 1; zero maps stay zero."""
        if self.peak <= 0:
            return self.values.copy()
        return self.values / self.peak


@dataclass
class ErfMetrics:
    """Support statistics of an ErfMap at threshold tau.

    support_area counts pixels with value >= tau * peak (ties included);
    extent_y/extent_x are the bounding-box sides of that support;
    equivalent_radius = sqrt(support_area / pi). degenerate marks an all-zero
    map, whose metrics are all zero.
    """

    support_area: int
    extent_y: int
    extent_x: int
    equivalent_radius: float
    threshold: float
    degenerate: bool = False


def compute_erf(model, input_shape, trials: int, seed: int) -> ErfMap:
    """Measure the ERF of a forward/backward stack.

    For each trial, a standard-normal input is drawn from a per-trial child
    seed, the model runs forward, a gradient of 1 is injected at the center
    output position across all output channels, and |grad input| is averaged
    over batch and channels. Trials are averaged in index order.

    Args:
        model: object with forward(x) and backward(grad_y), spatial extents
            preserved (required; probing assumes aligned coordinates).
        input_shape: (N, C, H, W) of the probe inputs.
        trials: number of random-input trials, >= 1.
        seed: base seed; trial t uses derive_seed(seed, t).

    Returns:
        ErfMap with values (H, W).

    Raises:
        ValueError: spatial extents not preserved, or trials < 1.
        FloatingPointError: non-finite gradients, reporting the trial index.
    """
    n, c, h, w = input_shape
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    acc = np.zeros((h, w), dtype=np.float64)
    center = (h // 2, w // 2)
    for t in range(trials):
        x = np.asarray(gaussian_fill(input_shape, derive_seed(seed, t)))
        y = model.forward(x)
        if y.shape[2:] != (h, w):
            raise ValueError(f"model changed spatial extents: {y.shape[2:]} != {(h, w)}")
        grad_y = np.zeros_like(y)
        grad_y[:, :, center[0], center[1]] = 1.0
        gx = model.backward(grad_y)
        if not np.isfinite(gx).all():
            raise FloatingPointError(f"non-finite input gradient in trial {t}")
        acc += np.abs(gx).mean(axis=(0, 1))
    values = acc / trials
    return ErfMap(values=values, peak=float(values.max()), center=center)


def erf_metrics(erf: ErfMap, tau: float) -> ErfMetrics:
    """Support statistics at threshold tau (0 < tau < 1)."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must be in (0, 1), got {tau}")
    if erf.peak <= 0:
        return ErfMetrics(0, 0, 0, 0.0, tau, degenerate=True)
    mask = erf.values >= tau * erf.peak
    area = int(mask.sum())
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return ErfMetrics(
        support_area=area,
        extent_y=int(rows[-1] - rows[0] + 1),
        extent_x=int(cols[-1] - cols[0] + 1),
        equivalent_radius=float(np.sqrt(area / np.pi)),
        threshold=tau,
    )


def erf_to_image(erf: ErfMap, normalize: bool = True) -> bytes:
    """Render the map as an 8-bit PGM (P5).

    With normalize, the peak maps to 255; otherwise raw values are clamped
    to [0, 1] and scaled. Quantization is floor(255 * v + 0.5).
    """
    from .images import pgm_bytes
    v = erf.normalized() if normalize else np.clip(erf.values, 0.0, 1.0)
    px = np.floor(255.0 * v + 0.5).astype(np.uint8)
    return pgm_bytes(px)


# ---------------------------------------------------------------------------
# Theoretical dependency footprints by interval arithmetic. Each stage grows
# the half-width of the input interval a single output position depends on;
# the extent of the footprint box is 2 * half-width + 1.
# ---------------------------------------------------------------------------


def sampling_footprint(config: LsDfnConfig) -> int:
    """Extent of the sampling stage alone: (s - 1) * stride + k."""
    return config.grid_span


def lsdfn_footprint(config: LsDfnConfig) -> int:
    """Extent of a whole block: sampling span plus the branch conv reach.

    Equals (s - 1) * stride + k + (branch RF - 1); the branch RF is the
    branch_kernel_size of the single generating convs.
    """
    return config.grid_span + (config.branch_kernel_size - 1)


def _stage_halfwidth(stage) -> int:
    if isinstance(stage, Conv2dStage):
        return stage.weight.shape[2] // 2
    if isinstance(stage, ReluStage):
        return 0
    if isinstance(stage, LsDfnStage):
        return (lsdfn_footprint(stage.config) - 1) // 2
    if isinstance(stage, ConcatSkipStage):
        # The skip passes the input through untouched (half-width 0).
        return max(0, _stage_halfwidth(stage.inner))
    raise TypeError(f"no footprint rule for stage type {type(stage).__name__}")


def stack_footprint(model: Stack) -> int:
    """Dependency footprint extent of a Stack (square, odd)."""
    half = sum(_stage_halfwidth(st) for st in model.stages)
    return 2 * half + 1
