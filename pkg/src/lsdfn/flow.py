"""Synthetic two-frame optical flow harness.

Desk-scale training ground for the dynamic filtering block: scenes of
textured rectangles and discs shifted by integer displacements between two
frames, a parameter-matched plain-convolution baseline, endpoint-error
training with SGD momentum, and model checkpoints.

Conventions: frames are (1, H, W) float32 in [0, 1]; ground-truth flow is
(2, H, W) float32 with channel 0 the horizontal displacement du and channel 1
the vertical displacement dv, so a scene point at (y, x) in frame A sits at
(y + dv, x + du) in frame B. Objects are drawn in order and the later object
wins overlaps in both frames and in the flow map.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .layer import LsDfnConfig, init_params
from .stack import Conv2dStage, ConcatSkipStage, LsDfnStage, ReluStage, Stack
from .tensor import Rng, derive_seed, gaussian_fill, read_tensor, write_tensor
from .textkv import parse_bool, read_kv, write_kv

_MODEL_FILE = "model.txt"
_MANIFEST_FILE = "manifest.txt"

# Stem width shared by both flow architectures (first conv 2 -> STEM_CHANNELS).
STEM_CHANNELS = 16

# Shrink factors on the head conv init. A full-scale head makes early steps
# suppress init noise by shrinking the trunk, which starves the trunk ReLUs
# and can freeze the dynamic block permanently; an exactly-zero head sends
# zero upstream on the first step and leaves early block gradients nearly
# collinear. A tiny random head avoids both failure modes. In the lsdfn
# model the slice reading the block starts hotter than the slice reading
# the concat skip: with equal tiny slices, early optimization satisfies the
# loss through the one-hop skip path and suppresses the deep block path
# (its output magnitude collapses ~10x within 200 iterations and rarely
# recovers inside a short run); concentrating initial output sensitivity
# on the block makes its parameters earn gradient from the first step.
HEAD_INIT_SCALE = 0.01
HEAD_BLOCK_INIT_SCALE = 0.1

# Additive offset on the attention-branch sample bias that hands each block
# output channel a different preferred grid sample at init (the four grid
# corners, cycling). The residual kernel init makes every output channel
# compute the same per-position channel mean, so the block starts rank-1
# across output channels and the head cannot tell its channels apart; with
# residual attention the biased sample starts at weight offset+1 against 1
# for the rest, so each output channel leans toward a distinct displaced
# neighborhood from the first step and the symmetry never has to be broken
# by gradient noise alone.
SAMPLE_PREFERENCE_BIAS = 3.0

# Floor of the endpoint-error gradient denominator. The loss VALUE is always
# the exact mean distance; only the subgradient inside this ball is smoothed
# (grad = d / max(|d|, eps), so it vanishes linearly as d -> 0 instead of
# keeping unit magnitude). Without the floor, near-perfect pixels emit
# full-strength gradients in the direction of their rounding noise, which in
# flow scenes (mostly zero-motion background) drowns the matching signal.
# 0.1 px is ~1.7% of the displacement range: errors below it count as solved.
_EPE_EPS = 0.1


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FlowSample:
    """One two-frame scene with dense ground-truth displacement."""

    frame_a: np.ndarray  # (1, H, W) float32 in [0, 1]
    frame_b: np.ndarray  # (1, H, W) float32 in [0, 1]
    flow: np.ndarray     # (2, H, W) float32, channels (du, dv)


def _draw_displacement(rng: Rng, max_displacement: int) -> Tuple[int, int]:
    du = int(rng.integers(-max_displacement, max_displacement + 1, 1)[0])
    dv = int(rng.integers(-max_displacement, max_displacement + 1, 1)[0])
    return du, dv


def gen_flow_dataset(count: int, height: int, width: int,
                     objects_per_image: int = 2, max_displacement: int = 6,
                     seed: int = 0, opposing_motion: bool = False,
                     fixed_displacement: Optional[Tuple[int, int]] = None,
                     ) -> List[FlowSample]:
    """Generate a deterministic synthetic flow dataset.

    Each sample draws its own child stream (derive_seed(seed, index)), so the
    dataset is bitwise reproducible and samples are independent of count.
    The background is a textured plane (base level plus per-pixel noise)
    shared by both frames, so zero-motion pixels match exactly. Per object
    the draw order is fixed: shape kind, half extents (one radius for a
    disc), displacement, center row, center column, base intensity, texture
    noise. Displacements are integers in [-max_displacement,
    max_displacement] per axis and placement margins guarantee every object
    stays fully inside both frames, so frame B is an exact integer warp of
    frame A on non-occluded object pixels.

    Args:
        count: number of samples, >= 1.
        height: frame height, >= 8.
        width: frame width, >= 8.
        objects_per_image: objects per scene, >= 1.
        max_displacement: per-axis displacement bound, 0 <= D <= min(H, W)//4.
        seed: stream seed for the whole dataset.
        opposing_motion: every scene's second object moves exactly opposite
            to its first (needs objects_per_image >= 2 and D >= 1), which
            defeats any single global-motion shortcut.
        fixed_displacement: optional (du, dv) override applied to every
            object; mutually exclusive with opposing_motion.

    Returns:
        List of FlowSample.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if height < 8 or width < 8:
        raise ValueError("frames must be at least 8x8")
    if objects_per_image < 1:
        raise ValueError("objects_per_image must be >= 1")
    if not 0 <= max_displacement <= min(height, width) // 4:
        raise ValueError(
            f"max_displacement {max_displacement} outside [0, {min(height, width) // 4}] "
            f"for {height}x{width} frames")
    if fixed_displacement is not None:
        du, dv = fixed_displacement
        if max(abs(int(du)), abs(int(dv))) > max_displacement:
            raise ValueError("fixed_displacement exceeds max_displacement")
        if opposing_motion:
            raise ValueError("fixed_displacement and opposing_motion are exclusive")
    if opposing_motion and (objects_per_image < 2 or max_displacement < 1):
        raise ValueError("opposing_motion needs >= 2 objects and max_displacement >= 1")

    half_max = max(2, min(height, width) // 5)
    samples = []
    for index in range(count):
        rng = Rng(derive_seed(seed, index))
        # Static textured background, identical in both frames: zero-motion
        # pixels therefore match exactly, the same way object pixels match
        # under their integer warp.
        bg = 0.3 + 0.2 * float(rng.uniforms(1)[0])
        grain = 0.07 * (2.0 * rng.uniforms(height * width) - 1.0)
        plane = np.clip(bg + grain.reshape(height, width), 0.0, 1.0).astype(np.float32)
        frame_a = plane.copy()
        frame_b = plane.copy()
        flow = np.zeros((2, height, width), dtype=np.float32)

        first_disp: Optional[Tuple[int, int]] = None
        for obj in range(objects_per_image):
            kind = int(rng.integers(0, 2, 1)[0])  # 0 rectangle, 1 disc
            if kind == 0:
                hy = int(rng.integers(2, half_max + 1, 1)[0])
                hx = int(rng.integers(2, half_max + 1, 1)[0])
            else:
                hy = hx = int(rng.integers(2, half_max + 1, 1)[0])

            if fixed_displacement is not None:
                du, dv = int(fixed_displacement[0]), int(fixed_displacement[1])
            elif opposing_motion and obj == 1:
                du, dv = -first_disp[0], -first_disp[1]
            else:
                du, dv = _draw_displacement(rng, max_displacement)
                if opposing_motion and obj == 0:
                    for _ in range(16):
                        if (du, dv) != (0, 0):
                            break
                        du, dv = _draw_displacement(rng, max_displacement)
                    else:
                        du = max_displacement
            if obj == 0:
                first_disp = (du, dv)

            # Shrink the object until a center exists that keeps it inside
            # both frames; the ranges below are exactly that constraint.
            for _ in range(16):
                ylo, yhi = hy + max(0, -dv), height - 1 - hy - max(0, dv)
                xlo, xhi = hx + max(0, -du), width - 1 - hx - max(0, du)
                if ylo <= yhi and xlo <= xhi:
                    break
                hy, hx = max(1, hy - 1), max(1, hx - 1)
            else:
                raise RuntimeError(
                    f"sample {index}: no feasible placement for displacement ({du}, {dv})")
            cy = int(rng.integers(ylo, yhi + 1, 1)[0])
            cx = int(rng.integers(xlo, xhi + 1, 1)[0])

            base = 0.55 + 0.4 * float(rng.uniforms(1)[0])
            noise = 0.05 * (2.0 * rng.uniforms((2 * hy + 1) * (2 * hx + 1)) - 1.0)
            patch = np.clip(base + noise.reshape(2 * hy + 1, 2 * hx + 1),
                            0.0, 1.0).astype(np.float32)
            if kind == 0:
                mask = np.ones_like(patch, dtype=bool)
            else:
                yy, xx = np.mgrid[0:2 * hy + 1, 0:2 * hx + 1]
                mask = (yy - hy) ** 2 + (xx - hx) ** 2 <= hy * hy

            ay, ax = slice(cy - hy, cy + hy + 1), slice(cx - hx, cx + hx + 1)
            by = slice(cy + dv - hy, cy + dv + hy + 1)
            bx = slice(cx + du - hx, cx + du + hx + 1)
            frame_a[ay, ax][mask] = patch[mask]
            frame_b[by, bx][mask] = patch[mask]
            flow[0, ay, ax][mask] = float(du)
            flow[1, ay, ax][mask] = float(dv)

        samples.append(FlowSample(frame_a=frame_a[None], frame_b=frame_b[None],
                                  flow=flow))
    return samples


def dataset_arrays(dataset: Sequence[FlowSample]) -> Tuple[np.ndarray, np.ndarray]:
    """Stack a dataset into model input (n, 2, H, W) and target (n, 2, H, W)."""
    x = np.stack([np.concatenate([s.frame_a, s.frame_b], axis=0) for s in dataset])
    t = np.stack([s.flow for s in dataset])
    return x.astype(np.float32, copy=False), t.astype(np.float32, copy=False)


# ---------------------------------------------------------------------------
# Endpoint error
# ---------------------------------------------------------------------------


def aepe(pred: np.ndarray, target: np.ndarray) -> float:
    """Average endpoint error of one flow map against ground truth.

    Mean over pixels of the Euclidean norm of the per-pixel displacement
    difference, accumulated in float64.

    Args:
        pred: predicted flow, (2, H, W).
        target: ground-truth flow, same shape.

    Returns:
        Scalar average endpoint error.
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape or pred.ndim != 3 or pred.shape[0] != 2:
        raise ValueError(f"expected matching (2, H, W) maps, got {pred.shape} "
                         f"vs {target.shape}")
    d = pred.astype(np.float64) - target.astype(np.float64)
    return float(np.mean(np.sqrt(d[0] ** 2 + d[1] ** 2)))


def aepe_batch(pred: np.ndarray, target: np.ndarray) -> float:
    """Average endpoint error over a batch of (n, 2, H, W) flow maps."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape or pred.ndim != 4 or pred.shape[1] != 2:
        raise ValueError(f"expected matching (n, 2, H, W) maps, got {pred.shape} "
                         f"vs {target.shape}")
    d = pred.astype(np.float64) - target.astype(np.float64)
    return float(np.mean(np.sqrt(d[:, 0] ** 2 + d[:, 1] ** 2)))


def _epe_loss(pred: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    """Batch endpoint-error loss and its gradient in the prediction's dtype."""
    d = pred.astype(np.float64) - target.astype(np.float64)
    dist = np.sqrt(d[:, 0] ** 2 + d[:, 1] ** 2)
    loss = float(np.mean(dist))
    denom = np.maximum(dist, _EPE_EPS)[:, None] * float(dist.size)
    return loss, (d / denom).astype(pred.dtype)


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelSpec:
    """Architecture selector for the flow A/B pair.

    Both kinds share the stem (2 -> STEM_CHANNELS -> feature_channels convs
    with ReLU); `block` always describes the dynamic filtering block, because
    it fixes the parameter budget the baseline is matched against. kind
    "lsdfn" inserts the block behind a concatenating skip; kind "baseline"
    replaces it with a third plain convolution whose width is solved so the
    totals agree within 5%.
    """

    kind: str
    feature_channels: int = 8
    block: Optional[LsDfnConfig] = None

    def __post_init__(self):
        if self.kind not in ("baseline", "lsdfn"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.feature_channels < 1:
            raise ValueError("feature_channels must be >= 1")
        if self.block is None:
            object.__setattr__(self, "block", LsDfnConfig(
                channels=self.feature_channels, out_channels=4,
                samples=3, sample_stride=3))
        if self.block.channels != self.feature_channels:
            raise ValueError(
                f"block.channels {self.block.channels} != feature_channels "
                f"{self.feature_channels}")

    @property
    def block_out_channels(self) -> int:
        b = self.block
        return b.post_conv_channels if b.post_conv_channels is not None else b.out_channels


def _conv_count(cin: int, cout: int, k: int) -> int:
    return cout * cin * k * k + cout


def _block_count(cfg: LsDfnConfig) -> int:
    c, kb = cfg.channels, cfg.branch_kernel_size
    n = _conv_count(c, c, kb)
    n += _conv_count(c, cfg.kernel_branch_channels, kb)
    if cfg.fusion_mode == "attention":
        n += _conv_count(c, cfg.attention_sample_channels, kb)
        n += _conv_count(c, cfg.attention_position_channels, kb)
    if cfg.post_conv_channels is not None:
        n += _conv_count(cfg.out_channels, cfg.post_conv_channels, 1)
    return n


def lsdfn_param_count(spec: ModelSpec) -> int:
    """Closed-form parameter count of the block-bearing flow model."""
    c = spec.feature_channels
    return (_conv_count(2, STEM_CHANNELS, 3) + _conv_count(STEM_CHANNELS, c, 3)
            + _block_count(spec.block)
            + _conv_count(c + spec.block_out_channels, 2, 3))


def baseline_param_count(spec: ModelSpec, width: int) -> int:
    """Closed-form parameter count of the plain baseline at a given width."""
    c = spec.feature_channels
    return (_conv_count(2, STEM_CHANNELS, 3) + _conv_count(STEM_CHANNELS, c, 3)
            + _conv_count(c, width, 3) + _conv_count(width, 2, 3))


def matched_baseline_width(spec: ModelSpec) -> int:
    """Width of the baseline's third conv matching the block model's budget.

    Solves for the integer width whose total is nearest the block model's
    count. Raises RuntimeError with both counts if even the best integer
    width misses by more than 5%.
    """
    target = lsdfn_param_count(spec)
    c = spec.feature_channels
    fixed = _conv_count(2, STEM_CHANNELS, 3) + _conv_count(STEM_CHANNELS, c, 3) + 2
    per_width = 9 * c + 1 + 9 * 2  # third conv row plus head conv column
    guess = max(1, round((target - fixed) / per_width))
    best = min((w for w in (guess - 1, guess, guess + 1) if w >= 1),
               key=lambda w: abs(baseline_param_count(spec, w) - target))
    gap = abs(baseline_param_count(spec, best) - target) / target
    if gap > 0.05:
        raise RuntimeError(
            f"cannot parameter-match baseline: block model has {target} "
            f"parameters, best baseline (width {best}) has "
            f"{baseline_param_count(spec, best)} ({gap:.1%} apart)")
    return best


def parameter_report(spec: ModelSpec) -> dict:
    """Parameter accounting for the A/B pair defined by one spec."""
    width = matched_baseline_width(spec)
    target = lsdfn_param_count(spec)
    matched = baseline_param_count(spec, width)
    return {
        "lsdfn_params": target,
        "baseline_params": matched,
        "baseline_width": width,
        "relative_gap": abs(matched - target) / target,
    }


def _stagger_sample_preference(params, cfg: LsDfnConfig) -> None:
    # Corners of the s x s sample grid in row-major order; channel v prefers
    # corner v mod 4. Bias layout matches the attention branch: channel
    # v * s^2 + sigma holds output channel v's weight on sample sigma.
    s = cfg.samples
    if cfg.fusion_mode != "attention" or s < 2:
        return
    corners = (0, s - 1, s * (s - 1), s * s - 1)
    for v in range(cfg.out_channels):
        params.attention_sample_bias[v * s * s + corners[v % 4]] = (
            SAMPLE_PREFERENCE_BIAS)


def build_model(spec: ModelSpec, seed: int) -> Stack:
    """Instantiate a flow model with deterministic initialization.

    Convolution weights are fan-in-scaled Gaussians on per-stage child
    streams; biases start at zero; the dynamic filtering block uses its
    residual initialization. The head conv weight is scaled down by
    HEAD_INIT_SCALE, so every model begins as a near-zero-flow predictor:
    early steps grow the head along the signal instead of suppressing init
    noise by shrinking the trunk, while the small nonzero weight still sends
    gradient upstream from the very first step. In the lsdfn model the head
    slice over the block's channels starts at HEAD_BLOCK_INIT_SCALE instead,
    which keeps early optimization engaged with the block rather than
    letting it ride the skip path alone, and the block's attention sample
    bias is staggered so each output channel starts preferring a different
    grid corner (see SAMPLE_PREFERENCE_BIAS).

    Args:
        spec: architecture selector.
        seed: stream seed; equal (spec, seed) gives bitwise-equal models.

    Returns:
        Stack mapping (n, 2, H, W) frame pairs to (n, 2, H, W) flow.
    """
    def conv(cin: int, cout: int, child: int, k: int = 3) -> Conv2dStage:
        std = 1.0 / np.sqrt(cin * k * k)
        w = np.asarray(gaussian_fill((cout, cin, k, k), derive_seed(seed, child),
                                     std=std)).copy()
        return Conv2dStage(w, np.zeros(cout, dtype=np.float32))

    c = spec.feature_channels
    stem = [conv(2, STEM_CHANNELS, 0), ReluStage(),
            conv(STEM_CHANNELS, c, 1), ReluStage()]
    if spec.kind == "baseline":
        width = matched_baseline_width(spec)
        tail = [conv(c, width, 2), ReluStage(), conv(width, 2, 3)]
        tail[-1].weight *= HEAD_INIT_SCALE
    else:
        block = LsDfnStage(init_params(spec.block, derive_seed(seed, 4)), spec.block)
        _stagger_sample_preference(block.params, spec.block)
        tail = [ConcatSkipStage(block), conv(c + spec.block_out_channels, 2, 3)]
        tail[-1].weight[:, :c] *= HEAD_INIT_SCALE
        tail[-1].weight[:, c:] *= HEAD_BLOCK_INIT_SCALE
    return Stack(stem + tail)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings for `train`.

    learning_rate is a piecewise-constant schedule: ((start_iteration, rate),
    ...) sorted by start, first start 0, all rates positive. model_spec is
    carried for callers that build the model and the config from one source;
    train() itself takes the already-built model.
    """

    iterations: int
    batch_size: int = 4
    learning_rate: Tuple[Tuple[int, float], ...] = ((0, 0.002), (100, 0.005))
    momentum: float = 0.9
    seed: int = 0
    log_interval: int = 20
    loss: str = "epe"
    model_spec: Optional[ModelSpec] = None

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.log_interval < 1:
            raise ValueError("log_interval must be >= 1")
        if self.loss != "epe":
            raise ValueError(f"unsupported loss {self.loss!r}")
        sched = tuple((int(s), float(r)) for s, r in self.learning_rate)
        if not sched or sched[0][0] != 0:
            raise ValueError("learning_rate schedule must start at iteration 0")
        starts = [s for s, _ in sched]
        if sorted(set(starts)) != starts:
            raise ValueError("learning_rate starts must be strictly increasing")
        if any(r <= 0 for _, r in sched):
            raise ValueError("learning rates must be > 0")
        object.__setattr__(self, "learning_rate", sched)


def lr_at(schedule: Sequence[Tuple[int, float]], iteration: int) -> float:
    """Rate of a piecewise-constant schedule at an iteration."""
    rate = schedule[0][1]
    for start, r in schedule:
        if iteration >= start:
            rate = r
        else:
            break
    return rate


@dataclass(frozen=True)
class MetricsRow:
    """One training-log row.

    Intermediate rows report the current batch (loss == aepe == batch
    endpoint error, logged before the update); the final row, at
    iteration == cfg.iterations, reports the full-dataset average endpoint
    error under the final parameters. wall_ms is elapsed time since training
    started and is the one field excluded from reproducibility claims.
    """

    iteration: int
    loss: float
    aepe: float
    wall_ms: float


def predict_all(model: Stack, x: np.ndarray, batch_size: int) -> np.ndarray:
    """Run the model over all rows of x in fixed-size forward batches."""
    parts = [model.forward(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
    return np.concatenate(parts, axis=0)


def train(model: Stack, dataset: Sequence[FlowSample], cfg: TrainConfig,
          ) -> List[MetricsRow]:
    """Train a flow model in place with SGD momentum on endpoint error.

    Batches cycle deterministically through the dataset (sample
    (iteration * batch_size + j) % len(dataset)), so a run is bitwise
    reproducible apart from wall_ms. The velocity update is
    v = momentum * v + g; p -= lr * v.

    Args:
        model: stack to optimize; parameters are updated in place.
        dataset: training samples.
        cfg: optimization settings.

    Returns:
        Logged MetricsRow list; the final row holds the full-dataset average
        endpoint error under the final parameters.

    Raises:
        RuntimeError: the loss went non-finite (iteration in the message).
    """
    if not dataset:
        raise ValueError("dataset is empty")
    x, t = dataset_arrays(dataset)
    params = model.named_parameters()
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    rows: List[MetricsRow] = []
    t0 = time.perf_counter()
    n = len(dataset)
    for it in range(cfg.iterations):
        idx = [(it * cfg.batch_size + j) % n for j in range(cfg.batch_size)]
        pred = model.forward(x[idx])
        loss, grad = _epe_loss(pred, t[idx])
        if not np.isfinite(loss):
            raise RuntimeError(f"non-finite loss at iteration {it}")
        model.backward(grad)
        grads = model.named_grads()
        rate = lr_at(cfg.learning_rate, it)
        for name, p in params.items():
            v = velocity[name]
            v *= cfg.momentum
            v += grads[name]
            p -= rate * v
        if it % cfg.log_interval == 0:
            rows.append(MetricsRow(it, loss, loss,
                                   (time.perf_counter() - t0) * 1e3))
    final = aepe_batch(predict_all(model, x, cfg.batch_size), t)
    rows.append(MetricsRow(cfg.iterations, final, final,
                           (time.perf_counter() - t0) * 1e3))
    return rows


# ---------------------------------------------------------------------------
# Model checkpoints
# ---------------------------------------------------------------------------

# Serialized block fields, in declaration order; also the parsing schema.
_BLOCK_PARSERS = {
    "channels": int,
    "out_channels": int,
    "kernel_size": int,
    "samples": int,
    "sample_stride": int,
    "fusion_mode": str,
    "kernel_mode": str,
    "residual_kernel": parse_bool,
    "residual_attention": parse_bool,
    "post_conv_channels": lambda s: None if s == "none" else int(s),
    "branch_kernel_size": int,
}


def _spec_to_kv(spec: ModelSpec) -> dict:
    kv = {"kind": spec.kind, "feature_channels": spec.feature_channels}
    for name in _BLOCK_PARSERS:
        kv[f"block_{name}"] = getattr(spec.block, name)
    if spec.kind == "baseline":
        kv["baseline_width"] = matched_baseline_width(spec)
    return kv


def _spec_from_kv(kv: dict, source: str) -> ModelSpec:
    expected = {"kind", "feature_channels"} | {f"block_{n}" for n in _BLOCK_PARSERS}
    if kv.get("kind") == "baseline":
        expected.add("baseline_width")
    missing = sorted(expected - set(kv))
    unknown = sorted(set(kv) - expected)
    if missing or unknown:
        raise ValueError(f"{source}: missing keys {missing}, unknown keys {unknown}")
    block = LsDfnConfig(**{name: parse(kv[f"block_{name}"])
                           for name, parse in _BLOCK_PARSERS.items()})
    spec = ModelSpec(kind=kv["kind"], feature_channels=int(kv["feature_channels"]),
                     block=block)
    if spec.kind == "baseline":
        stored = int(kv["baseline_width"])
        solved = matched_baseline_width(spec)
        if stored != solved:
            raise ValueError(f"{source}: stored baseline width {stored} does not "
                             f"match solved width {solved}")
    return spec


def save_model(directory, model: Stack, spec: ModelSpec) -> None:
    """Write a flow-model checkpoint directory.

    Layout: one tensor file per named parameter (dots in the name become
    underscores), manifest.txt mapping names to files, model.txt holding the
    ModelSpec. Payloads are float32.
    """
    os.makedirs(directory, exist_ok=True)
    manifest = {}
    for name, arr in model.named_parameters().items():
        fname = name.replace(".", "_") + ".lsdt"
        write_tensor(os.path.join(directory, fname),
                     np.asarray(arr, dtype=np.float32))
        manifest[name] = fname
    write_kv(os.path.join(directory, _MANIFEST_FILE), manifest)
    write_kv(os.path.join(directory, _MODEL_FILE), _spec_to_kv(spec))


def load_model(directory) -> Tuple[Stack, ModelSpec]:
    """Read a checkpoint written by save_model.

    Rebuilds the architecture from model.txt and overwrites every parameter
    from the manifest. The manifest must cover the parameter set exactly and
    every payload must match its parameter's shape.
    """
    model_path = os.path.join(directory, _MODEL_FILE)
    if not os.path.isfile(model_path):
        raise FileNotFoundError(f"not a model checkpoint: missing {model_path}")
    spec = _spec_from_kv(read_kv(model_path), model_path)
    model = build_model(spec, seed=0)
    params = model.named_parameters()
    manifest = read_kv(os.path.join(directory, _MANIFEST_FILE))
    if set(manifest) != set(params):
        missing = sorted(set(params) - set(manifest))
        unknown = sorted(set(manifest) - set(params))
        raise ValueError(f"{directory}: manifest missing {missing}, unknown {unknown}")
    for name, fname in manifest.items():
        arr = np.asarray(read_tensor(os.path.join(directory, fname)))
        if arr.shape != params[name].shape:
            raise ValueError(f"{directory}: {name} has shape {arr.shape}, "
                             f"expected {params[name].shape}")
        params[name][...] = arr
    return model, spec
