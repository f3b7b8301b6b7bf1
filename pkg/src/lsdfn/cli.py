"""Command-line front end.

Subcommands:
    gradcheck     analytical gradients vs central finite differences
    oracle-check  dual-route identities of the block's fast paths
    erf           effective receptive field maps, metrics, and footprints
    train         synthetic-flow training with metrics and a checkpoint
    infer         re-run a checkpoint over its training set and verify
    bench         factored vs materialized filtering wall time and FLOP count

Every subcommand reads a key=value config file (--config), applies --set
overrides, echoes the effective configuration, and exits 0 on success, 1 when
a verification or training run fails, 2 on usage or configuration errors.
Unknown config keys are errors, never ignored. Outputs carry no timestamps;
reruns with equal seeds are bitwise identical apart from wall-time columns.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import os
import statistics
import sys
import time
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import flow
from .erf import compute_erf, erf_metrics, erf_to_image, lsdfn_footprint, stack_footprint
from .images import flow_to_rgb, write_ppm
from .layer import (LsDfnConfig, assemble_kernel, attended_sample_conv,
                    build_attention, fuse_samples, init_params,
                    interleave_kernel_params, load_params, lsdfn_backward,
                    lsdfn_forward, sample_conv, save_params,
                    split_kernel_params)
from .reference import (dfn_reference, full_attention_reference,
                        outer_attention, sampled_conv_reference)
from .stack import Conv2dStage, LsDfnStage, Stack
from .tensor import (TensorFileError, derive_seed, gaussian_fill, grad_check,
                     read_tensor, write_tensor, _conv2d)
from .textkv import format_value, parse_bool, read_kv, write_kv


class CliError(Exception):
    """Failure with a process exit code (1 check failure, 2 usage/config)."""

    def __init__(self, message: str, code: int = 2):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# Config schemas
# ---------------------------------------------------------------------------


def _parse_int(s: str) -> int:
    try:
        return int(s, 0)
    except ValueError:
        raise ValueError(f"not an integer: {s!r}")


def _parse_float(s: str) -> float:
    try:
        return float(s)
    except ValueError:
        raise ValueError(f"not a number: {s!r}")


def _parse_int_list(s: str) -> Tuple[int, ...]:
    items = [p.strip() for p in s.split(",") if p.strip()]
    if not items:
        return ()
    return tuple(_parse_int(p) for p in items)


def _parse_str_list(s: str) -> Tuple[str, ...]:
    return tuple(p.strip() for p in s.split(",") if p.strip())


def _parse_schedule(s: str) -> Tuple[Tuple[int, float], ...]:
    entries = []
    for part in s.split(","):
        part = part.strip()
        if not part:
            continue
        if ":" not in part:
            raise ValueError(f"schedule entry {part!r} is not start:rate")
        start, rate = part.split(":", 1)
        entries.append((_parse_int(start), _parse_float(rate)))
    if not entries:
        raise ValueError("empty learning-rate schedule")
    return tuple(entries)


def _fmt_schedule(sched) -> str:
    return ",".join(f"{s}:{format_value(float(r))}" for s, r in sched)


def _fmt_list(values) -> str:
    return ",".join(format_value(v) for v in values)


class _Key:
    def __init__(self, default, parse: Callable[[str], object],
                 fmt: Callable[[object], str] = format_value):
        self.default = default
        self.parse = parse
        self.fmt = fmt


def _choice(*options: str) -> Callable[[str], str]:
    def parse(s: str) -> str:
        if s not in options:
            raise ValueError(f"must be one of {', '.join(options)}; got {s!r}")
        return s
    return parse


_SCHEMAS: Dict[str, Dict[str, _Key]] = {
    "gradcheck": {
        "ops": _Key(("conv2d", "lsdfn"), _parse_str_list, _fmt_list),
        "epsilon": _Key(1e-6, _parse_float),
        "tolerance": _Key(1e-5, _parse_float),
        "seed": _Key(0, _parse_int),
    },
    "oracle-check": {
        "suites": _Key(("all",), _parse_str_list, _fmt_list),
        "seed": _Key(0, _parse_int),
    },
    "erf": {
        "height": _Key(25, _parse_int),
        "width": _Key(25, _parse_int),
        "channels": _Key(8, _parse_int),
        "out_channels": _Key(4, _parse_int),
        "kernel_size": _Key(3, _parse_int),
        "sample_stride": _Key(2, _parse_int),
        "samples": _Key((1, 3, 5), _parse_int_list, _fmt_list),
        "trials": _Key(32, _parse_int),
        "tau": _Key(0.01, _parse_float),
        "seed": _Key(0, _parse_int),
    },
    "train": {
        "model": _Key("lsdfn", _choice("lsdfn", "baseline")),
        "samples": _Key(512, _parse_int),
        "height": _Key(32, _parse_int),
        "width": _Key(32, _parse_int),
        "objects": _Key(2, _parse_int),
        "max_displacement": _Key(6, _parse_int),
        "opposing": _Key(True, parse_bool),
        "iterations": _Key(2000, _parse_int),
        "batch_size": _Key(4, _parse_int),
        "learning_rate": _Key(((0, 0.002), (100, 0.005)),
                              _parse_schedule, _fmt_schedule),
        "momentum": _Key(0.9, _parse_float),
        "log_interval": _Key(20, _parse_int),
        "viz_count": _Key(4, _parse_int),
        "feature_channels": _Key(8, _parse_int),
        "block_out_channels": _Key(4, _parse_int),
        "block_samples": _Key(3, _parse_int),
        "block_sample_stride": _Key(3, _parse_int),
        "block_kernel_size": _Key(3, _parse_int),
        "block_fusion_mode": _Key("attention", _choice("attention", "max_pool", "mean")),
        "block_kernel_mode": _Key("fig4", _choice("fig4", "eq6_literal")),
        "seed": _Key(0, _parse_int),
    },
    "infer": {
        "checkpoint": _Key("", str),
        "model": _Key("any", _choice("any", "lsdfn", "baseline")),
        "viz_count": _Key(4, _parse_int),
    },
    "bench": {
        "batch": _Key(1, _parse_int),
        "channels": _Key(16, _parse_int),
        "out_channels": _Key(4, _parse_int),
        "kernel_size": _Key(3, _parse_int),
        "samples": _Key(3, _parse_int),
        "sample_stride": _Key(2, _parse_int),
        "height": _Key(32, _parse_int),
        "width": _Key(32, _parse_int),
        "attention": _Key(False, parse_bool),
        "repetitions": _Key(5, _parse_int),
        "seed": _Key(0, _parse_int),
    },
}


def _resolve_config(command: str, args) -> dict:
    """Defaults <- config file <- --set overrides <- --seed."""
    schema = _SCHEMAS[command]
    cfg = {k: key.default for k, key in schema.items()}

    def apply(key: str, raw: str, source: str) -> None:
        if key not in schema:
            raise CliError(f"{source}: unknown config key {key!r} for {command} "
                           f"(known: {', '.join(schema)})")
        try:
            cfg[key] = schema[key].parse(raw)
        except ValueError as e:
            raise CliError(f"{source}: config key {key}: {e}")

    if args.config is not None:
        if not os.path.isfile(args.config):
            raise CliError(f"config file not found: {args.config}")
        try:
            pairs = read_kv(args.config)
        except ValueError as e:
            raise CliError(str(e))
        for key, raw in pairs.items():
            apply(key, raw, args.config)
    for item in args.overrides:
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        apply(key.strip(), raw.strip(), "--set")
    if args.seed is not None:
        if "seed" not in schema:
            raise CliError(f"--seed does not apply to {command}")
        cfg["seed"] = args.seed
    return cfg


def _echo_config(command: str, cfg: dict) -> None:
    print(f"{command}: effective config")
    for key, spec in _SCHEMAS[command].items():
        print(f"  {key}={spec.fmt(cfg[key])}")


def _config_lines(command: str, cfg: dict) -> List[str]:
    return [f"{key}={spec.fmt(cfg[key])}" for key, spec in _SCHEMAS[command].items()]


def _write_csv(path, header: Sequence[str], rows: Sequence[Sequence],
               comments: Sequence[str] = ()) -> None:
    with open(path, "w", newline="") as f:
        for line in comments:
            f.write(f"# {line}\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _require_out(args, command: str) -> str:
    if args.out is None:
        raise CliError(f"{command} requires --out DIR")
    os.makedirs(args.out, exist_ok=True)
    return args.out


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

_GRADCHECK_BLOCKS: List[Tuple[str, LsDfnConfig]] = [
    ("s1_attention_fig4", LsDfnConfig(channels=3, out_channels=2, samples=1)),
    ("s3_attention_fig4", LsDfnConfig(channels=3, out_channels=2, samples=3,
                                      sample_stride=2)),
    ("s3_attention_eq6", LsDfnConfig(channels=3, out_channels=2, samples=3,
                                     sample_stride=2, kernel_mode="eq6_literal")),
    ("s3_max_pool_fig4", LsDfnConfig(channels=3, out_channels=2, samples=3,
                                     sample_stride=2, fusion_mode="max_pool")),
    ("s3_mean_fig4_post", LsDfnConfig(channels=3, out_channels=2, samples=3,
                                      sample_stride=1, fusion_mode="mean",
                                      post_conv_channels=3)),
    ("s3_attention_fig4_nores", LsDfnConfig(channels=3, out_channels=2, samples=3,
                                            sample_stride=2, residual_kernel=False,
                                            residual_attention=False)),
]


def _gradcheck_lsdfn_case(name: str, config: LsDfnConfig, seed: int,
                          epsilon: float, tolerance: float):
    """Reports for one block shape: input plus two parameter fields."""
    x0 = np.asarray(gaussian_fill((1, config.channels, 5, 5),
                                  derive_seed(seed, 0), dtype=np.float64))
    params = init_params(config, derive_seed(seed, 1), scheme="gaussian")
    y0, saved = lsdfn_forward(x0, params, config)
    probe = np.asarray(gaussian_fill(y0.shape, derive_seed(seed, 2),
                                     dtype=np.float64))
    grads = lsdfn_backward(probe, saved, params, config)

    def loss_of_input(x):
        y, _ = lsdfn_forward(x, params, config)
        return float(np.sum(probe * y))

    out = [(name, "input",
            grad_check(loss_of_input, x0, grads.x, epsilon=epsilon,
                       tolerance=tolerance))]
    for field_name in ("kernel_weight", "attention_position_weight"):
        base = getattr(params, field_name)
        if base is None:
            continue
        p0 = np.asarray(base, dtype=np.float64)

        def loss_of_param(p, _f=field_name):
            trial = dataclasses.replace(params, **{_f: p})
            y, _ = lsdfn_forward(x0, trial, config)
            return float(np.sum(probe * y))

        out.append((name, field_name,
                    grad_check(loss_of_param, p0, getattr(grads, field_name),
                               epsilon=epsilon, tolerance=tolerance)))
    return out


def _gradcheck_conv_case(pad: Optional[int], seed: int, epsilon: float,
                         tolerance: float):
    from .tensor import conv2d_shared, conv2d_shared_backward
    x0 = np.asarray(gaussian_fill((1, 2, 5, 6), derive_seed(seed, 0),
                                  dtype=np.float64))
    w0 = np.asarray(gaussian_fill((3, 2, 3, 3), derive_seed(seed, 1),
                                  dtype=np.float64))
    b0 = np.asarray(gaussian_fill((3,), derive_seed(seed, 2), dtype=np.float64))
    y0 = np.asarray(conv2d_shared(x0, w0, b0, pad=pad))
    probe = np.asarray(gaussian_fill(y0.shape, derive_seed(seed, 3),
                                     dtype=np.float64))
    gx, gw, _ = conv2d_shared_backward(probe, x0, w0, pad=pad)
    name = "pad_default" if pad is None else f"pad{pad}"

    def loss_of_x(x):
        return float(np.sum(probe * np.asarray(conv2d_shared(x, w0, b0, pad=pad))))

    def loss_of_w(w):
        return float(np.sum(probe * np.asarray(conv2d_shared(x0, w, b0, pad=pad))))

    return [
        (name, "input", grad_check(loss_of_x, x0, np.asarray(gx),
                                   epsilon=epsilon, tolerance=tolerance)),
        (name, "weight", grad_check(loss_of_w, w0, np.asarray(gw),
                                    epsilon=epsilon, tolerance=tolerance)),
    ]


def cmd_gradcheck(cfg: dict, args) -> int:
    known = ("conv2d", "lsdfn")
    if not cfg["ops"]:
        raise CliError("gradcheck: no ops selected")
    for op in cfg["ops"]:
        if op not in known:
            raise CliError(f"gradcheck: unknown op {op!r} (known: {', '.join(known)})")
    eps, tol, seed = cfg["epsilon"], cfg["tolerance"], cfg["seed"]
    if eps <= 0:
        raise CliError("gradcheck: epsilon must be > 0")
    if tol < 0:
        raise CliError("gradcheck: tolerance must be >= 0")

    rows = []
    failures = 0
    for op in cfg["ops"]:
        if op == "conv2d":
            cases = []
            for i, pad in enumerate((None, 0)):
                cases.extend(_gradcheck_conv_case(pad, derive_seed(seed, 10 + i),
                                                  eps, tol))
        else:
            cases = []
            for i, (name, config) in enumerate(_GRADCHECK_BLOCKS):
                cases.extend(_gradcheck_lsdfn_case(name, config,
                                                   derive_seed(seed, 20 + i),
                                                   eps, tol))
        for case, param, report in cases:
            status = "ok" if report.passed else "FAIL"
            if not report.passed:
                failures += 1
            coord = ":".join(str(c) for c in report.worst_coordinate)
            print(f"  {status} {op} {case} {param} "
                  f"max_rel={report.max_relative_error:.3e} worst={coord}")
            rows.append([op, case, param, repr(report.max_relative_error),
                         coord, repr(eps), repr(tol), status])
    if args.out is not None:
        os.makedirs(args.out, exist_ok=True)
        _write_csv(os.path.join(args.out, "gradcheck.csv"),
                   ["op", "case", "parameter", "max_rel_error",
                    "worst_coordinate", "epsilon", "tolerance", "status"],
                   rows)
    print(f"gradcheck: {len(rows)} checks, {failures} failed")
    return 1 if failures else 0


# ---------------------------------------------------------------------------
# oracle-check
# ---------------------------------------------------------------------------

_ORACLE_SUITES = ("fast_vs_reference", "split_vs_full", "dfn_reduction",
                  "identity_init", "layout_roundtrip")


def _block_inputs(config: LsDfnConfig, seed: int, n: int = 2, h: int = 6,
                  w: int = 7, dtype=np.float32):
    f = np.asarray(gaussian_fill((n, config.channels, h, w),
                                 derive_seed(seed, 0), dtype=dtype))
    raw_k = np.asarray(gaussian_fill((n, config.kernel_branch_channels, h, w),
                                     derive_seed(seed, 1), dtype=dtype))
    field = split_kernel_params(raw_k, config)
    attn = None
    if config.fusion_mode == "attention":
        raw_s = np.asarray(gaussian_fill((n, config.attention_sample_channels, h, w),
                                         derive_seed(seed, 2), dtype=dtype))
        raw_p = np.asarray(gaussian_fill((n, config.attention_position_channels, h, w),
                                         derive_seed(seed, 3), dtype=dtype))
        attn = build_attention(raw_s, raw_p, config)
    return f, field, attn


def _suite_fast_vs_reference(seed: int) -> Tuple[float, float]:
    """Factored forward vs materialized-kernel loops, float32, relative."""
    worst = 0.0
    configs = [
        LsDfnConfig(channels=4, out_channels=3, samples=3, sample_stride=2),
        LsDfnConfig(channels=4, out_channels=3, samples=3, sample_stride=2,
                    kernel_mode="eq6_literal"),
        LsDfnConfig(channels=4, out_channels=3, samples=3, sample_stride=1,
                    fusion_mode="max_pool"),
        LsDfnConfig(channels=5, out_channels=2, samples=1),
    ]
    for i, config in enumerate(configs):
        f, field, attn = _block_inputs(config, derive_seed(seed, i))
        if attn is not None:
            fast = attended_sample_conv(f, field, attn, config)
        else:
            fast = sample_conv(f, field, config)
        kernels = assemble_kernel(field, config)
        ref = sampled_conv_reference(f, kernels, config, attn)
        scale = max(1.0, float(np.max(np.abs(ref.data))))
        worst = max(worst, float(np.max(np.abs(fast.data - ref.data))) / scale)
    return worst, 1e-5


def _suite_split_vs_full(seed: int) -> Tuple[float, float]:
    """Split attention vs one-weight-per-(sample, offset), float64 algebra."""
    worst = 0.0
    for i, config in enumerate([
        LsDfnConfig(channels=4, out_channels=3, samples=3, sample_stride=2),
        LsDfnConfig(channels=3, out_channels=2, samples=3, sample_stride=1,
                    kernel_mode="eq6_literal"),
    ]):
        f, field, attn = _block_inputs(config, derive_seed(seed, i),
                                       dtype=np.float64)
        fast = attended_sample_conv(f, field, attn, config)
        a_full = outer_attention(attn, config)
        ref = full_attention_reference(f, field, a_full, config)
        scale = max(1.0, float(np.max(np.abs(ref.data))))
        worst = max(worst, float(np.max(np.abs(fast.data - ref.data))) / scale)
    return worst, 1e-6


def _suite_dfn_reduction(seed: int) -> Tuple[float, float]:
    """s=1 with neutral attention equals plain dynamic filtering bitwise.

    Uses the canonical-order reference route, whose accumulation sequence
    matches dfn_reference exactly; multiplying by attention weights that are
    exactly 1.0 is lossless, so the comparison is at zero tolerance. The
    factored route's s=1 agreement is covered by fast_vs_reference.
    """
    config = LsDfnConfig(channels=4, out_channels=3, samples=1)
    f, field, _ = _block_inputs(config, seed)
    neutral = build_attention(
        np.zeros((f.shape[0], config.attention_sample_channels) + f.shape[2:],
                 dtype=f.dtype),
        np.zeros((f.shape[0], config.attention_position_channels) + f.shape[2:],
                 dtype=f.dtype),
        config)
    kernels = assemble_kernel(field, config)
    fused = fuse_samples(sampled_conv_reference(f, kernels, config, neutral),
                         config)
    plain = dfn_reference(f, kernels)
    return float(np.max(np.abs(fused - plain))), 0.0


def _suite_identity_init(seed: int) -> Tuple[float, float]:
    """Residual init maps any input to the feature branch's channel mean."""
    config = LsDfnConfig(channels=4, out_channels=3, samples=1)
    params = init_params(config, derive_seed(seed, 0), scheme="residual")
    x = np.asarray(gaussian_fill((2, 4, 6, 7), derive_seed(seed, 1)))
    y, _ = lsdfn_forward(x, params, config)
    f = _conv2d(x, params.feature_weight, params.feature_bias,
                config.branch_kernel_size // 2)
    expected = np.broadcast_to(f.mean(axis=1, keepdims=True), y.shape)
    scale = max(1.0, float(np.max(np.abs(expected))))
    return float(np.max(np.abs(y - expected))) / scale, 1e-6


def _suite_layout_roundtrip(seed: int) -> Tuple[float, float]:
    """Kernel-branch split/interleave and checkpoint round trips, bitwise."""
    import tempfile
    config = LsDfnConfig(channels=4, out_channels=3, samples=3, sample_stride=2,
                         post_conv_channels=5)
    raw = np.asarray(gaussian_fill((2, config.kernel_branch_channels, 4, 5),
                                   derive_seed(seed, 0)))
    field = split_kernel_params(raw, config)
    back = interleave_kernel_params(field, config)
    worst = float(np.max(np.abs(back - raw)))
    params = init_params(config, derive_seed(seed, 1), scheme="gaussian")
    with tempfile.TemporaryDirectory() as tmp:
        save_params(tmp, params, config)
        loaded, loaded_config = load_params(tmp)
    if loaded_config != config:
        return 1.0, 0.0
    for name, arr in params.named().items():
        other = loaded.named()[name]
        if other.shape != arr.shape:
            return 1.0, 0.0
        worst = max(worst, float(np.max(np.abs(other - arr))))
    return worst, 0.0


def cmd_oracle_check(cfg: dict, args) -> int:
    names = cfg["suites"]
    if names == ("all",):
        names = _ORACLE_SUITES
    for name in names:
        if name not in _ORACLE_SUITES:
            raise CliError(f"oracle-check: unknown suite {name!r} "
                           f"(known: {', '.join(_ORACLE_SUITES)}, all)")
    runners = {
        "fast_vs_reference": _suite_fast_vs_reference,
        "split_vs_full": _suite_split_vs_full,
        "dfn_reduction": _suite_dfn_reduction,
        "identity_init": _suite_identity_init,
        "layout_roundtrip": _suite_layout_roundtrip,
    }
    rows = []
    failures = 0
    for i, name in enumerate(names):
        deviation, tolerance = runners[name](derive_seed(cfg["seed"], i))
        ok = deviation <= tolerance
        failures += 0 if ok else 1
        status = "ok" if ok else "FAIL"
        print(f"  {status} {name} max_dev={deviation:.3e} tol={tolerance:.1e}")
        rows.append([name, repr(deviation), repr(tolerance), status])
    if args.out is not None:
        os.makedirs(args.out, exist_ok=True)
        _write_csv(os.path.join(args.out, "oracle_check.csv"),
                   ["suite", "max_deviation", "tolerance", "status"], rows)
    print(f"oracle-check: {len(rows)} suites, {failures} failed")
    return 1 if failures else 0


# ---------------------------------------------------------------------------
# erf
# ---------------------------------------------------------------------------


def cmd_erf(cfg: dict, args) -> int:
    out = _require_out(args, "erf")
    h, w, c = cfg["height"], cfg["width"], cfg["channels"]
    if cfg["trials"] < 1:
        raise CliError("erf: trials must be >= 1")
    if not cfg["samples"]:
        raise CliError("erf: empty samples list")
    seed = cfg["seed"]
    k = cfg["kernel_size"]

    runs = []
    std = 1.0 / np.sqrt(c * k * k)
    conv_w = np.asarray(gaussian_fill((c, c, k, k), derive_seed(seed, 10),
                                      std=std)).copy()
    conv = Stack([Conv2dStage(conv_w, np.zeros(c, dtype=np.float32))])
    runs.append((f"conv{k}x{k}", 0, conv, "erf_conv.pgm"))
    for s in cfg["samples"]:
        config = LsDfnConfig(channels=c, out_channels=cfg["out_channels"],
                             kernel_size=k, samples=s,
                             sample_stride=cfg["sample_stride"])
        params = init_params(config, derive_seed(seed, 20 + s), scheme="gaussian")
        runs.append((f"lsdfn_s{s}", s, Stack([LsDfnStage(params, config)]),
                     f"erf_s{s}.pgm"))

    rows = []
    for label, s, model, fname in runs:
        erf = compute_erf(model, (1, c, h, w), trials=cfg["trials"],
                          seed=derive_seed(seed, 30 + s))
        m = erf_metrics(erf, cfg["tau"])
        footprint = stack_footprint(model)
        with open(os.path.join(out, fname), "wb") as f:
            f.write(erf_to_image(erf))
        print(f"  {label}: extent={m.extent_y}x{m.extent_x} "
              f"area={m.support_area} radius={m.equivalent_radius:.2f} "
              f"footprint={footprint}")
        rows.append([label, s, cfg["sample_stride"] if s else 0, k, footprint,
                     m.support_area, m.extent_y, m.extent_x,
                     repr(m.equivalent_radius), repr(m.threshold),
                     "true" if m.degenerate else "false"])
    _write_csv(os.path.join(out, "erf_metrics.csv"),
               ["stack", "samples", "sample_stride", "kernel_size", "footprint",
                "support_area", "extent_y", "extent_x", "equivalent_radius",
                "threshold", "degenerate"],
               rows, comments=_config_lines("erf", cfg))
    print(f"erf: wrote {len(runs)} maps to {out}")
    return 0


# ---------------------------------------------------------------------------
# train / infer
# ---------------------------------------------------------------------------

_DATASET_FILE = "dataset.txt"


def _train_model_spec(cfg: dict) -> flow.ModelSpec:
    block = LsDfnConfig(channels=cfg["feature_channels"],
                        out_channels=cfg["block_out_channels"],
                        kernel_size=cfg["block_kernel_size"],
                        samples=cfg["block_samples"],
                        sample_stride=cfg["block_sample_stride"],
                        fusion_mode=cfg["block_fusion_mode"],
                        kernel_mode=cfg["block_kernel_mode"])
    return flow.ModelSpec(kind=cfg["model"],
                          feature_channels=cfg["feature_channels"], block=block)


def _write_flow_outputs(out: str, preds: np.ndarray, dataset, viz_count: int,
                        max_displacement: int) -> None:
    write_tensor(os.path.join(out, "predictions.lsdt"),
                 preds.astype(np.float32, copy=False))
    mag = float(max(1, max_displacement))
    for i in range(min(viz_count, len(dataset))):
        write_ppm(os.path.join(out, f"flow_gt_{i:03d}.ppm"),
                  flow_to_rgb(dataset[i].flow, mag))
        write_ppm(os.path.join(out, f"flow_pred_{i:03d}.ppm"),
                  flow_to_rgb(preds[i], mag))


def cmd_train(cfg: dict, args) -> int:
    out = _require_out(args, "train")
    spec = _train_model_spec(cfg)
    report = flow.parameter_report(spec)
    print(f"  params: lsdfn={report['lsdfn_params']} "
          f"baseline={report['baseline_params']} "
          f"(width {report['baseline_width']}, "
          f"gap {report['relative_gap']:.2%})")

    dataset_seed = derive_seed(cfg["seed"], 100)
    init_seed = derive_seed(cfg["seed"], 200)
    dataset = flow.gen_flow_dataset(
        cfg["samples"], cfg["height"], cfg["width"],
        objects_per_image=cfg["objects"],
        max_displacement=cfg["max_displacement"], seed=dataset_seed,
        opposing_motion=cfg["opposing"])
    model = flow.build_model(spec, init_seed)
    train_cfg = flow.TrainConfig(
        iterations=cfg["iterations"], batch_size=cfg["batch_size"],
        learning_rate=cfg["learning_rate"], momentum=cfg["momentum"],
        seed=cfg["seed"], log_interval=cfg["log_interval"], model_spec=spec)

    try:
        rows = flow.train(model, dataset, train_cfg)
    except (RuntimeError, FloatingPointError) as e:
        print(f"train: diverged: {e}", file=sys.stderr)
        return 1
    for r in rows:
        print(f"  iter={r.iteration} loss={r.loss:.4f} aepe={r.aepe:.4f} "
              f"wall_ms={r.wall_ms:.1f}")
    final = rows[-1]
    print(f"train: final aepe={format_value(final.aepe)} over {len(dataset)} samples")

    _write_csv(os.path.join(out, "metrics.csv"),
               ["iteration", "loss", "aepe", "wall_ms"],
               [[r.iteration, repr(r.loss), repr(r.aepe), f"{r.wall_ms:.3f}"]
                for r in rows],
               comments=_config_lines("train", cfg) + [
                   "aepe: batch endpoint error at each logged iteration, "
                   "unsmoothed; the final row is the full-dataset value "
                   "under the final parameters"])
    ckpt = os.path.join(out, "checkpoint")
    flow.save_model(ckpt, model, spec)
    write_kv(os.path.join(ckpt, _DATASET_FILE), {
        "samples": cfg["samples"], "height": cfg["height"],
        "width": cfg["width"], "objects": cfg["objects"],
        "max_displacement": cfg["max_displacement"],
        "opposing": cfg["opposing"], "dataset_seed": dataset_seed,
        "batch_size": cfg["batch_size"], "final_aepe": float(final.aepe),
    })
    x, _ = flow.dataset_arrays(dataset)
    preds = flow.predict_all(model, x, cfg["batch_size"])
    _write_flow_outputs(out, preds, dataset, cfg["viz_count"],
                        cfg["max_displacement"])
    print(f"train: wrote metrics.csv, checkpoint/, predictions.lsdt to {out}")
    return 0


def cmd_infer(cfg: dict, args) -> int:
    if not cfg["checkpoint"]:
        raise CliError("infer: checkpoint is required (--set checkpoint=DIR)")
    try:
        model, spec = flow.load_model(cfg["checkpoint"])
    except FileNotFoundError as e:
        raise CliError(f"infer: {e}")
    if cfg["model"] != "any" and spec.kind != cfg["model"]:
        raise CliError(f"infer: checkpoint holds a {spec.kind} model, "
                       f"expected {cfg['model']}")
    meta_path = os.path.join(cfg["checkpoint"], _DATASET_FILE)
    if not os.path.isfile(meta_path):
        raise CliError(f"infer: checkpoint has no dataset description: {meta_path}")
    meta = read_kv(meta_path)
    dataset = flow.gen_flow_dataset(
        int(meta["samples"]), int(meta["height"]), int(meta["width"]),
        objects_per_image=int(meta["objects"]),
        max_displacement=int(meta["max_displacement"]),
        seed=int(meta["dataset_seed"]),
        opposing_motion=parse_bool(meta["opposing"]))
    x, t = flow.dataset_arrays(dataset)
    preds = flow.predict_all(model, x, int(meta["batch_size"]))
    value = flow.aepe_batch(preds, t)
    stored = float(meta["final_aepe"])
    match = value == stored
    print(f"infer: aepe={format_value(value)} stored={format_value(stored)} "
          f"match={'true' if match else 'false'}")
    if args.out is not None:
        os.makedirs(args.out, exist_ok=True)
        _write_flow_outputs(args.out, preds, dataset, cfg["viz_count"],
                            int(meta["max_displacement"]))
        print(f"infer: wrote predictions.lsdt to {args.out}")
    if not match:
        print("infer: recomputed aepe differs from the stored training value",
              file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------


def cmd_bench(cfg: dict, args) -> int:
    if cfg["repetitions"] < 1:
        raise CliError("bench: repetitions must be >= 1")
    if cfg["repetitions"] == 1:
        print("bench: repetitions=1 gives unaveraged, noisy timings",
              file=sys.stderr)
    config = LsDfnConfig(channels=cfg["channels"],
                         out_channels=cfg["out_channels"],
                         kernel_size=cfg["kernel_size"],
                         samples=cfg["samples"],
                         sample_stride=cfg["sample_stride"],
                         fusion_mode="attention" if cfg["attention"] else "mean")
    f, field, attn = _block_inputs(config, cfg["seed"], n=cfg["batch"],
                                   h=cfg["height"], w=cfg["width"])
    kernels = assemble_kernel(field, config)

    def timed(fn) -> float:
        times = []
        for _ in range(cfg["repetitions"]):
            t0 = time.perf_counter()
            fn()
            times.append((time.perf_counter() - t0) * 1e3)
        return statistics.median(times)

    if attn is not None:
        fast_ms = timed(lambda: attended_sample_conv(f, field, attn, config))
    else:
        fast_ms = timed(lambda: sample_conv(f, field, config))
    ref_ms = timed(lambda: sampled_conv_reference(f, kernels, config, attn))

    n, c = cfg["batch"], cfg["channels"]
    co, k, s = cfg["out_channels"], cfg["kernel_size"], cfg["samples"]
    hw = cfg["height"] * cfg["width"]
    flops_reference = 2 * n * s * s * co * hw * c * k * k
    flops_factored = 2 * n * s * s * co * hw * (k * k + c + 1)
    arith_ratio = (c * k * k) / (c + k * k)

    fast_ms = max(fast_ms, 1e-6)
    ref_ms = max(ref_ms, 1e-6)
    rows = [
        ["factored", f"{fast_ms:.3f}", flops_factored,
         repr(flops_factored / (fast_ms * 1e-3) / 1e9)],
        ["reference", f"{ref_ms:.3f}", flops_reference,
         repr(flops_reference / (ref_ms * 1e-3) / 1e9)],
    ]
    for route, ms, fl, _ in rows:
        print(f"  {route}: median={ms} ms flops={fl}")
    print(f"bench: arithmetic ratio {arith_ratio:.2f}, "
          f"measured speedup {ref_ms / fast_ms:.2f}")
    if args.out is not None:
        os.makedirs(args.out, exist_ok=True)
        _write_csv(os.path.join(args.out, "bench.csv"),
                   ["route", "median_ms", "flop_count", "gflops_per_sec"],
                   rows, comments=_config_lines("bench", cfg) + [
                       f"arith_ratio={arith_ratio!r}"])
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

_COMMANDS = {
    "gradcheck": cmd_gradcheck,
    "oracle-check": cmd_oracle_check,
    "erf": cmd_erf,
    "train": cmd_train,
    "infer": cmd_infer,
    "bench": cmd_bench,
}

_HELP = {
    "gradcheck": "verify analytical gradients against finite differences",
    "oracle-check": "verify the fast paths against materialized references",
    "erf": "measure effective receptive fields and dependency footprints",
    "train": "train a synthetic-flow model and write a checkpoint",
    "infer": "re-run a checkpoint over its training set and verify the aepe",
    "bench": "time factored vs materialized filtering",
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="lsdfn",
        description="Sampled dynamic filtering: verification, measurement, "
                    "and a synthetic-flow training harness.",
        epilog="exit codes: 0 success, 1 failed check or diverged run, "
               "2 usage or config error")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name in _COMMANDS:
        p = sub.add_parser(name, help=_HELP[name])
        p.add_argument("--config", metavar="PATH",
                       help="key=value config file; defaults apply if omitted")
        p.add_argument("--out", metavar="DIR", help="output directory")
        p.add_argument("--seed", type=int, metavar="N",
                       help="override the seed config key")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override one config key")
    args = parser.parse_args(argv)
    try:
        cfg = _resolve_config(args.command, args)
        _echo_config(args.command, cfg)
        return _COMMANDS[args.command](cfg, args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (ValueError, OSError, TensorFileError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
