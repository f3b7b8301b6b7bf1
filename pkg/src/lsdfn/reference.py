"""Canonical-order reference implementations.

These paths materialize the full per-position kernels and accumulate with a
fixed loop order (input channel innermost, then kernel offsets row-major,
then samples row-major), making them bitwise reproducible and independent of
the factored fast paths in layer.py. They exist to be slow and obviously
correct; every equivalence check in the test suite and the oracle-check
subcommand runs against them.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .tensor import as_array, _conv2d
from .layer import (LsDfnConfig, KernelField, AttentionField, SampledFeatures,
                    assemble_kernel, split_kernel_params, build_attention,
                    fuse_samples, LsDfnParams)


def _span(offset: int, extent: int):
    return max(0, -offset), min(extent, extent - offset)


def sampled_conv_reference(features, kernels: np.ndarray, config: LsDfnConfig,
                           attn: Optional[AttentionField] = None) -> SampledFeatures:
    """Materialized-kernel sampled dynamic filtering.

    Args:
        features: (N, C, H, W).
        kernels: (N, C_out, C, k, k, H, W) from assemble_kernel, indexed at
            the output position.
        config: block config.
        attn: optional split attention; position weights are read at the
            sampled center, sample weights at the output position.

    Returns:
        SampledFeatures (N, s^2, C_out, H, W); samples whose center leaves
        the frame are identically zero.
    """
    f = as_array(features, rank=4, name="features")
    n, c, h, w = f.shape
    k, s, stride = config.kernel_size, config.samples, config.sample_stride
    co = config.out_channels
    ctr = k // 2
    half = s // 2
    reach = half * stride + ctr
    dtype = f.dtype

    fpad = np.pad(f, ((0, 0), (0, 0), (reach, reach), (reach, reach)))
    appad = None
    if attn is not None:
        cpad = half * stride
        appad = np.pad(attn.position, ((0, 0),) * 4 + ((cpad, cpad), (cpad, cpad)))

    out = np.zeros((n, s * s, co, h, w), dtype=dtype)
    for b in range(s):
        for a in range(s):
            dy = (b - half) * stride
            dx = (a - half) * stride
            acc = np.zeros((n, co, h, w), dtype=dtype)
            for j in range(k):
                for i in range(k):
                    fsl = fpad[:, :, reach + dy + j - ctr:reach + dy + j - ctr + h,
                               reach + dx + i - ctr:reach + dx + i - ctr + w]
                    if attn is not None:
                        ap = appad[:, :, j, i, cpad + dy:cpad + dy + h,
                                   cpad + dx:cpad + dx + w]
                    for u in range(c):
                        t = kernels[:, :, u, j, i] * fsl[:, u][:, None]
                        if attn is not None:
                            t = t * ap
                        acc += t
            if attn is not None:
                acc = acc * attn.sample[:, :, b, a]
            ylo, yhi = _span(dy, h)
            xlo, xhi = _span(dx, w)
            kept = np.zeros_like(acc)
            if ylo < yhi and xlo < xhi:
                kept[:, :, ylo:yhi, xlo:xhi] = acc[:, :, ylo:yhi, xlo:xhi]
            out[:, b * s + a] = kept
    return SampledFeatures(data=out)


def full_attention_reference(features, field: KernelField, a_full,
                             config: LsDfnConfig) -> SampledFeatures:
    """Unfactored attention oracle: one weight per sample per kernel offset.

    Args:
        features: (N, C, H, W).
        field: kernel parameters (materialized internally).
        a_full: (N, C_out, s, s, k, k, H, W) attention, indexed at the
            sampled center like the split position weights.
        config: block config.
    """
    f = as_array(features, rank=4, name="features")
    a = np.asarray(a_full)
    n, c, h, w = f.shape
    k, s, stride = config.kernel_size, config.samples, config.sample_stride
    co = config.out_channels
    if a.shape != (n, co, s, s, k, k, h, w):
        raise ValueError(f"a_full shape {a.shape} != {(n, co, s, s, k, k, h, w)}")
    ctr = k // 2
    half = s // 2
    reach = half * stride + ctr
    cpad = half * stride
    dtype = f.dtype
    kernels = assemble_kernel(field, config)

    fpad = np.pad(f, ((0, 0), (0, 0), (reach, reach), (reach, reach)))
    apad = np.pad(a, ((0, 0),) * 6 + ((cpad, cpad), (cpad, cpad)))

    out = np.zeros((n, s * s, co, h, w), dtype=dtype)
    for b in range(s):
        for a_i in range(s):
            dy = (b - half) * stride
            dx = (a_i - half) * stride
            acc = np.zeros((n, co, h, w), dtype=dtype)
            for j in range(k):
                for i in range(k):
                    fsl = fpad[:, :, reach + dy + j - ctr:reach + dy + j - ctr + h,
                               reach + dx + i - ctr:reach + dx + i - ctr + w]
                    asl = apad[:, :, b, a_i, j, i,
                               cpad + dy:cpad + dy + h, cpad + dx:cpad + dx + w]
                    for u in range(c):
                        acc += kernels[:, :, u, j, i] * fsl[:, u][:, None] * asl
            ylo, yhi = _span(dy, h)
            xlo, xhi = _span(dx, w)
            kept = np.zeros_like(acc)
            if ylo < yhi and xlo < xhi:
                kept[:, :, ylo:yhi, xlo:xhi] = acc[:, :, ylo:yhi, xlo:xhi]
            out[:, b * s + a_i] = kept
    return SampledFeatures(data=out)


def outer_attention(attn: AttentionField, config: LsDfnConfig) -> np.ndarray:
    """Rank-1 full-attention field equivalent to a split pair.

    The split path reads sample weights at the output position (y, x) and
    position weights at the center (y + dy, x + dx); the full field is read
    at the center only. Equivalence therefore needs the sample weights
    shifted onto center coordinates:
        A[beta, alpha, j, i, yc, xc] =
            A_sam[beta, alpha, yc - dy, xc - dx] * A_pos[j, i, yc, xc]
    with zeros where (yc - dy, xc - dx) leaves the frame (those entries
    belong to no output position).
    """
    a_sam, a_pos = attn.sample, attn.position
    n, co, s, _, h, w = a_sam.shape
    k = config.kernel_size
    stride = config.sample_stride
    half = s // 2
    cpad = half * stride
    sp = np.pad(a_sam, ((0, 0),) * 4 + ((cpad, cpad), (cpad, cpad)))
    full = np.zeros((n, co, s, s, k, k, h, w), dtype=a_sam.dtype)
    for b in range(s):
        for a in range(s):
            dy = (b - half) * stride
            dx = (a - half) * stride
            shifted = sp[:, :, b, a, cpad - dy:cpad - dy + h, cpad - dx:cpad - dx + w]
            full[:, :, b, a] = shifted[:, :, None, None] * a_pos
    return full


def dfn_reference(features, kernels: np.ndarray) -> np.ndarray:
    """Per-position dynamic convolution, no sampling machinery.

    Each output position applies its own (C_out, C, k, k) kernel to the
    zero-padded window around itself. Written independently of the sampled
    paths; the s=1 neutral-attention block must match this bitwise.

    Args:
        features: (N, C, H, W).
        kernels: (N, C_out, C, k, k, H, W).

    Returns:
        (N, C_out, H, W) ndarray.
    """
    f = as_array(features, rank=4, name="features")
    n, c, h, w = f.shape
    if kernels.ndim != 7 or kernels.shape[0] != n or kernels.shape[2] != c \
            or kernels.shape[5:] != (h, w):
        raise ValueError(f"kernels shape {kernels.shape} inconsistent with features {f.shape}")
    k = kernels.shape[3]
    if kernels.shape[4] != k or k % 2 == 0:
        raise ValueError(f"kernels must be square and odd, got {kernels.shape[3:5]}")
    ctr = k // 2
    fpad = np.pad(f, ((0, 0), (0, 0), (ctr, ctr), (ctr, ctr)))
    out = np.zeros((n, kernels.shape[1], h, w), dtype=f.dtype)
    for j in range(k):
        for i in range(k):
            fsl = fpad[:, :, j:j + h, i:i + w]
            for u in range(c):
                out += kernels[:, :, u, j, i] * fsl[:, u][:, None]
    return out


def lsdfn_forward_reference(x, params: LsDfnParams, config: LsDfnConfig) -> np.ndarray:
    """Full block forward on the reference path (materialized kernels).

    Same branch convolutions and fusion as lsdfn_forward, but the dynamic
    filtering runs through sampled_conv_reference. Used by the oracle-check
    and bench subcommands.
    """
    xa = as_array(x, rank=4, name="x")
    params.check(config)
    bpad = config.branch_kernel_size // 2
    f = _conv2d(xa, params.feature_weight.astype(xa.dtype, copy=False),
                params.feature_bias.astype(xa.dtype, copy=False), bpad)
    raw_k = _conv2d(xa, params.kernel_weight.astype(xa.dtype, copy=False),
                    params.kernel_bias.astype(xa.dtype, copy=False), bpad)
    field = split_kernel_params(raw_k, config)
    kernels = assemble_kernel(field, config)
    attn = None
    if config.fusion_mode == "attention":
        raw_s = _conv2d(xa, params.attention_sample_weight.astype(xa.dtype, copy=False),
                        params.attention_sample_bias.astype(xa.dtype, copy=False), bpad)
        raw_p = _conv2d(xa, params.attention_position_weight.astype(xa.dtype, copy=False),
                        params.attention_position_bias.astype(xa.dtype, copy=False), bpad)
        attn = build_attention(raw_s, raw_p, config)
    stack = sampled_conv_reference(f, kernels, config, attn)
    fused = fuse_samples(stack, config)
    if config.post_conv_channels is not None:
        return _conv2d(fused, params.post_weight.astype(xa.dtype, copy=False),
                       params.post_bias.astype(xa.dtype, copy=False), 0)
    return fused
