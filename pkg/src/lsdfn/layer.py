"""Large-sampling-field dynamic filtering layer.

A block with three convolutional branches over the same input: a feature
branch producing the map to be filtered, a kernel branch producing factored
per-position kernel parameters (a channel-mixing part U and a spatial part
V), and an attention branch producing per-position fusion weights over the
s x s sample grid and the k x k kernel offsets. Every output position applies
its own kernel at s*s strided sample centers; the attended samples are summed
into the output.

Two kernel layouts are supported. "fig4" (default) duplicates the spatial
part V across input channels and places U plus the 1/C residual at the kernel
center. "eq6_literal" places U at every offset and adds V plus the residual
only at the center. Both admit a factored fast path that never materializes
the full (C_out, C, k, k) per-position kernels; `assemble_kernel` builds them
explicitly for the reference path.

Out-of-bounds sample centers contribute exactly zero in every path: a sample
whose shifted center leaves the frame is dropped whole, while in-bounds
centers read their k x k window with ordinary zero padding.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields, replace
from typing import Optional

import numpy as np

from .tensor import (Tensor, as_array, derive_seed, gaussian_fill,
                     read_tensor, write_tensor, _conv2d, _conv2d_backward)
from .textkv import read_kv, write_kv, parse_bool

FUSION_MODES = ("attention", "max_pool", "mean")
KERNEL_MODES = ("fig4", "eq6_literal")
INIT_SCHEMES = ("residual", "gaussian")


@dataclass(frozen=True)
class LsDfnConfig:
    """Static shape/behavior description of one block.

    Attributes:
        channels: feature channels C consumed by the dynamic filtering.
        out_channels: dynamically filtered output channels C_out.
        kernel_size: per-position kernel extent k, odd.
        samples: sample-grid extent s per axis, odd; s=1 disables sampling.
        sample_stride: spacing in pixels between sample centers.
        fusion_mode: "attention" (attended sum), "max_pool" (per-channel max
            over samples, no attention branch), or "mean" (diagnostic).
        kernel_mode: "fig4" or "eq6_literal", see module docstring.
        residual_kernel: add 1/C at the kernel center so an untrained block
            averages feature channels.
        residual_attention: add 1 to every attention weight.
        post_conv_channels: optional width of a trailing 1x1 conv.
        branch_kernel_size: kernel extent of the three branch convs, odd.
    """

    channels: int
    out_channels: int
    kernel_size: int = 3
    samples: int = 3
    sample_stride: int = 1
    fusion_mode: str = "attention"
    kernel_mode: str = "fig4"
    residual_kernel: bool = True
    residual_attention: bool = True
    post_conv_channels: Optional[int] = None
    branch_kernel_size: int = 3

    def __post_init__(self):
        if self.channels < 1 or self.out_channels < 1:
            raise ValueError("channels and out_channels must be >= 1")
        for name in ("kernel_size", "samples", "branch_kernel_size"):
            v = getattr(self, name)
            if v < 1 or v % 2 == 0:
                raise ValueError(f"{name} must be odd and >= 1, got {v}")
        if self.sample_stride < 1:
            raise ValueError(f"sample_stride must be >= 1, got {self.sample_stride}")
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        if self.kernel_mode not in KERNEL_MODES:
            raise ValueError(f"kernel_mode must be one of {KERNEL_MODES}, got {self.kernel_mode!r}")
        if self.post_conv_channels is not None and self.post_conv_channels < 1:
            raise ValueError("post_conv_channels must be >= 1 or None")

    @property
    def kernel_branch_channels(self) -> int:
        """C_out*(C + k^2): channel-mix plus spatial kernel parameters."""
        return self.out_channels * (self.channels + self.kernel_size ** 2)

    @property
    def attention_sample_channels(self) -> int:
        return self.out_channels * self.samples ** 2

    @property
    def attention_position_channels(self) -> int:
        return self.out_channels * self.kernel_size ** 2

    @property
    def grid_span(self) -> int:
        """Extent of the sampling stage footprint: (s-1)*stride + k."""
        return (self.samples - 1) * self.sample_stride + self.kernel_size


def sample_offsets(config: LsDfnConfig):
    """Centered (dy, dx) offsets of the sample grid, row-major over (beta, alpha)."""
    s, g = config.samples, config.sample_stride
    half = s // 2
    return [((b - half) * g, (a - half) * g) for b in range(s) for a in range(s)]


@dataclass
class KernelField:
    """Per-position factored kernel parameters.

    channel_mix: (N, C_out, C, H, W) — the U part, one weight per input
        channel, applied at the kernel center.
    spatial: (N, C_out, k, k, H, W) — the V part, one weight per kernel
        offset, shared across input channels in fig4 mode.
    """

    channel_mix: np.ndarray
    spatial: np.ndarray


@dataclass
class AttentionField:
    """Per-position fusion weights.

    sample: (N, C_out, s, s, H, W), read at the output position.
    position: (N, C_out, k, k, H, W), read at each sampled center.
    residual_applied: True when the +1 shift is already folded in.
    """

    sample: np.ndarray
    position: np.ndarray
    residual_applied: bool = False


@dataclass
class SampledFeatures:
    """Stack of per-sample filtered maps, (N, s*s, C_out, H, W).

    The sample axis is row-major over (beta, alpha), matching
    sample_offsets. Entries of out-of-bounds sample centers are zero.
    """

    data: np.ndarray


@dataclass
class LsDfnParams:
    """Learnable tensors of one block. Attention and post fields are None
    when the config does not use them."""

    feature_weight: np.ndarray
    feature_bias: np.ndarray
    kernel_weight: np.ndarray
    kernel_bias: np.ndarray
    attention_sample_weight: Optional[np.ndarray] = None
    attention_sample_bias: Optional[np.ndarray] = None
    attention_position_weight: Optional[np.ndarray] = None
    attention_position_bias: Optional[np.ndarray] = None
    post_weight: Optional[np.ndarray] = None
    post_bias: Optional[np.ndarray] = None

    def check(self, config: LsDfnConfig) -> None:
        """Assert every branch's channel counts against the config laws."""
        c, kb = config.channels, config.branch_kernel_size
        def expect(arr, shape, name):
            if arr is None:
                raise ValueError(f"missing parameter {name}")
            if tuple(arr.shape) != shape:
                raise ValueError(f"{name}: shape {arr.shape} != expected {shape}")
        expect(self.feature_weight, (c, c, kb, kb), "feature_weight")
        expect(self.feature_bias, (c,), "feature_bias")
        expect(self.kernel_weight, (config.kernel_branch_channels, c, kb, kb), "kernel_weight")
        expect(self.kernel_bias, (config.kernel_branch_channels,), "kernel_bias")
        if config.fusion_mode == "attention":
            expect(self.attention_sample_weight,
                   (config.attention_sample_channels, c, kb, kb), "attention_sample_weight")
            expect(self.attention_sample_bias,
                   (config.attention_sample_channels,), "attention_sample_bias")
            expect(self.attention_position_weight,
                   (config.attention_position_channels, c, kb, kb), "attention_position_weight")
            expect(self.attention_position_bias,
                   (config.attention_position_channels,), "attention_position_bias")
        if config.post_conv_channels is not None:
            expect(self.post_weight,
                   (config.post_conv_channels, config.out_channels, 1, 1), "post_weight")
            expect(self.post_bias, (config.post_conv_channels,), "post_bias")

    def named(self) -> dict:
        """Present parameters as {field_name: array}, skipping None."""
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if v is not None:
                out[f.name] = v
        return out


@dataclass
class LsDfnGrads:
    """Gradients mirroring LsDfnParams, plus the block input."""

    x: np.ndarray
    feature_weight: np.ndarray
    feature_bias: np.ndarray
    kernel_weight: np.ndarray
    kernel_bias: np.ndarray
    attention_sample_weight: Optional[np.ndarray] = None
    attention_sample_bias: Optional[np.ndarray] = None
    attention_position_weight: Optional[np.ndarray] = None
    attention_position_bias: Optional[np.ndarray] = None
    post_weight: Optional[np.ndarray] = None
    post_bias: Optional[np.ndarray] = None

    def named(self) -> dict:
        out = {}
        for f in fields(self):
            if f.name == "x":
                continue
            v = getattr(self, f.name)
            if v is not None:
                out[f.name] = v
        return out


# ---------------------------------------------------------------------------
# Kernel-field layout and assembly.
# ---------------------------------------------------------------------------


def split_kernel_params(raw, config: LsDfnConfig) -> KernelField:
    """Split the kernel branch output into U and V views.

    Channel layout: the first C_out*C channels are U, index v*C + u; the
    remaining C_out*k^2 are V, index C_out*C + v*k^2 + j*k + i.

    Args:
        raw: (N, C_out*(C + k^2), H, W) kernel-branch output.
        config: block config supplying C, C_out, k.
    """
    arr = as_array(raw, rank=4, name="kernel branch output")
    c, co, k = config.channels, config.out_channels, config.kernel_size
    if arr.shape[1] != config.kernel_branch_channels:
        raise ValueError(f"kernel branch has {arr.shape[1]} channels, "
                         f"expected C_out*(C+k^2) = {config.kernel_branch_channels}")
    n, _, h, w = arr.shape
    u = arr[:, :co * c].reshape(n, co, c, h, w)
    v = arr[:, co * c:].reshape(n, co, k, k, h, w)
    return KernelField(channel_mix=u, spatial=v)


def interleave_kernel_params(field: KernelField, config: LsDfnConfig) -> np.ndarray:
    """Inverse of split_kernel_params (also used to route gradients)."""
    u, v = field.channel_mix, field.spatial
    n, co, c, h, w = u.shape
    k = config.kernel_size
    return np.concatenate([u.reshape(n, co * c, h, w),
                           v.reshape(n, co * k * k, h, w)], axis=1)


def assemble_kernel(field: KernelField, config: LsDfnConfig) -> np.ndarray:
    """Materialize full per-position kernels, reference path only.

    fig4 mode: W[v,u,j,i] = V[v,j,i] + (U[v,u] + r) at the center offset.
    eq6_literal: W[v,u,j,i] = U[v,u] + (V[v,j,i] + r) at the center offset.
    r = 1/C when residual_kernel is set, else 0.

    Returns:
        (N, C_out, C, k, k, H, W) ndarray. Rank 7, so this is plain array
        currency rather than a Tensor.
    """
    u, v = field.channel_mix, field.spatial
    n, co, c, h, w = u.shape
    k = config.kernel_size
    ctr = k // 2
    r = 1.0 / c if config.residual_kernel else 0.0
    if config.kernel_mode == "fig4":
        full = np.broadcast_to(v[:, :, None], (n, co, c, k, k, h, w)).copy()
        full[:, :, :, ctr, ctr] += u + r
    else:
        full = np.broadcast_to(u[:, :, :, None, None], (n, co, c, k, k, h, w)).copy()
        full[:, :, :, ctr, ctr] += v[:, :, None, ctr, ctr] + r
    return full.astype(u.dtype, copy=False)


def build_attention(raw_sam, raw_pos, config: LsDfnConfig) -> AttentionField:
    """Reshape raw attention branch outputs into per-position weight fields.

    Args:
        raw_sam: (N, C_out*s^2, H, W) sample-attention branch output,
            channel index v*s^2 + beta*s + alpha.
        raw_pos: (N, C_out*k^2, H, W) position-attention branch output,
            channel index v*k^2 + j*k + i.
        config: supplies extents and the residual flag; when
            residual_attention is set, 1 is added to every weight of both
            fields.
    """
    sam = as_array(raw_sam, rank=4, name="sample attention")
    pos = as_array(raw_pos, rank=4, name="position attention")
    co, s, k = config.out_channels, config.samples, config.kernel_size
    if sam.shape[1] != config.attention_sample_channels:
        raise ValueError(f"sample attention has {sam.shape[1]} channels, "
                         f"expected C_out*s^2 = {config.attention_sample_channels}")
    if pos.shape[1] != config.attention_position_channels:
        raise ValueError(f"position attention has {pos.shape[1]} channels, "
                         f"expected C_out*k^2 = {config.attention_position_channels}")
    n, _, h, w = sam.shape
    a_sam = sam.reshape(n, co, s, s, h, w)
    a_pos = pos.reshape(n, co, k, k, h, w)
    if config.residual_attention:
        a_sam = a_sam + 1.0
        a_pos = a_pos + 1.0
    else:
        a_sam = a_sam.copy()
        a_pos = a_pos.copy()
    return AttentionField(sample=a_sam, position=a_pos,
                          residual_applied=config.residual_attention)


# ---------------------------------------------------------------------------
# Factored fast paths.
# ---------------------------------------------------------------------------


def _valid_span(offset: int, extent: int):
    # Output rows/cols whose shifted center stays inside [0, extent).
    return max(0, -offset), min(extent, extent - offset)


def _zero_outside(arr: np.ndarray, dy: int, dx: int) -> None:
    # In place: zero entries whose sample center (y+dy, x+dx) left the frame.
    h, w = arr.shape[-2:]
    ylo, yhi = _valid_span(dy, h)
    xlo, xhi = _valid_span(dx, w)
    if ylo >= yhi or xlo >= xhi:
        arr[...] = 0
        return
    arr[..., :ylo, :] = 0
    arr[..., yhi:, :] = 0
    arr[..., :, :xlo] = 0
    arr[..., :, xhi:] = 0


def _core_forward(f: np.ndarray, field: KernelField, config: LsDfnConfig,
                  attn: Optional[AttentionField]):
    """Factored sampled dynamic filtering.

    Never materializes per-position kernels: fig4 mode runs a spatial
    correlation of V against the channel-sum of F plus a per-position 1x1 mix
    by U at the sampled centers; eq6_literal mode runs the U mix at every
    kernel offset plus the center V tap.

    Returns (out, pre) with out (N, s^2, C_out, H, W); pre is the stack
    before sample-attention scaling (None when attn is None), kept for the
    backward pass.
    """
    n, c, h, w = f.shape
    k, s, g = config.kernel_size, config.samples, config.sample_stride
    co = config.out_channels
    ctr = k // 2
    cpad = (s // 2) * g
    reach = cpad + ctr
    dtype = f.dtype
    u, v = field.channel_mix, field.spatial
    r = 1.0 / c if config.residual_kernel else 0.0

    s_sum = f.sum(axis=1)
    sp = np.pad(s_sum, ((0, 0), (reach, reach), (reach, reach)))
    if config.kernel_mode == "fig4":
        fp = np.pad(f, ((0, 0), (0, 0), (cpad, cpad), (cpad, cpad)))
    else:
        fp = np.pad(f, ((0, 0), (0, 0), (reach, reach), (reach, reach)))
    app = None
    if attn is not None:
        app = np.pad(attn.position, ((0, 0),) * 4 + ((cpad, cpad), (cpad, cpad)))

    out = np.zeros((n, s * s, co, h, w), dtype=dtype)
    pre_stack = np.zeros_like(out) if attn is not None else None

    for m, (dy, dx) in enumerate(sample_offsets(config)):
        apc = None
        if attn is not None:
            apc = app[:, :, :, :, cpad + dy:cpad + dy + h, cpad + dx:cpad + dx + w]
        sc = sp[:, reach + dy:reach + dy + h, reach + dx:reach + dx + w]
        acc = np.zeros((n, co, h, w), dtype=dtype)
        if config.kernel_mode == "fig4":
            fc = fp[:, :, cpad + dy:cpad + dy + h, cpad + dx:cpad + dx + w]
            for j in range(k):
                for i in range(k):
                    sw = sp[:, reach + dy + j - ctr:reach + dy + j - ctr + h,
                            reach + dx + i - ctr:reach + dx + i - ctr + w]
                    t = v[:, :, j, i] * sw[:, None]
                    if apc is not None:
                        t = t * apc[:, :, j, i]
                    acc += t
            mix = np.einsum('nvuyx,nuyx->nvyx', u, fc, optimize=True)
            if config.residual_kernel:
                mix = mix + r * sc[:, None]
            if apc is not None:
                mix = mix * apc[:, :, ctr, ctr]
            pre = acc + mix
        else:
            for j in range(k):
                for i in range(k):
                    fw = fp[:, :, reach + dy + j - ctr:reach + dy + j - ctr + h,
                            reach + dx + i - ctr:reach + dx + i - ctr + w]
                    t = np.einsum('nvuyx,nuyx->nvyx', u, fw, optimize=True)
                    if apc is not None:
                        t = t * apc[:, :, j, i]
                    acc += t
            center = (v[:, :, ctr, ctr] + r) * sc[:, None]
            if apc is not None:
                center = center * apc[:, :, ctr, ctr]
            pre = acc + center
        _zero_outside(pre, dy, dx)
        if attn is not None:
            pre_stack[:, m] = pre
            out[:, m] = pre * attn.sample[:, :, m // s, m % s]
        else:
            out[:, m] = pre
    return out, pre_stack


def _core_backward(grad: np.ndarray, f: np.ndarray, field: KernelField,
                   config: LsDfnConfig, attn: Optional[AttentionField],
                   pre_stack: Optional[np.ndarray]):
    """Adjoints of _core_forward.

    Returns (grad_f, grad_u, grad_v, grad_a_sam, grad_a_pos); the attention
    grads are None when attn is None. Scatter accumulation runs in padded
    buffers cropped at the end, so border samples route correctly.
    """
    n, c, h, w = f.shape
    k, s, g = config.kernel_size, config.samples, config.sample_stride
    co = config.out_channels
    ctr = k // 2
    cpad = (s // 2) * g
    reach = cpad + ctr
    dtype = f.dtype
    u, v = field.channel_mix, field.spatial
    r = 1.0 / c if config.residual_kernel else 0.0
    fig4 = config.kernel_mode == "fig4"

    s_sum = f.sum(axis=1)
    sp = np.pad(s_sum, ((0, 0), (reach, reach), (reach, reach)))
    fpad = cpad if fig4 else reach
    fp = np.pad(f, ((0, 0), (0, 0), (fpad, fpad), (fpad, fpad)))
    app = None
    if attn is not None:
        app = np.pad(attn.position, ((0, 0),) * 4 + ((cpad, cpad), (cpad, cpad)))

    g_u = np.zeros_like(u)
    g_v = np.zeros_like(v)
    g_sp = np.zeros_like(sp)
    g_fp = np.zeros_like(fp)
    g_app = np.zeros_like(app) if attn is not None else None
    g_asam = np.zeros_like(attn.sample) if attn is not None else None

    for m, (dy, dx) in enumerate(sample_offsets(config)):
        gm = grad[:, m].copy()
        _zero_outside(gm, dy, dx)
        if attn is not None:
            # d out / d A_sam is the pre-attention sample (already masked).
            g_asam[:, :, m // s, m % s] = grad[:, m] * pre_stack[:, m]
            q = gm * attn.sample[:, :, m // s, m % s]
            apc = app[:, :, :, :, cpad + dy:cpad + dy + h, cpad + dx:cpad + dx + w]
            gapc = g_app[:, :, :, :, cpad + dy:cpad + dy + h, cpad + dx:cpad + dx + w]
        else:
            q = gm
            apc = gapc = None
        sc = sp[:, reach + dy:reach + dy + h, reach + dx:reach + dx + w]
        if fig4:
            fc = fp[:, :, cpad + dy:cpad + dy + h, cpad + dx:cpad + dx + w]
            for j in range(k):
                for i in range(k):
                    ys = slice(reach + dy + j - ctr, reach + dy + j - ctr + h)
                    xs = slice(reach + dx + i - ctr, reach + dx + i - ctr + w)
                    sw = sp[:, ys, xs]
                    qa = q * apc[:, :, j, i] if apc is not None else q
                    g_v[:, :, j, i] += qa * sw[:, None]
                    g_sp[:, ys, xs] += (qa * v[:, :, j, i]).sum(axis=1)
                    if gapc is not None:
                        gapc[:, :, j, i] += q * v[:, :, j, i] * sw[:, None]
            qc = q * apc[:, :, ctr, ctr] if apc is not None else q
            g_u += np.einsum('nvyx,nuyx->nvuyx', qc, fc, optimize=True)
            g_fc = np.einsum('nvuyx,nvyx->nuyx', u, qc, optimize=True)
            if config.residual_kernel:
                g_fc = g_fc + r * qc.sum(axis=1)[:, None]
            g_fp[:, :, cpad + dy:cpad + dy + h, cpad + dx:cpad + dx + w] += g_fc
            if gapc is not None:
                mix = np.einsum('nvuyx,nuyx->nvyx', u, fc, optimize=True)
                if config.residual_kernel:
                    mix = mix + r * sc[:, None]
                gapc[:, :, ctr, ctr] += q * mix
        else:
            for j in range(k):
                for i in range(k):
                    ys = slice(reach + dy + j - ctr, reach + dy + j - ctr + h)
                    xs = slice(reach + dx + i - ctr, reach + dx + i - ctr + w)
                    fw = fp[:, :, ys, xs]
                    qa = q * apc[:, :, j, i] if apc is not None else q
                    g_u += np.einsum('nvyx,nuyx->nvuyx', qa, fw, optimize=True)
                    g_fp[:, :, ys, xs] += np.einsum('nvuyx,nvyx->nuyx', u, qa, optimize=True)
                    if gapc is not None:
                        gapc[:, :, j, i] += q * np.einsum('nvuyx,nuyx->nvyx', u, fw, optimize=True)
            qc = q * apc[:, :, ctr, ctr] if apc is not None else q
            g_v[:, :, ctr, ctr] += qc * sc[:, None]
            g_sp[:, reach + dy:reach + dy + h, reach + dx:reach + dx + w] += \
                ((v[:, :, ctr, ctr] + r) * qc).sum(axis=1)
            if gapc is not None:
                gapc[:, :, ctr, ctr] += q * ((v[:, :, ctr, ctr] + r) * sc[:, None])

    grad_f = g_fp[:, :, fpad:fpad + h, fpad:fpad + w].copy() if fpad else g_fp
    grad_f = grad_f + g_sp[:, None, reach:reach + h, reach:reach + w]
    g_ap = None
    if attn is not None:
        g_ap = g_app[:, :, :, :, cpad:cpad + h, cpad:cpad + w].copy() if cpad else g_app
    return grad_f.astype(dtype, copy=False), g_u, g_v, g_asam, g_ap


def sample_conv(features, field: KernelField, config: LsDfnConfig) -> SampledFeatures:
    """Apply per-position kernels over the sample grid, no attention.

    For output position (y, x) and sample (beta, alpha) with center
    (y + (beta - s//2)*stride, x + (alpha - s//2)*stride), the entry is the
    k x k dynamic convolution of the feature map at that center using the
    kernels generated at (y, x). Samples whose center leaves the frame are
    zero; in-bounds windows read with zero padding.

    Args:
        features: (N, C, H, W) feature-branch output.
        field: per-position kernel parameters at matching extents.
        config: block config.

    Returns:
        SampledFeatures with data (N, s^2, C_out, H, W).
    """
    f = as_array(features, rank=4, name="features")
    _check_field_extents(f, field, config)
    out, _ = _core_forward(f, field, config, None)
    return SampledFeatures(data=out)


def attended_sample_conv(features, field: KernelField, attn: AttentionField,
                         config: LsDfnConfig) -> SampledFeatures:
    """sample_conv with split attention folded in.

    Each sample is scaled by A_pos (read at the sampled center, per kernel
    offset, inside the sum) and by A_sam (read at the output position, per
    sample). All attention weights equal to 1 reproduces sample_conv exactly.

    Args:
        features: (N, C, H, W).
        field: per-position kernel parameters.
        attn: attention field; extents must match features and config.
        config: block config.
    """
    f = as_array(features, rank=4, name="features")
    _check_field_extents(f, field, config)
    _check_attention_extents(f, attn, config)
    out, _ = _core_forward(f, field, config, attn)
    return SampledFeatures(data=out)


def _check_field_extents(f, field, config):
    n, c, h, w = f.shape
    co, k = config.out_channels, config.kernel_size
    if c != config.channels:
        raise ValueError(f"features have {c} channels, config.channels = {config.channels}")
    if field.channel_mix.shape != (n, co, c, h, w):
        raise ValueError(f"channel_mix shape {field.channel_mix.shape} != {(n, co, c, h, w)}")
    if field.spatial.shape != (n, co, k, k, h, w):
        raise ValueError(f"spatial shape {field.spatial.shape} != {(n, co, k, k, h, w)}")


def _check_attention_extents(f, attn, config):
    n, _, h, w = f.shape
    co, s, k = config.out_channels, config.samples, config.kernel_size
    if attn.sample.shape != (n, co, s, s, h, w):
        raise ValueError(f"sample attention shape {attn.sample.shape} != {(n, co, s, s, h, w)}")
    if attn.position.shape != (n, co, k, k, h, w):
        raise ValueError(f"position attention shape {attn.position.shape} != {(n, co, k, k, h, w)}")


def fuse_samples(sampled, config: LsDfnConfig) -> np.ndarray:
    """Reduce the sample axis.

    attention mode: elementwise sum (the attended combination);
    max_pool mode: per-channel maximum over samples (ties resolve to the
    first sample index in the backward pass); mean mode: arithmetic mean
    (diagnostic, not a paper configuration).

    Args:
        sampled: SampledFeatures or (N, n_samples, C_out, H, W) array.
        config: supplies fusion_mode.

    Returns:
        (N, C_out, H, W) ndarray.
    """
    data = sampled.data if isinstance(sampled, SampledFeatures) else as_array(sampled, rank=5)
    out, _ = _fuse_forward(data, config)
    return out


def _fuse_forward(data: np.ndarray, config: LsDfnConfig):
    if config.fusion_mode == "max_pool":
        amax = np.argmax(data, axis=1)
        return np.take_along_axis(data, amax[:, None], axis=1)[:, 0], amax
    if config.fusion_mode == "mean":
        return data.mean(axis=1), None
    return data.sum(axis=1), None


def _fuse_backward(grad_fused: np.ndarray, data: np.ndarray,
                   config: LsDfnConfig, amax) -> np.ndarray:
    if config.fusion_mode == "max_pool":
        g = np.zeros_like(data)
        np.put_along_axis(g, amax[:, None], grad_fused[:, None], axis=1)
        return g
    reps = data.shape[1]
    g = np.repeat(grad_fused[:, None], reps, axis=1)
    if config.fusion_mode == "mean":
        g = g / reps
    return g


# ---------------------------------------------------------------------------
# Full block forward/backward.
# ---------------------------------------------------------------------------


@dataclass
class LsDfnSaved:
    """Forward activations kept for the backward pass."""

    x: np.ndarray
    features: np.ndarray
    field: KernelField
    attn: Optional[AttentionField]
    sampled: np.ndarray
    pre_attention: Optional[np.ndarray]
    fuse_argmax: Optional[np.ndarray]
    fused: np.ndarray
    y_shape: tuple
    params: "LsDfnParams"
    config: LsDfnConfig


def _check_finite(arr: np.ndarray, stage: str) -> None:
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"non-finite values produced by {stage}")


def lsdfn_forward(x, params: LsDfnParams, config: LsDfnConfig):
    """Run the block: branches, sampled dynamic filtering, fusion, post conv.

    Args:
        x: (N, C, H, W) block input; C must equal config.channels (all three
            branches consume the same input).
        params: branch parameters, validated against the config.
        config: block config.

    Returns:
        (y, saved): y is (N, C_out, H, W), or (N, post_conv_channels, H, W)
        when a post conv is configured; saved feeds lsdfn_backward.

    Raises:
        ValueError: on any shape violation.
        FloatingPointError: non-finite activations, with the stage named.
    """
    xa = as_array(x, rank=4, name="x")
    params.check(config)
    if xa.shape[1] != config.channels:
        raise ValueError(f"input has {xa.shape[1]} channels, config.channels = {config.channels}")
    bpad = config.branch_kernel_size // 2

    f = _conv2d(xa, params.feature_weight.astype(xa.dtype, copy=False),
                params.feature_bias.astype(xa.dtype, copy=False), bpad)
    _check_finite(f, "feature branch")
    raw_k = _conv2d(xa, params.kernel_weight.astype(xa.dtype, copy=False),
                    params.kernel_bias.astype(xa.dtype, copy=False), bpad)
    _check_finite(raw_k, "kernel branch")
    field = split_kernel_params(raw_k, config)

    attn = None
    if config.fusion_mode == "attention":
        raw_s = _conv2d(xa, params.attention_sample_weight.astype(xa.dtype, copy=False),
                        params.attention_sample_bias.astype(xa.dtype, copy=False), bpad)
        _check_finite(raw_s, "sample attention branch")
        raw_p = _conv2d(xa, params.attention_position_weight.astype(xa.dtype, copy=False),
                        params.attention_position_bias.astype(xa.dtype, copy=False), bpad)
        _check_finite(raw_p, "position attention branch")
        attn = build_attention(raw_s, raw_p, config)

    sampled, pre = _core_forward(f, field, config, attn)
    _check_finite(sampled, "sampled dynamic filtering")
    fused, amax = _fuse_forward(sampled, config)

    y = fused
    if config.post_conv_channels is not None:
        y = _conv2d(fused, params.post_weight.astype(xa.dtype, copy=False),
                    params.post_bias.astype(xa.dtype, copy=False), 0)
        _check_finite(y, "post conv")

    saved = LsDfnSaved(x=xa, features=f, field=field, attn=attn, sampled=sampled,
                       pre_attention=pre, fuse_argmax=amax, fused=fused,
                       y_shape=y.shape, params=params, config=config)
    return y, saved


def lsdfn_backward(grad_y, saved: LsDfnSaved, params: LsDfnParams,
                   config: LsDfnConfig) -> LsDfnGrads:
    """Exact adjoints of lsdfn_forward.

    The block input receives gradient through all branches that consumed it
    (feature, kernel, and both attention convs); the 1/C kernel residual and
    the +1 attention residual contribute identity paths.

    Args:
        grad_y: gradient at the block output, same shape as the forward y.
        saved: activations from the matching forward call.
        params: must be the parameter object used in that forward call.
        config: must equal the forward config.

    Raises:
        ValueError: stale or mismatched saved state (different params object,
            different config, or wrong gradient shape).
    """
    if params is not saved.params:
        raise ValueError("stale saved state: params is not the object used in forward")
    if config != saved.config:
        raise ValueError("stale saved state: config differs from the forward call")
    g = as_array(grad_y, rank=4, name="grad_y")
    if g.shape != saved.y_shape:
        raise ValueError(f"grad_y shape {g.shape} != forward output {saved.y_shape}")
    g = g.astype(saved.x.dtype, copy=False)
    bpad = config.branch_kernel_size // 2
    xa = saved.x

    post_w = post_b = None
    if config.post_conv_channels is not None:
        grad_fused, post_w, post_b = _conv2d_backward(
            g, saved.fused, params.post_weight.astype(xa.dtype, copy=False), 0)
    else:
        grad_fused = g

    grad_stack = _fuse_backward(grad_fused, saved.sampled, config, saved.fuse_argmax)
    grad_f, g_u, g_v, g_asam, g_apos = _core_backward(
        grad_stack, saved.features, saved.field, config, saved.attn, saved.pre_attention)

    graw_k = interleave_kernel_params(KernelField(g_u, g_v), config)
    gx, kern_w, kern_b = _conv2d_backward(
        graw_k, xa, params.kernel_weight.astype(xa.dtype, copy=False), bpad)
    gx2, feat_w, feat_b = _conv2d_backward(
        grad_f, xa, params.feature_weight.astype(xa.dtype, copy=False), bpad)
    gx = gx + gx2

    sam_w = sam_b = pos_w = pos_b = None
    if config.fusion_mode == "attention":
        n, co, s, _, h, w = g_asam.shape
        k = config.kernel_size
        gx3, sam_w, sam_b = _conv2d_backward(
            g_asam.reshape(n, co * s * s, h, w), xa,
            params.attention_sample_weight.astype(xa.dtype, copy=False), bpad)
        gx4, pos_w, pos_b = _conv2d_backward(
            g_apos.reshape(n, co * k * k, h, w), xa,
            params.attention_position_weight.astype(xa.dtype, copy=False), bpad)
        gx = gx + gx3 + gx4

    return LsDfnGrads(x=gx, feature_weight=feat_w, feature_bias=feat_b,
                      kernel_weight=kern_w, kernel_bias=kern_b,
                      attention_sample_weight=sam_w, attention_sample_bias=sam_b,
                      attention_position_weight=pos_w, attention_position_bias=pos_b,
                      post_weight=post_w, post_bias=post_b)


# ---------------------------------------------------------------------------
# Initialization, counting, checkpoints.
# ---------------------------------------------------------------------------


def init_params(config: LsDfnConfig, seed: int, scheme: str = "residual") -> LsDfnParams:
    """Create block parameters.

    scheme "residual" (default): feature and post convs get fan-in-scaled
    Gaussians; kernel and attention branch weights and biases are exactly
    zero, so with both residuals on the untrained block averages feature
    channels. scheme "gaussian": every branch fan-in Gaussian (used for
    receptive-field probes, where zero dynamic branches would degenerate).

    Args:
        config: block config.
        seed: base seed; each branch draws from a derived child stream.
        scheme: "residual" or "gaussian".
    """
    if scheme not in INIT_SCHEMES:
        raise ValueError(f"scheme must be one of {INIT_SCHEMES}, got {scheme!r}")
    c, kb = config.channels, config.branch_kernel_size
    std = 1.0 / np.sqrt(c * kb * kb)

    def gauss(shape, idx):
        # Copy out of the frozen Tensor: parameters must stay writable for
        # in-place optimizer updates.
        return np.asarray(gaussian_fill(shape, derive_seed(seed, idx), std=std)).copy()

    def zeros_or_gauss(shape, idx):
        if scheme == "gaussian":
            return gauss(shape, idx)
        return np.zeros(shape, dtype=np.float32)

    p = LsDfnParams(
        feature_weight=gauss((c, c, kb, kb), 0),
        feature_bias=np.zeros(c, dtype=np.float32),
        kernel_weight=zeros_or_gauss((config.kernel_branch_channels, c, kb, kb), 1),
        kernel_bias=np.zeros(config.kernel_branch_channels, dtype=np.float32),
    )
    if config.fusion_mode == "attention":
        p.attention_sample_weight = zeros_or_gauss(
            (config.attention_sample_channels, c, kb, kb), 2)
        p.attention_sample_bias = np.zeros(config.attention_sample_channels, dtype=np.float32)
        p.attention_position_weight = zeros_or_gauss(
            (config.attention_position_channels, c, kb, kb), 3)
        p.attention_position_bias = np.zeros(config.attention_position_channels, dtype=np.float32)
    if config.post_conv_channels is not None:
        post_std = 1.0 / np.sqrt(config.out_channels)
        p.post_weight = np.asarray(gaussian_fill(
            (config.post_conv_channels, config.out_channels, 1, 1),
            derive_seed(seed, 4), std=post_std)).copy()
        p.post_bias = np.zeros(config.post_conv_channels, dtype=np.float32)
    p.check(config)
    return p


def count_params(params: LsDfnParams) -> int:
    return sum(int(v.size) for v in params.named().values())


def attention_weight_counts(config: LsDfnConfig, h: int, w: int):
    """(full, split) attention weight counts for an H x W map.

    full is the unfactored per-sample-per-offset field s^2*k^2*C_out*H*W;
    split is the factored pair (s^2 + k^2)*C_out*H*W.
    """
    s2 = config.samples ** 2
    k2 = config.kernel_size ** 2
    co = config.out_channels
    return s2 * k2 * co * h * w, (s2 + k2) * co * h * w


_CONFIG_FILE = "config.txt"
_MANIFEST_FILE = "manifest.txt"


def _config_to_kv(config: LsDfnConfig) -> dict:
    return {f.name: getattr(config, f.name) for f in fields(config)}


def _config_from_kv(kv: dict) -> LsDfnConfig:
    known = {f.name for f in fields(LsDfnConfig)}
    unknown = set(kv) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    missing = known - set(kv)
    if missing:
        raise ValueError(f"missing config keys: {sorted(missing)}")
    vals = {}
    for f in fields(LsDfnConfig):
        raw = kv[f.name]
        if f.name in ("fusion_mode", "kernel_mode"):
            vals[f.name] = raw
        elif f.name in ("residual_kernel", "residual_attention"):
            vals[f.name] = parse_bool(raw)
        elif f.name == "post_conv_channels":
            vals[f.name] = None if raw.lower() == "none" else int(raw)
        else:
            vals[f.name] = int(raw)
    return LsDfnConfig(**vals)


def save_params(directory, params: LsDfnParams, config: LsDfnConfig) -> None:
    """Write a checkpoint directory: one tensor file per parameter, a
    manifest mapping parameter names to filenames, and the config as
    key=value text. Payloads are float32."""
    params.check(config)
    os.makedirs(directory, exist_ok=True)
    manifest = {}
    for name, arr in params.named().items():
        fname = f"{name}.lsdt"
        write_tensor(os.path.join(directory, fname), arr.astype(np.float32, copy=False))
        manifest[name] = fname
    write_kv(os.path.join(directory, _MANIFEST_FILE), manifest)
    write_kv(os.path.join(directory, _CONFIG_FILE), _config_to_kv(config))


def load_params(directory):
    """Read a checkpoint directory written by save_params.

    Returns:
        (params, config) with float32 arrays, channel counts re-validated.
    """
    cfg_path = os.path.join(directory, _CONFIG_FILE)
    man_path = os.path.join(directory, _MANIFEST_FILE)
    if not os.path.isfile(cfg_path) or not os.path.isfile(man_path):
        raise FileNotFoundError(f"{directory}: not a checkpoint (missing "
                                f"{_CONFIG_FILE} or {_MANIFEST_FILE})")
    config = _config_from_kv(read_kv(cfg_path))
    manifest = read_kv(man_path)
    known = {f.name for f in fields(LsDfnParams)}
    unknown = set(manifest) - known
    if unknown:
        raise ValueError(f"{directory}: unknown manifest keys {sorted(unknown)}")
    loaded = {name: np.asarray(read_tensor(os.path.join(directory, fname)))
              for name, fname in manifest.items()}
    params = LsDfnParams(**loaded)
    params.check(config)
    return params, config
