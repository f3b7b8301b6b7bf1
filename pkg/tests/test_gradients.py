"""Finite-difference verification of the block's analytical gradients.

The grid covers {s=1,3} x {attention on/off} x both kernel modes at double
precision, sizes within (N=1, C=4, C_out=3, H=W=7), plus targeted cases: a
scalar hand-derivable instance, residuals off, max-pool fusion, the post conv,
and out-of-bounds sample masking via a large stride.
"""

import dataclasses

import numpy as np
import pytest

from lsdfn.tensor import grad_check
from lsdfn.layer import (LsDfnConfig, init_params, lsdfn_forward,
                         lsdfn_backward)


def probe_loss(y, probe):
    return float(np.sum(y * probe))


def block_case(config, seed=0, n=1, h=5, w=5):
    """Double-precision input, params, and a fixed probe for one config."""
    rs = np.random.RandomState(seed)
    x = rs.randn(n, config.channels, h, w)
    params = init_params(config, seed=seed, scheme="gaussian")
    for name, arr in params.named().items():
        setattr(params, name, arr.astype(np.float64))
    y, _ = lsdfn_forward(x, params, config)
    probe = np.random.RandomState(seed + 1).randn(*y.shape)
    return x, params, probe


def check_input_grad(config, seed=0, tolerance=1e-5, h=5, w=5):
    x, params, probe = block_case(config, seed=seed, h=h, w=w)
    y, saved = lsdfn_forward(x, params, config)
    grads = lsdfn_backward(probe, saved, params, config)

    def f(xv):
        yv, _ = lsdfn_forward(xv, params, config)
        return probe_loss(yv, probe)

    report = grad_check(f, x, grads.x, tolerance=tolerance)
    assert report.passed, (config, report)


def check_param_grad(config, pname, seed=0, tolerance=1e-5):
    x, params, probe = block_case(config, seed=seed)
    y, saved = lsdfn_forward(x, params, config)
    grads = lsdfn_backward(probe, saved, params, config)
    base = getattr(params, pname)

    def f(pv):
        trial = dataclasses.replace(params, **{pname: pv})
        yv, _ = lsdfn_forward(x, trial, config)
        return probe_loss(yv, probe)

    report = grad_check(f, base, getattr(grads, pname), tolerance=tolerance)
    assert report.passed, (config, pname, report)


GRID = [
    LsDfnConfig(channels=4, out_channels=3, kernel_size=3, samples=1),
    LsDfnConfig(channels=4, out_channels=3, kernel_size=3, samples=3,
                sample_stride=2),
    LsDfnConfig(channels=3, out_channels=2, kernel_size=3, samples=3,
                sample_stride=2, kernel_mode="eq6_literal"),
    LsDfnConfig(channels=4, out_channels=2, kernel_size=3, samples=3,
                fusion_mode="max_pool"),
    LsDfnConfig(channels=3, out_channels=3, kernel_size=3, samples=3,
                sample_stride=3, fusion_mode="mean",
                residual_kernel=False, residual_attention=False),
    LsDfnConfig(channels=2, out_channels=2, kernel_size=3, samples=1,
                kernel_mode="eq6_literal", post_conv_channels=3),
]


class TestInputGradients:
    @pytest.mark.parametrize("idx", range(len(GRID)))
    def test_input(self, idx):
        check_input_grad(GRID[idx], seed=20 + idx)

    def test_input_wide_frame(self):
        cfg = LsDfnConfig(channels=4, out_channels=3, kernel_size=3, samples=3,
                          sample_stride=2)
        check_input_grad(cfg, seed=3, h=7, w=7)

    def test_input_oob_samples(self):
        # Stride larger than the frame: every off-center sample is masked.
        cfg = LsDfnConfig(channels=2, out_channels=2, samples=3,
                          sample_stride=9)
        check_input_grad(cfg, seed=4)


class TestParameterGradients:
    CORE = ("feature_weight", "feature_bias", "kernel_weight", "kernel_bias")

    @pytest.mark.parametrize("pname", CORE)
    def test_core_branches(self, pname):
        cfg = LsDfnConfig(channels=3, out_channels=2, kernel_size=3, samples=3,
                          sample_stride=2)
        check_param_grad(cfg, pname, seed=31)

    @pytest.mark.parametrize("pname", ["attention_sample_weight",
                                       "attention_sample_bias",
                                       "attention_position_weight",
                                       "attention_position_bias"])
    def test_attention_branches(self, pname):
        cfg = LsDfnConfig(channels=3, out_channels=2, kernel_size=3, samples=3)
        check_param_grad(cfg, pname, seed=32)

    @pytest.mark.parametrize("pname", ["post_weight", "post_bias"])
    def test_post_conv(self, pname):
        cfg = LsDfnConfig(channels=3, out_channels=2, post_conv_channels=3)
        check_param_grad(cfg, pname, seed=33)

    def test_eq6_kernel_weight(self):
        cfg = LsDfnConfig(channels=3, out_channels=2, kernel_mode="eq6_literal")
        check_param_grad(cfg, "kernel_weight", seed=34)

    def test_max_pool_kernel_weight(self):
        cfg = LsDfnConfig(channels=3, out_channels=2, fusion_mode="max_pool")
        check_param_grad(cfg, "kernel_weight", seed=35)


class TestHandCases:
    def test_scalar_instance(self):
        # 1x1 frame, C=C_out=1, k=s=1, no residuals: the block computes
        # y = (U + V) * F * A_pos * A_sam with every factor an affine map of
        # the scalar input; all gradients have closed forms.
        cfg = LsDfnConfig(channels=1, out_channels=1, kernel_size=1, samples=1,
                          branch_kernel_size=1, residual_kernel=False,
                          residual_attention=False)
        params = init_params(cfg, seed=0)
        for name, arr in params.named().items():
            setattr(params, name, arr.astype(np.float64))
        params.feature_weight[:] = 2.0
        params.feature_bias[:] = 0.25
        params.kernel_weight[0] = 1.5   # U row
        params.kernel_weight[1] = -0.5  # V row
        params.kernel_bias[:] = np.array([0.1, 0.2])
        params.attention_sample_weight[:] = 0.5
        params.attention_sample_bias[:] = 0.0
        params.attention_position_weight[:] = -1.0
        params.attention_position_bias[:] = 3.0
        xv = 0.75
        x = np.full((1, 1, 1, 1), xv)
        y, saved = lsdfn_forward(x, params, cfg)
        feat = 2.0 * xv + 0.25
        u = 1.5 * xv + 0.1
        v = -0.5 * xv + 0.2
        a_sam = 0.5 * xv
        a_pos = -1.0 * xv + 3.0
        want = (u + v) * feat * a_pos * a_sam
        assert y[0, 0, 0, 0] == pytest.approx(want, rel=1e-12)

        grads = lsdfn_backward(np.ones_like(y), saved, params, cfg)
        dy_dx = ((1.5 - 0.5) * feat * a_pos * a_sam
                 + (u + v) * 2.0 * a_pos * a_sam
                 + (u + v) * feat * (-1.0) * a_sam
                 + (u + v) * feat * a_pos * 0.5)
        assert grads.x[0, 0, 0, 0] == pytest.approx(dy_dx, rel=1e-12)
        assert grads.feature_bias[0] == pytest.approx((u + v) * a_pos * a_sam,
                                                      rel=1e-12)
        assert grads.kernel_bias[0] == pytest.approx(feat * a_pos * a_sam,
                                                     rel=1e-12)

    def test_zero_probe_zero_grads(self):
        cfg = LsDfnConfig(channels=3, out_channels=2, samples=3)
        x, params, _ = block_case(cfg, seed=40)
        y, saved = lsdfn_forward(x, params, cfg)
        grads = lsdfn_backward(np.zeros_like(y), saved, params, cfg)
        assert not grads.x.any()
        for arr in grads.named().values():
            assert not arr.any()

    def test_gradients_are_float_like_input(self):
        cfg = LsDfnConfig(channels=2, out_channels=2)
        params = init_params(cfg, seed=1, scheme="gaussian")
        x = np.random.RandomState(41).randn(1, 2, 4, 4).astype(np.float32)
        y, saved = lsdfn_forward(x, params, cfg)
        grads = lsdfn_backward(np.ones_like(y), saved, params, cfg)
        assert grads.x.dtype == np.float32
