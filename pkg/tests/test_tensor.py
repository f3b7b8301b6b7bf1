"""Tensor core tests: storage invariants, file IO, shared convolution against
a loop oracle, finite differences, and the seeded RNG."""

import numpy as np
import pytest

from lsdfn.tensor import (Tensor, Rng, derive_seed, gaussian_fill,
                          read_tensor, write_tensor, BadMagicError,
                          BadHeaderError, TruncatedPayloadError,
                          conv2d_shared, conv2d_shared_backward,
                          finite_diff_grad, grad_check, MAGIC)


def conv2d_loop_oracle(x, w, b=None, pad=None):
    """Independent sextuple-loop convolution used as the ground truth."""
    n, c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    if pad is None:
        pad = k // 2
    h_out = h + 2 * pad - k + 1
    w_out = wd + 2 * pad - k + 1
    xp = np.zeros((n, c_in, h + 2 * pad, wd + 2 * pad), dtype=np.float64)
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    y = np.zeros((n, c_out, h_out, w_out), dtype=np.float64)
    for ni in range(n):
        for v in range(c_out):
            for yy in range(h_out):
                for xx in range(w_out):
                    acc = 0.0
                    for u in range(c_in):
                        for j in range(k):
                            for i in range(k):
                                acc += float(w[v, u, j, i]) * float(xp[ni, u, yy + j, xx + i])
                    y[ni, v, yy, xx] = acc + (float(b[v]) if b is not None else 0.0)
    return y


class TestTensorStorage:
    def test_construction_and_freeze(self):
        t = Tensor(np.arange(6, dtype=np.float32).reshape(2, 3))
        assert t.shape == (2, 3)
        assert t.dtype == np.float32
        assert t.rank == 2
        with pytest.raises(ValueError):
            t.data[0, 0] = 5.0

    def test_copies_input(self):
        src = np.ones((2, 2), dtype=np.float32)
        t = Tensor(src)
        src[0, 0] = 7.0
        assert t.data[0, 0] == 1.0

    def test_rank_bounds(self):
        Tensor(np.zeros((1,) * 5, dtype=np.float32))
        with pytest.raises(ValueError):
            Tensor(np.float32(3.0))
        with pytest.raises(ValueError):
            Tensor(np.zeros((1,) * 6, dtype=np.float32))

    def test_zero_extent_rejected(self):
        with pytest.raises(ValueError):
            Tensor(np.zeros((2, 0, 3), dtype=np.float32))

    def test_dtype_rules(self):
        assert Tensor([1, 2, 3]).dtype == np.float32
        assert Tensor(np.zeros(3, dtype=np.float64)).dtype == np.float64
        with pytest.raises(ValueError):
            Tensor(np.zeros(3), dtype=np.int32)

    def test_round_trip_to_numpy(self):
        a = np.random.RandomState(0).randn(3, 4).astype(np.float32)
        assert np.array_equal(np.asarray(Tensor(a)), a)


class TestTensorIO:
    def test_round_trip_bitwise(self, tmp_path):
        a = np.random.RandomState(1).randn(2, 3, 4, 5, 2).astype(np.float32)
        p = tmp_path / "t.lsdt"
        write_tensor(p, Tensor(a))
        back = read_tensor(p)
        assert back.shape == (2, 3, 4, 5, 2)
        assert np.array_equal(back.data, a)

    def test_rank1_round_trip(self, tmp_path):
        a = np.array([1.5, -2.25, 0.0], dtype=np.float32)
        p = tmp_path / "v.lsdt"
        write_tensor(p, a)
        assert np.array_equal(read_tensor(p).data, a)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.lsdt"
        p.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(BadMagicError) as e:
            read_tensor(p)
        assert e.value.code == "bad magic"

    def test_bad_version(self, tmp_path):
        p = tmp_path / "v9.lsdt"
        p.write_bytes(MAGIC + np.asarray([9, 1, 1], dtype="<u4").tobytes() + b"\x00" * 4)
        with pytest.raises(BadHeaderError):
            read_tensor(p)

    def test_rank_out_of_range(self, tmp_path):
        p = tmp_path / "r6.lsdt"
        p.write_bytes(MAGIC + np.asarray([1, 6] + [1] * 6, dtype="<u4").tobytes() + b"\x00" * 4)
        with pytest.raises(BadHeaderError) as e:
            read_tensor(p)
        assert e.value.code == "bad header"

    def test_empty_shape_rejected(self, tmp_path):
        p = tmp_path / "z.lsdt"
        p.write_bytes(MAGIC + np.asarray([1, 2, 3, 0], dtype="<u4").tobytes())
        with pytest.raises(BadHeaderError):
            read_tensor(p)

    def test_truncated_payload(self, tmp_path):
        p = tmp_path / "short.lsdt"
        good = MAGIC + np.asarray([1, 1, 4], dtype="<u4").tobytes() + b"\x00" * 16
        p.write_bytes(good[:-4])
        with pytest.raises(TruncatedPayloadError) as e:
            read_tensor(p)
        assert e.value.code == "truncated payload"

    def test_trailing_bytes_rejected(self, tmp_path):
        p = tmp_path / "long.lsdt"
        p.write_bytes(MAGIC + np.asarray([1, 1, 2], dtype="<u4").tobytes() + b"\x00" * 12)
        with pytest.raises(TruncatedPayloadError):
            read_tensor(p)


class TestConv2dShared:
    def test_ones_example(self):
        x = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
        w = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
        y = conv2d_shared(x, w).data
        assert y.shape == (1, 1, 3, 3)
        assert y[0, 0, 1, 1] == 9.0
        for cy, cx in [(0, 0), (0, 2), (2, 0), (2, 2)]:
            assert y[0, 0, cy, cx] == 4.0

    def test_delta_kernel_identity(self):
        rs = np.random.RandomState(3)
        x = rs.randn(2, 3, 6, 7).astype(np.float32)
        w = np.zeros((3, 3, 3, 3), dtype=np.float32)
        for v in range(3):
            w[v, v, 1, 1] = 1.0
        y = conv2d_shared(x, w).data
        assert np.array_equal(y, x)

    @pytest.mark.parametrize("shape,cout,k,pad", [
        ((2, 3, 8, 9), 4, 3, None),
        ((1, 2, 5, 5), 3, 5, None),
        ((2, 4, 7, 6), 2, 3, 0),
        ((1, 1, 4, 4), 1, 1, 0),
        ((1, 3, 6, 6), 2, 5, 1),
    ])
    def test_matches_loop_oracle(self, shape, cout, k, pad):
        rs = np.random.RandomState(hash((shape, cout, k)) % (2 ** 31))
        x = rs.randn(*shape).astype(np.float64)
        w = rs.randn(cout, shape[1], k, k).astype(np.float64)
        b = rs.randn(cout).astype(np.float64)
        y = conv2d_shared(x, w, b, pad=pad).data
        ref = conv2d_loop_oracle(x, w, b, pad=pad)
        assert y.shape == ref.shape
        assert np.max(np.abs(y - ref)) < 1e-10

    def test_linearity(self):
        rs = np.random.RandomState(5)
        x1 = rs.randn(1, 2, 5, 5)
        x2 = rs.randn(1, 2, 5, 5)
        w = rs.randn(3, 2, 3, 3)
        lhs = conv2d_shared(2.5 * x1 - 1.25 * x2, w).data
        rhs = 2.5 * conv2d_shared(x1, w).data - 1.25 * conv2d_shared(x2, w).data
        assert np.max(np.abs(lhs - rhs)) < 1e-12

    def test_shape_preserved_default_pad(self):
        y = conv2d_shared(np.zeros((2, 3, 9, 11), dtype=np.float32),
                          np.zeros((5, 3, 3, 3), dtype=np.float32))
        assert y.shape == (2, 5, 9, 11)

    def test_errors(self):
        x = np.zeros((1, 2, 5, 5), dtype=np.float32)
        with pytest.raises(ValueError):
            conv2d_shared(x, np.zeros((1, 2, 2, 2), dtype=np.float32))
        with pytest.raises(ValueError):
            conv2d_shared(x, np.zeros((1, 3, 3, 3), dtype=np.float32))
        with pytest.raises(ValueError):
            conv2d_shared(x, np.zeros((1, 2, 3, 3), dtype=np.float32), pad=5)
        with pytest.raises(ValueError):
            conv2d_shared(x, np.zeros((1, 2, 3, 4), dtype=np.float32))


class TestConv2dBackward:
    def test_scalar_case(self):
        x = np.full((1, 1, 1, 1), 3.0, dtype=np.float64)
        w = np.full((1, 1, 1, 1), -2.0, dtype=np.float64)
        g = np.ones((1, 1, 1, 1), dtype=np.float64)
        gx, gw, gb = conv2d_shared_backward(g, x, w, pad=0)
        assert gx.data[0, 0, 0, 0] == -2.0
        assert gw.data[0, 0, 0, 0] == 3.0
        assert gb.data[0] == 1.0

    def test_zero_grad_propagates_zeros(self):
        rs = np.random.RandomState(7)
        x = rs.randn(2, 3, 5, 5).astype(np.float32)
        w = rs.randn(4, 3, 3, 3).astype(np.float32)
        gx, gw, gb = conv2d_shared_backward(np.zeros((2, 4, 5, 5), dtype=np.float32), x, w)
        assert not gx.data.any() and not gw.data.any() and not gb.data.any()

    def test_adjoint_identity(self):
        # <g, conv(x)> == <conv_backward_x(g), x> for the linear map in x.
        rs = np.random.RandomState(11)
        x = rs.randn(2, 3, 6, 6)
        w = rs.randn(4, 3, 3, 3)
        g = rs.randn(2, 4, 6, 6)
        y = conv2d_shared(x, w).data
        gx, _, _ = conv2d_shared_backward(g, x, w)
        assert abs(np.vdot(g, y) - np.vdot(gx.data, x)) < 1e-9 * max(1.0, abs(np.vdot(g, y)))

    @pytest.mark.parametrize("pad", [None, 0, 2])
    def test_against_finite_differences(self, pad):
        rs = np.random.RandomState(13)
        x = rs.randn(1, 2, 5, 4)
        w = rs.randn(3, 2, 3, 3)
        b = rs.randn(3)
        r = rs.randn(*conv2d_shared(x, w, b, pad=pad).shape)

        def probe(xa, wa, ba):
            return float(np.vdot(r, conv2d_shared(xa, wa, ba, pad=pad).data))

        g = r
        gx, gw, gb = conv2d_shared_backward(g, x, w, pad=pad)
        rep = grad_check(lambda xa: probe(xa, w, b), x, gx.data)
        assert rep.passed, rep
        rep = grad_check(lambda wa: probe(x, wa, b), w, gw.data)
        assert rep.passed, rep
        rep = grad_check(lambda ba: probe(x, w, ba), b, gb.data)
        assert rep.passed, rep

    def test_grad_shape_mismatch_rejected(self):
        x = np.zeros((1, 2, 5, 5), dtype=np.float32)
        w = np.zeros((3, 2, 3, 3), dtype=np.float32)
        with pytest.raises(ValueError):
            conv2d_shared_backward(np.zeros((1, 3, 4, 5), dtype=np.float32), x, w)
        with pytest.raises(ValueError):
            conv2d_shared_backward(np.zeros((1, 2, 5, 5), dtype=np.float32), x, w)


class TestFiniteDiff:
    def test_quadratic(self):
        x = np.array([[1.0, -2.0], [0.5, 3.0]])
        g = finite_diff_grad(lambda a: float((a ** 2).sum()), x)
        assert np.max(np.abs(g - 2 * x)) < 1e-8

    def test_nonfinite_reported(self):
        x = np.array([0.5])
        with np.errstate(invalid="ignore"):
            with pytest.raises(ValueError, match="non-finite"):
                finite_diff_grad(lambda a: float(np.log(a[0] - 1.0)), x)

    def test_grad_check_report(self):
        x = np.array([1.0, 2.0, 3.0])
        good = grad_check(lambda a: float((a ** 2).sum()), x, 2 * x)
        assert good.passed and good.max_relative_error < 1e-7
        assert good.epsilon_used == 1e-6
        bad = grad_check(lambda a: float((a ** 2).sum()), x, 2 * x + 0.5)
        assert not bad.passed
        assert bad.max_relative_error > 1e-2
        assert bad.worst_coordinate == (0,)


class TestRng:
    def test_same_seed_bitwise(self):
        a = gaussian_fill((3, 4, 5), seed=42)
        b = gaussian_fill((3, 4, 5), seed=42)
        assert np.array_equal(a.data, b.data)

    def test_adjacent_seeds_differ(self):
        a = gaussian_fill((64,), seed=7)
        b = gaussian_fill((64,), seed=8)
        assert not np.array_equal(a.data, b.data)

    def test_std_zero_constant(self):
        t = gaussian_fill((10,), seed=0, mean=2.5, std=0.0)
        assert np.all(t.data == np.float32(2.5))
        with pytest.raises(ValueError):
            gaussian_fill((2,), seed=0, std=-1.0)

    def test_moments(self):
        z = Rng(123).gaussians(200_000)
        assert abs(z.mean()) < 0.01
        assert abs(z.std() - 1.0) < 0.01
        # Symmetry and tails roughly normal.
        assert abs((z > 0).mean() - 0.5) < 0.005
        assert 0.026 < (np.abs(z) > 1.96).mean() < 0.074

    def test_mean_std_applied(self):
        t = gaussian_fill((100_000,), seed=9, mean=3.0, std=0.5, dtype=np.float64)
        assert abs(t.data.mean() - 3.0) < 0.01
        assert abs(t.data.std() - 0.5) < 0.01

    def test_uniforms_range(self):
        u = Rng(5).uniforms(10_000)
        assert u.min() >= 0.0 and u.max() < 1.0
        assert abs(u.mean() - 0.5) < 0.02

    def test_integers(self):
        v = Rng(17).integers(-3, 4, 20_000)
        assert v.min() == -3 and v.max() == 3
        counts = np.bincount(v + 3, minlength=7)
        assert np.all(np.abs(counts / 20_000 - 1 / 7) < 0.02)
        with pytest.raises(ValueError):
            Rng(0).integers(2, 2, 1)

    def test_stream_is_positional(self):
        r1 = Rng(99)
        first = np.concatenate([r1.next_u64(10), r1.next_u64(10)])
        second = Rng(99).next_u64(20)
        assert np.array_equal(first, second)

    def test_derive_seed(self):
        seeds = {derive_seed(1234, i) for i in range(100)}
        assert len(seeds) == 100
        assert derive_seed(1234, 3) == derive_seed(1234, 3)
        with pytest.raises(ValueError):
            derive_seed(1, -1)
