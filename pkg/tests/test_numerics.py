import math

import numpy as np
import pytest

from mvpose import numerics as nm
from mvpose.numerics import (
    ContractError,
    GradTape,
    ShapeError,
    Tensor,
    backward,
    finite_diff_check,
)


def naive_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Triple-loop reference product."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for p in range(k):
                out[i, j] += a[i, p] * b[p, j]
    return out


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.random.default_rng(0).normal(size=(3, 3)))
        out = nm.matmul(a, Tensor(np.eye(3)))
        np.testing.assert_array_equal(out.data, a.data)

    def test_zero_annihilation(self):
        b = Tensor(np.random.default_rng(1).normal(size=(3, 4)))
        out = nm.matmul(Tensor(np.zeros((2, 3))), b)
        np.testing.assert_array_equal(out.data, np.zeros((2, 4)))

    def test_against_triple_loop(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(3, 3))
        b = rng.normal(size=(3, 3))
        out = nm.matmul(Tensor(a), Tensor(b))
        assert np.max(np.abs(out.data - naive_matmul(a, b))) < 1e-12

    def test_associativity_with_identity(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(4, 4))
        left = nm.matmul(nm.matmul(Tensor(a), Tensor(np.eye(4))), Tensor(a)).data
        right = nm.matmul(Tensor(a), nm.matmul(Tensor(np.eye(4)), Tensor(a))).data
        assert np.max(np.abs(left - right)) < 1e-12

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            nm.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))

    def test_batched_matches_per_slice(self):
        rng = np.random.default_rng(4)
        a = rng.normal(size=(5, 3, 4))
        b = rng.normal(size=(5, 4, 2))
        out = nm.matmul(Tensor(a), Tensor(b)).data
        for i in range(5):
            np.testing.assert_allclose(out[i], a[i] @ b[i], atol=1e-12)

    def test_nd_times_weight(self):
        rng = np.random.default_rng(5)
        a = rng.normal(size=(2, 3, 4))
        w = rng.normal(size=(4, 6))
        out = nm.matmul(Tensor(a), Tensor(w)).data
        np.testing.assert_allclose(out, a @ w, atol=1e-12)


class TestSoftmax:
    def test_symmetry(self):
        out = nm.softmax(Tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-15)

    def test_analytic_values(self):
        x = Tensor([math.log(1.0), math.log(2.0), math.log(3.0)])
        np.testing.assert_allclose(nm.softmax(x).data, [1 / 6, 1 / 3, 1 / 2], atol=1e-12)

    def test_max_shift_stability(self):
        out = nm.softmax(Tensor([1000.0, 0.0]))
        assert np.all(np.isfinite(out.data))
        np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-15)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(6)
        out = nm.softmax(Tensor(rng.normal(size=(4, 7)) * 5))
        np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(4), atol=1e-6)
        assert np.all(out.data >= 0)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=9)
        perm = rng.permutation(9)
        a = nm.softmax(Tensor(x[perm])).data
        b = nm.softmax(Tensor(x)).data[perm]
        assert np.max(np.abs(a - b)) <= 1e-12


class TestLayerNorm:
    def test_constant_row_maps_to_zero(self):
        x = Tensor(np.full((2, 5), 3.7))
        out = nm.layer_norm(x, Tensor(np.ones(5)), Tensor(np.zeros(5)), eps=1e-5)
        np.testing.assert_allclose(out.data, np.zeros((2, 5)), atol=1e-12)

    def test_already_standardized(self):
        out = nm.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)),
                            Tensor(np.zeros(2)), eps=1e-12)
        np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-6)

    def test_against_two_pass_oracle(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(3, 11))
        g = rng.normal(size=11)
        b = rng.normal(size=11)
        eps = 1e-5
        out = nm.layer_norm(Tensor(x), Tensor(g), Tensor(b), eps=eps).data
        # two-pass oracle: explicit mean, then explicit variance
        for i in range(3):
            mu = sum(x[i]) / 11
            var = sum((v - mu) ** 2 for v in x[i]) / 11
            ref = (x[i] - mu) / math.sqrt(var + eps) * g + b
            assert np.max(np.abs(out[i] - ref)) < 1e-9

    def test_bad_eps(self):
        with pytest.raises(ContractError):
            nm.layer_norm(Tensor(np.ones((1, 2))), Tensor(np.ones(2)),
                          Tensor(np.zeros(2)), eps=0.0)


class TestGelu:
    def test_zero(self):
        assert nm.gelu(Tensor([0.0])).data[0] == 0.0

    def test_asymptotes(self):
        assert abs(nm.gelu(Tensor([10.0])).data[0] - 10.0) < 1e-4
        assert abs(nm.gelu(Tensor([-10.0])).data[0] - 0.0) < 1e-4

    def test_monotone_on_grid(self):
        # increasing region only; gelu has a shallow dip left of x ~ -0.75
        x = np.linspace(-0.5, 4, 401)
        y = nm.gelu(Tensor(x)).data
        assert np.all(np.diff(y) > -1e-12)


class TestBackward:
    def test_sum_gives_ones(self):
        w = Tensor(np.random.default_rng(9).normal(size=(3, 4)), requires_grad=True,
                   name="w")
        with GradTape() as tape:
            loss = nm.tsum(w)
        grads = backward(loss, tape)
        np.testing.assert_array_equal(grads["w"].data, np.ones((3, 4)))

    def test_elementwise_square_gives_2w(self):
        w = Tensor(np.random.default_rng(10).normal(size=(5,)), requires_grad=True,
                   name="w")
        with GradTape() as tape:
            loss = nm.tsum(nm.square(w))
        grads = backward(loss, tape)
        np.testing.assert_allclose(grads["w"].data, 2 * w.data, atol=1e-12)

    def test_non_scalar_loss_rejected(self):
        w = Tensor(np.ones(3), requires_grad=True, name="w")
        with GradTape() as tape:
            y = nm.scale(w, 2.0)
        with pytest.raises(ContractError):
            backward(y, tape)

    def test_grad_accumulates_once_per_tensor(self):
        w = Tensor(np.array([1.5]), requires_grad=True, name="w")
        with GradTape() as tape:
            y = nm.add(w, w)          # 2w
            loss = nm.tsum(nm.mul(y, y))  # 4w^2 -> d/dw = 8w
        grads = backward(loss, tape)
        np.testing.assert_allclose(grads["w"].data, 8 * w.data, atol=1e-12)

    def test_determinism_bit_identical(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(4, 6))
        w = rng.normal(size=(6, 6))

        def run():
            t = nm.matmul(Tensor(x), Tensor(w))
            t = nm.gelu(t)
            t = nm.softmax(t)
            return t.data.tobytes()

        assert run() == run()


def _fd_scalar(f, x: np.ndarray, h: float) -> np.ndarray:
    """Central differences of scalar f at every element of x."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


OPS = {
    "matmul": lambda x, r: nm.matmul(x, Tensor(r.normal(size=(x.shape[-1], 3)))),
    "add_bias": lambda x, r: nm.add(x, Tensor(r.normal(size=(x.shape[-1],)))),
    "mul": lambda x, r: nm.mul(x, Tensor(r.normal(size=x.shape))),
    "softmax": lambda x, r: nm.softmax(x),
    "layer_norm": lambda x, r: nm.layer_norm(
        x, Tensor(r.normal(size=(x.shape[-1],))), Tensor(r.normal(size=(x.shape[-1],)))),
    "gelu": lambda x, r: nm.gelu(x),
    "sigmoid": lambda x, r: nm.sigmoid(x),
    "log1p_shift": lambda x, r: nm.log(nm.add_const(nm.sigmoid(x), 1.0)),
    "reshape": lambda x, r: nm.reshape(x, (x.size,)),
    "transpose": lambda x, r: nm.transpose(x, (1, 0)),
    "mean_axis": lambda x, r: nm.tmean(x, axis=0),
    "roll": lambda x, r: nm.roll2d(x, (1, -2), (0, 1)),
    "broadcast": lambda x, r: nm.broadcast_to(x, (3,) + x.shape),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_primitive_gradients_match_finite_differences(name):
    # >= 10 seeds per op, projected to a scalar by a fixed random probe
    for seed in range(10):
        rng = np.random.default_rng(1000 + seed)
        x = Tensor(rng.normal(size=(4, 5)), requires_grad=True, name="x")
        op_rng = np.random.default_rng(2000 + seed)
        probe_rng = np.random.default_rng(3000 + seed)
        probe = {}

        def loss_fn():
            y = OPS[name](x, np.random.default_rng(2000 + seed))
            if "r" not in probe:
                probe["r"] = probe_rng.normal(size=y.shape)
            return nm.tsum(nm.mul(y, Tensor(np.broadcast_to(probe["r"], y.shape).copy())))

        with GradTape() as tape:
            loss = loss_fn()
        grads = backward(loss, tape)
        fd = _fd_scalar(lambda: loss_fn().item(), x.data, h=1e-6)
        a = grads["x"].data
        rel = np.abs(a - fd) / np.maximum(np.maximum(np.abs(a), np.abs(fd)), 1e-12)
        assert rel.max() < 1e-4, f"{name} seed {seed}: rel err {rel.max():.2e}"


class TestGatherScatter:
    def test_take_rows_forward_and_grad(self):
        table = Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True, name="t")
        idx = np.array([2, 0, 2])
        with GradTape() as tape:
            out = nm.take_rows(table, idx)
            loss = nm.tsum(out)
        np.testing.assert_array_equal(out.data, table.data[idx])
        grads = backward(loss, tape)
        expected = np.zeros((4, 3))
        expected[2] = 2.0  # row 2 taken twice
        expected[0] = 1.0
        np.testing.assert_array_equal(grads["t"].data, expected)

    def test_gather_tokens_roundtrip(self):
        rng = np.random.default_rng(12)
        x = Tensor(rng.normal(size=(2, 5, 3)), requires_grad=True, name="x")
        idx = np.array([[4, 1, 0], [2, 2, 3]])
        with GradTape() as tape:
            out = nm.gather_tokens(x, idx)
            loss = nm.tsum(out)
        for b in range(2):
            np.testing.assert_array_equal(out.data[b], x.data[b, idx[b]])
        grads = backward(loss, tape)
        counts = np.zeros((2, 5, 3))
        for b in range(2):
            for i in idx[b]:
                counts[b, i] += 1.0
        np.testing.assert_array_equal(grads["x"].data, counts)

    def test_pad_crop_inverse(self):
        rng = np.random.default_rng(13)
        x = Tensor(rng.normal(size=(1, 3, 5, 2)))
        padded = nm.pad_grid(x, 2, 1)
        assert padded.shape == (1, 5, 6, 2)
        back = nm.crop_grid(padded, 3, 5)
        np.testing.assert_array_equal(back.data, x.data)


class TestFiniteDiffCheck:
    def test_quadratic_is_nearly_exact(self):
        w = Tensor(np.random.default_rng(14).normal(size=(4,)), requires_grad=True,
                   name="w")
        report = finite_diff_check(lambda: nm.tsum(nm.square(w)), {"w": w}, h=1e-5)
        assert report.max_rel_err < 1e-9

    def test_softmax_cross_entropy_micro_net(self):
        rng = np.random.default_rng(15)
        w = Tensor(rng.normal(size=(5, 3)), requires_grad=True, name="w")
        b = Tensor(rng.normal(size=(3,)) * 0.1, requires_grad=True, name="b")
        x = Tensor(rng.normal(size=(2, 5)))
        onehot = np.zeros((2, 3))
        onehot[0, 1] = onehot[1, 2] = 1.0

        def loss_fn():
            logits = nm.add(nm.matmul(x, w), b)
            p = nm.softmax(logits)
            ll = nm.mul(nm.log(p), Tensor(onehot))
            return nm.scale(nm.tsum(ll), -0.5)

        report = finite_diff_check(loss_fn, {"w": w, "b": b}, h=1e-5)
        assert report.max_rel_err < 1e-6

    def test_bad_h_rejected(self):
        w = Tensor(np.ones(2), requires_grad=True, name="w")
        with pytest.raises(ContractError):
            finite_diff_check(lambda: nm.tsum(w), {"w": w}, h=1e-2)

    def test_nondeterministic_fn_rejected(self):
        w = Tensor(np.ones(2), requires_grad=True, name="w")
        state = {"n": 0.0}

        def fn():
            state["n"] += 1.0
            return nm.scale(nm.tsum(w), state["n"])

        with pytest.raises(ContractError, match="deterministic"):
            finite_diff_check(fn, {"w": w})


class TestShapeChecks:
    def test_add_mismatch(self):
        with pytest.raises(ShapeError):
            nm.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))

    def test_mul_mismatch(self):
        with pytest.raises(ShapeError):
            nm.mul(Tensor(np.zeros(3)), Tensor(np.zeros(4)))

    def test_tensor_shape_invariant(self):
        t = Tensor(np.zeros((2, 3, 4)))
        assert int(np.prod(t.shape)) == t.size
