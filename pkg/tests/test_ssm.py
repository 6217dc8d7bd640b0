"""State-space module: discretization, scan/conv duality, diagonalization."""

import numpy as np
import pytest

from seqlab import oracles as O
from seqlab import ssm as S
from seqlab import tensor as T

F64 = np.float64


def random_dssm(d_in, d_state, seed, method="zoh", dt=0.1, init="diag-uniform"):
    return S.discretize(S.make_ssm(d_in, d_state, dt, init, T.Rng(seed)), method)


def scan_np(dssm, s):
    return S.scan_recurrent(dssm, T.Tensor(s, dtype=F64)).values


# ---------------------------------------------------------------------------
# discretization
# ---------------------------------------------------------------------------


def test_euler_zero_state_matrix():
    b = np.arange(6.0).reshape(2, 3)
    cont = S.ContinuousSSM(np.zeros((3, 3)), b, np.zeros((3, 2)), np.eye(2), 0.25)
    d = S.discretize(cont, "euler")
    np.testing.assert_array_equal(d.a_bar.values, np.eye(3))
    np.testing.assert_allclose(d.b_bar.values, 0.25 * b)


def test_zoh_scalar_is_exponential():
    cont = S.ContinuousSSM([[-0.7]], [[1.0]], [[1.0]], [[0.0]], 0.3)
    d = S.discretize(cont, "zoh")
    assert d.a_bar.values[0, 0] == pytest.approx(np.exp(-0.21), abs=1e-12)


def test_zoh_zero_state_matrix_uses_series():
    cont = S.ContinuousSSM([[0.0]], [[2.0]], [[1.0]], [[0.0]], 0.5)
    d = S.discretize(cont, "zoh")
    assert d.a_bar.values[0, 0] == pytest.approx(1.0)
    assert d.b_bar.values[0, 0] == pytest.approx(1.0)  # dt * b


def scalar_gap(method_a, method_b, dt):
    cont = S.ContinuousSSM([[-1.0]], [[1.0]], [[1.0]], [[0.0]], dt)
    da = S.discretize(cont, method_a).a_bar.values[0, 0]
    db = S.discretize(cont, method_b).a_bar.values[0, 0]
    return abs(da - db)


def test_bilinear_zoh_gap_is_third_order():
    # both methods match exp() through dt^2, so their gap is ~dt^3/12
    # and halving dt shrinks it ~8x (frozen from the direct computation;
    # 7.62 for dt = 0.1 -> 0.05)
    ratio = scalar_gap("bilinear", "zoh", 0.1) / scalar_gap("bilinear", "zoh", 0.05)
    assert ratio == pytest.approx(7.62, rel=0.2)


def test_euler_zoh_gap_is_second_order():
    # first-order Euler leaves a dt^2/2 gap: halving dt shrinks it ~4x
    ratio = scalar_gap("euler", "zoh", 0.1) / scalar_gap("euler", "zoh", 0.05)
    assert ratio == pytest.approx(4.0, rel=0.2)


def test_c_and_d_pass_through_unchanged():
    cont = S.make_ssm(2, 4, 0.1, "random", T.Rng(1))
    for method in S.METHODS:
        d = S.discretize(cont, method)
        np.testing.assert_array_equal(d.c_bar.values, cont.c)
        np.testing.assert_array_equal(d.d_bar.values, cont.d)
        assert d.method == method


def test_bilinear_singularity():
    # I - dt/2 A vanishes when A = (2/dt) I
    cont = S.ContinuousSSM(np.eye(2) * 20.0, np.ones((1, 2)), np.ones((2, 1)),
                           np.eye(1), 0.1)
    with pytest.raises(S.SingularityError):
        S.discretize(cont, "bilinear")


def test_zoh_singular_large_state_matrix():
    a = np.diag([1.0, 0.0])  # singular, norm well above the series cutoff
    cont = S.ContinuousSSM(a, np.ones((1, 2)), np.ones((2, 1)), np.eye(1), 0.1)
    with pytest.raises(S.SingularityError):
        S.discretize(cont, "zoh")


def test_invalid_construction():
    with pytest.raises(ValueError):
        S.ContinuousSSM([[0.0]], [[1.0]], [[1.0]], [[1.0]], -0.1)
    with pytest.raises(T.ShapeError):
        S.ContinuousSSM(np.zeros((2, 3)), np.ones((1, 2)), np.ones((2, 1)),
                        np.eye(1), 0.1)
    with pytest.raises(ValueError):
        S.discretize(S.make_ssm(1, 2), "leapfrog")


# ---------------------------------------------------------------------------
# scan
# ---------------------------------------------------------------------------


def test_scan_no_state_carryover():
    d = random_dssm(3, 4, seed=2)
    dead = S.DiscreteSSM(T.zeros((4, 4), dtype=F64), d.b_bar, d.c_bar,
                         d.d_bar, d.method)
    s = T.Rng(3).gaussian((6, 3))
    out = scan_np(dead, s)
    want = s @ d.b_bar.values @ d.c_bar.values + s @ d.d_bar.values
    np.testing.assert_allclose(out, want, atol=1e-12)


def test_scan_zero_inputs():
    d = random_dssm(2, 3, seed=4)
    out = scan_np(d, np.zeros((5, 2)))
    np.testing.assert_array_equal(out, 0.0)


def test_scan_matches_closed_form():
    d = random_dssm(3, 5, seed=5)
    s = T.Rng(6).gaussian((16, 3))
    want = O.ssm_closed_form(d.a_bar.values, d.b_bar.values, d.c_bar.values,
                             d.d_bar.values, s)
    assert np.max(np.abs(scan_np(d, s) - want)) < 1e-6


def test_scan_linearity():
    d = random_dssm(2, 4, seed=7)
    rng = T.Rng(8)
    s1, s2 = rng.gaussian((10, 2)), rng.gaussian((10, 2))
    combo = scan_np(d, 2.0 * s1 - 3.0 * s2)
    parts = 2.0 * scan_np(d, s1) - 3.0 * scan_np(d, s2)
    np.testing.assert_allclose(combo, parts, atol=1e-9)


def test_scan_causality_is_bitwise():
    d = random_dssm(2, 4, seed=9)
    rng = T.Rng(10)
    s = rng.gaussian((8, 2))
    base = scan_np(d, s)
    s2 = s.copy()
    s2[5:] += rng.gaussian((3, 2))
    assert np.array_equal(scan_np(d, s2)[:5], base[:5])


def test_scan_gradient_vs_finite_difference():
    d = random_dssm(2, 3, seed=11)
    d = S.DiscreteSSM(T.Tensor(d.a_bar.values, trainable=True),
                      T.Tensor(d.b_bar.values, trainable=True),
                      T.Tensor(d.c_bar.values, trainable=True),
                      T.Tensor(d.d_bar.values, trainable=True), d.method)
    s0 = T.Rng(12).gaussian((5, 2))
    probe = T.Rng(13).gaussian((5, 2))

    s = T.Tensor(s0, dtype=F64, trainable=True)
    with T.Tape():
        loss = (S.scan_recurrent(d, s) * T.Tensor(probe, dtype=F64)).sum()
    g = T.backward(loss)

    def loss_at(values, which):
        parts = {"s": s0, "a": d.a_bar.values, "b": d.b_bar.values}
        parts[which] = values
        dd = S.DiscreteSSM(T.Tensor(parts["a"], dtype=F64),
                           T.Tensor(parts["b"], dtype=F64), d.c_bar, d.d_bar,
                           d.method)
        out = S.scan_recurrent(dd, T.Tensor(parts["s"], dtype=F64)).values
        return float((out * probe).sum())

    for which, tensor in (("s", s), ("a", d.a_bar), ("b", d.b_bar)):
        fd = O.central_difference(lambda v: loss_at(v, which),
                                  {"s": s0, "a": d.a_bar.values,
                                   "b": d.b_bar.values}[which].copy())
        assert O.relative_gradient_error(g[tensor].values, fd) < 1e-5, which


# ---------------------------------------------------------------------------
# kernel / convolution
# ---------------------------------------------------------------------------


def test_kernel_single_tap():
    d = random_dssm(2, 3, seed=14)
    kern = S.build_kernel(d, 1)
    assert len(kern.weights) == 1
    np.testing.assert_allclose(kern.weights[-1],
                               d.b_bar.values @ d.c_bar.values)


@pytest.mark.parametrize("method", S.METHODS)
def test_conv_equals_scan(method):
    d = random_dssm(3, 6, seed=15, method=method)
    s = T.Rng(16).gaussian((32, 3))
    kern = S.build_kernel(d, 32)
    conv = S.apply_kernel(kern, d.d_bar, s).values
    assert np.max(np.abs(conv - scan_np(d, s))) < 1e-6


def test_conv_equals_scan_nondiagonal():
    d = random_dssm(2, 4, seed=17, init="random", method="bilinear")
    s = T.Rng(18).gaussian((20, 2))
    conv = S.apply_kernel(S.build_kernel(d, 24), d.d_bar, s).values
    assert np.max(np.abs(conv - scan_np(d, s))) < 1e-6


def test_diagonal_kernel_matches_dense_powers():
    d = random_dssm(2, 4, seed=19)  # diag-uniform -> diagonal a_bar
    kern = S.build_kernel(d, 8)
    a, b, c = (d.a_bar.values, d.b_bar.values, d.c_bar.values)
    p = b.copy()
    for t in range(8):
        np.testing.assert_allclose(kern.tap(t), p @ c, atol=1e-12)
        p = p @ a


def test_kernel_capacity():
    d = random_dssm(1, 2, seed=20)
    kern = S.build_kernel(d, 4)
    with pytest.raises(S.CapacityError):
        S.apply_kernel(kern, d.d_bar, np.zeros((5, 1)))


def test_method_consistency_as_dt_shrinks():
    rng = T.Rng(21)
    a = np.diag(-(0.1 + 0.9 * rng.uniform(3)))
    b, c = rng.gaussian((2, 3)), rng.gaussian((3, 2))
    s = rng.gaussian((10, 2))
    gaps = []
    for dt in (0.2, 0.1, 0.05):
        cont = S.ContinuousSSM(a, b, c, np.eye(2), dt)
        outs = [scan_np(S.discretize(cont, m), s) for m in S.METHODS]
        gaps.append(max(np.max(np.abs(outs[i] - outs[j]))
                        for i in range(3) for j in range(i + 1, 3)))
    assert gaps[0] > gaps[1] > gaps[2]


# ---------------------------------------------------------------------------
# diagonalization
# ---------------------------------------------------------------------------


def test_diagonal_input_unchanged_up_to_ordering():
    d = random_dssm(2, 4, seed=22)
    dd = S.diagonalize(d)
    np.testing.assert_allclose(np.sort(np.diagonal(dd.a_bar.values)),
                               np.sort(np.diagonal(d.a_bar.values)), atol=1e-12)


def test_diagonalized_model_matches_original():
    rng = T.Rng(23)
    g = rng.gaussian((5, 5)) * 0.3
    a_sym = (g + g.T) / 2.0  # symmetric: guaranteed real spectrum
    d = S.DiscreteSSM(T.Tensor(a_sym, dtype=F64),
                      T.Tensor(rng.gaussian((2, 5)), dtype=F64),
                      T.Tensor(rng.gaussian((5, 2)), dtype=F64),
                      T.Tensor(np.eye(2), dtype=F64), "euler")
    dd = S.diagonalize(d)
    s = rng.gaussian((16, 2))
    assert np.max(np.abs(scan_np(dd, s) - scan_np(d, s))) < 1e-5
    off_diag = dd.a_bar.values - np.diag(np.diagonal(dd.a_bar.values))
    np.testing.assert_allclose(off_diag, 0.0, atol=1e-12)


def test_eigendecomposition_reconstruction():
    rng = T.Rng(24)
    g = rng.gaussian((4, 4))
    a = (g + g.T) / 2.0
    lam, v = np.linalg.eig(a)
    assert np.max(np.abs(v @ np.diag(lam) @ np.linalg.inv(v) - a)) < 1e-6


def test_complex_spectrum_rejected():
    rot = np.array([[0.0, 1.0], [-1.0, 0.0]])  # eigenvalues +-i
    d = S.DiscreteSSM(T.Tensor(rot, dtype=F64), T.Tensor(np.ones((1, 2)), dtype=F64),
                      T.Tensor(np.ones((2, 1)), dtype=F64),
                      T.Tensor(np.eye(1), dtype=F64), "euler")
    with pytest.raises(S.DiagonalizationError):
        S.diagonalize(d)


def test_defective_matrix_rejected():
    jordan = np.array([[1.0, 1.0], [0.0, 1.0]])
    d = S.DiscreteSSM(T.Tensor(jordan, dtype=F64),
                      T.Tensor(np.ones((1, 2)), dtype=F64),
                      T.Tensor(np.ones((2, 1)), dtype=F64),
                      T.Tensor(np.eye(1), dtype=F64), "euler")
    with pytest.raises(S.DiagonalizationError):
        S.diagonalize(d)


# ---------------------------------------------------------------------------
# per-column sub-layer wiring
# ---------------------------------------------------------------------------


def test_sublayer_scan_equals_per_column_loop():
    dssm = S.init_ssm_sublayer(d_state=4, dt=0.1, method="zoh",
                               init="diag-uniform", rng=T.Rng(25))
    h = T.Rng(26).gaussian((7, 5))
    got = S.ssm_sublayer_scan(T.Tensor(h, dtype=F64), dssm).values
    for col in range(5):
        want = scan_np(dssm, h[:, col:col + 1])
        np.testing.assert_allclose(got[:, col:col + 1], want, atol=1e-10)


def test_sublayer_requires_siso():
    d = random_dssm(2, 3, seed=27)
    with pytest.raises(T.ShapeError):
        S.ssm_sublayer_scan(T.zeros((4, 2), dtype=F64), d)


def test_sublayer_gradient_reaches_parameters():
    dssm = S.init_ssm_sublayer(4, 0.1, "euler", "diag-uniform", T.Rng(28))
    h = T.Tensor(T.Rng(29).gaussian((5, 3)), dtype=F64)
    with T.Tape():
        loss = S.ssm_sublayer_scan(h, dssm).sum()
    g = T.backward(loss)
    for _, t in dssm.named("ssm"):
        assert g.get(t) is not None
        assert np.all(np.isfinite(g[t].values))
