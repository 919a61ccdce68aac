import math

import numpy as np
import numpy.testing as npt
import pytest

import basisid as b


def ladder_reference(m, L, x):
    """Fourier ladder evaluated the obvious way: [1, cos, sin, cos2, ...]
    truncated to m entries, argument clipped to [-L, L]."""
    x = min(max(x, -L), L)
    out = [1.0]
    k = 1
    while len(out) < m:
        out.append(math.cos(k * math.pi * x / L))
        if len(out) < m:
            out.append(math.sin(k * math.pi * x / L))
        k += 1
    return np.array(out[:m])


def test_fourier_at_zero():
    spec = b.BasisSpec.fourier(3, 2.0)
    npt.assert_array_equal(b.eval_features(spec, [0.0]), [1.0, 1.0, 0.0])


def test_fourier_matches_direct_evaluation():
    spec = b.BasisSpec.fourier(9, 1.7)
    for x in (-1.7, -0.93, 0.0, 0.41, 1.2, 1.7):
        npt.assert_allclose(b.eval_features(spec, [x]),
                            ladder_reference(9, 1.7, x), atol=1e-14)


def test_fourier_argument_is_clamped():
    spec = b.BasisSpec.fourier(5, 2.0)
    npt.assert_allclose(b.eval_features(spec, [57.0]),
                        b.eval_features(spec, [2.0]), atol=0)
    npt.assert_allclose(b.eval_features(spec, [-3.0]),
                        b.eval_features(spec, [-2.0]), atol=0)


def test_fourier_quadrature_orthogonality():
    """Off-diagonal Gram entries vanish under trapezoid quadrature.

    The ladder is orthogonal on [-L, L] w.r.t. the uniform measure; with
    1e5 nodes the numerical error should sit far below 1e-8.
    """
    m, L = 5, 2.0
    spec = b.BasisSpec.fourier(m, L)
    xs = np.linspace(-L, L, 100_001)
    F = b.eval_features_batch(spec, xs.reshape(-1, 1))
    gram = np.empty((m, m))
    for i in range(m):
        for j in range(m):
            gram[i, j] = np.trapezoid(F[:, i] * F[:, j], xs)
    off = gram - np.diag(np.diag(gram))
    assert np.max(np.abs(off)) < 1e-8


def test_fourier_gram_relative_diagonality():
    m, L = 8, 3.0
    spec = b.BasisSpec.fourier(m, L)
    xs = np.linspace(-L, L, 50_001)
    F = b.eval_features_batch(spec, xs.reshape(-1, 1))
    w = np.full(xs.size, xs[1] - xs[0])
    w[0] *= 0.5
    w[-1] *= 0.5
    gram = (F * w[:, None]).T @ F
    scale = np.sqrt(np.outer(np.diag(gram), np.diag(gram)))
    rel = np.abs(gram) / scale
    np.fill_diagonal(rel, 0.0)
    assert rel.max() < 1e-6


def test_features_bounded_after_clamp(rng):
    spec = b.BasisSpec.fourier(11, 0.8)
    X = rng.normal(scale=5.0, size=(200, 1))
    F = b.eval_features_batch(spec, X)
    assert np.all(F >= -1.0) and np.all(F <= 1.0)


def test_linear_and_constant_kinds():
    npt.assert_array_equal(
        b.eval_features(b.BasisSpec.linear(1), [3.2]), [3.2])
    npt.assert_array_equal(
        b.eval_features(b.BasisSpec.constant(2), [4.0, -1.0]), [1.0])
    # linear features are *not* clamped -- there is no domain box for them
    npt.assert_array_equal(
        b.eval_features(b.BasisSpec.linear(1), [1e6]), [1e6])


def test_clamp_to_domain_examples():
    spec = b.BasisSpec.fourier(4, 2.0)
    assert b.clamp_to_domain(spec, np.array([2.5]))[0] == 2.0
    assert b.clamp_to_domain(spec, np.array([-3.0]))[0] == -2.0
    assert b.clamp_to_domain(spec, np.array([1.1]))[0] == 1.1


def test_feature_counts_multivariate():
    tensor = b.BasisSpec.fourier(4, 1.0, dims=2, composition="tensor_product")
    assert tensor.feature_count == 16
    additive = b.BasisSpec.fourier(4, 1.0, dims=3, composition="additive")
    assert additive.feature_count == 12
    x = [0.3, -0.2]
    assert b.eval_features(tensor, x).size == tensor.feature_count


def test_tensor_product_features_are_products():
    spec = b.BasisSpec.fourier(3, 1.5, dims=2, composition="tensor_product")
    d1 = b.BasisSpec.fourier(3, 1.5)
    x = np.array([0.4, -0.9])
    f1 = b.eval_features(d1, x[:1])
    f2 = b.eval_features(d1, x[1:])
    expect = np.einsum("i,j->ij", f1, f2).ravel()
    got = np.sort(b.eval_features(spec, x))
    npt.assert_allclose(np.sort(expect), got, atol=1e-14)


def test_composite_concatenates_parts():
    part_lin = b.BasisSpec.linear(2)
    part_four = b.BasisSpec.fourier(5, 2.0)
    spec = b.BasisSpec.composite([(part_lin, (0, 1)), (part_four, (1,))], 2)
    assert spec.feature_count == 7
    x = np.array([0.25, -0.5])
    got = b.eval_features(spec, x)
    npt.assert_allclose(got[:2], x, atol=0)
    npt.assert_allclose(got[2:], b.eval_features(part_four, x[1:]),
                        atol=1e-14)


def test_composite_conflicting_half_widths_rejected():
    p1 = b.BasisSpec.fourier(3, 1.0)
    p2 = b.BasisSpec.fourier(3, 2.0)
    with pytest.raises(ValueError, match="half-width"):
        b.compile_table(b.BasisSpec.composite([(p1, (0,)), (p2, (0,))], 1))


def test_spec_validation_errors():
    with pytest.raises(ValueError):
        b.BasisSpec.fourier(0, 1.0)
    with pytest.raises(ValueError):
        b.BasisSpec.fourier(3, -1.0)
    with pytest.raises(ValueError):
        b.BasisSpec.fourier(3, float("inf"))


def test_eval_rejects_bad_input():
    spec = b.BasisSpec.fourier(3, 1.0)
    with pytest.raises(ValueError):
        b.eval_features(spec, [float("nan")])
    with pytest.raises(b.DimensionMismatchError):
        b.eval_features(spec, [0.1, 0.2])


def test_precision_none_is_zero():
    spec = b.BasisSpec.fourier(6, 1.0)
    P = b.build_precision(spec, b.PriorSpec("none", 3.0))
    npt.assert_array_equal(P, np.zeros((6, 6)))


def test_precision_flat():
    spec = b.BasisSpec.fourier(5, 2.0)
    P = b.build_precision(spec, b.PriorSpec("flat", 0.1))
    npt.assert_allclose(P, 0.1 * np.eye(5), atol=0)


def test_precision_frequency_squared_example():
    spec = b.BasisSpec.fourier(5, 2.0)
    P = b.build_precision(spec, b.PriorSpec("frequency_squared", 1.0))
    npt.assert_allclose(np.diag(P), [1.0, 1.0, 1.0, 4.0, 4.0], atol=0)


def test_precision_monotone_in_order():
    spec = b.BasisSpec.fourier(13, 1.0)
    orders = b.frequency_orders(spec)
    P = np.diag(b.build_precision(spec, b.PriorSpec("frequency_squared", 0.7)))
    idx = np.argsort(orders)
    assert np.all(np.diff(P[idx]) >= 0)


def test_tensor_frequency_orders_round_up_euclidean():
    """A feature pairing frequency-1 factors in both dimensions has
    order ceil(sqrt(2)) = 2."""
    spec = b.BasisSpec.fourier(3, 1.0, dims=2, composition="tensor_product")
    orders = b.frequency_orders(spec)
    table = b.compile_table(spec)
    norms = np.sqrt((table.freq.astype(float) ** 2).sum(axis=1))
    npt.assert_array_equal(orders, np.ceil(norms - 1e-12).astype(int))
    # spot-check the mixed (1,1) feature explicitly
    mixed = np.flatnonzero((table.freq == 1).all(axis=1))
    assert orders[mixed[0]] == 2


def test_precision_rejects_negative_lambda():
    with pytest.raises(ValueError):
        b.PriorSpec("flat", -0.5)


def test_spec_round_trips_through_dict():
    for spec in (
        b.BasisSpec.fourier(7, 2.5),
        b.BasisSpec.fourier(4, 1.0, dims=2, composition="additive"),
        b.BasisSpec.composite(
            [(b.BasisSpec.linear(2), (0, 1)),
             (b.BasisSpec.fourier(5, 3.0), (0,))], 2),
    ):
        again = b.spec_from_dict(spec.to_dict())
        assert again == spec
        assert again.feature_count == spec.feature_count
