from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ivbounds import bounds, data
from ivbounds.data import OutcomeRange
from ivbounds.rng import stream_rng

UNIT = OutcomeRange(0.0, 1.0)


def test_partition_assignment_validation():
    with pytest.raises(ValueError):
        bounds.PartitionAssignment(np.array([[0.5, 0.4]]), "soft")  # rows must sum to 1
    with pytest.raises(ValueError):
        bounds.PartitionAssignment(np.array([[0.5, 0.5]]), "hard")  # hard must be one-hot
    pa = bounds.PartitionAssignment.from_labels(np.array([0, 1, 1, 0]), k=3)
    np.testing.assert_allclose(pa.cell_masses, [0.5, 0.5, 0.0])
    assert pa.cell_masses.sum() == pytest.approx(1.0)


# ------------------------------------------------------------ aggregates


def test_aggregate_constant_nuisances_recover_constant():
    c, p = 0.37, 0.6
    rng = stream_rng(0, "agg")
    n = 100_000
    z = rng.normal(size=n)
    a = (rng.random(n) < p).astype(int)
    weights = bounds.PartitionAssignment.from_labels((z > 0).astype(int), 2).weights
    values, valid = bounds.mu_phi_cells(np.full(n, c), np.full(n, p), a, weights, arm=1)
    assert valid.all()
    assert np.all(np.abs(values - c) < 0.02)


def test_aggregate_single_cell_reduces_to_simple_ratio():
    rng = stream_rng(1, "agg")
    n = 50
    mu = rng.normal(size=n)
    eta = rng.random(n)
    a = (rng.random(n) < 0.5).astype(int)
    weights = np.ones((n, 1))
    values, valid = bounds.mu_phi_cells(mu, eta, a, weights, arm=1)
    expected = np.sum(mu * eta) / np.sum(a == 1)
    assert valid[0]
    assert values[0] == pytest.approx(expected, rel=1e-12)


def test_aggregate_empty_cell_arm_raises_with_indices():
    mu = np.array([1.0, 2.0])
    eta = np.array([0.5, 0.5])
    a = np.array([0, 0])
    weights = np.array([[1.0, 0.0], [1.0, 0.0]])
    values, valid = bounds.mu_phi_cells(mu, eta, a, weights, arm=1)
    assert not valid.any()

    nuisance = SimpleNamespace(
        mu=SimpleNamespace(predict_pairwise=lambda xq, z: (np.ones((1, 2)), np.ones((1, 2)))),
        pi=SimpleNamespace(predict_pairwise=lambda xq, z: np.full((1, 2), 0.5)),
        eta=SimpleNamespace(predict=lambda z: np.full(2, 0.5)),
    )
    assignment = bounds.PartitionAssignment(weights, "hard")
    with pytest.raises(bounds.EmptyCellError) as exc:
        bounds.aggregate_mu_phi(nuisance, assignment, np.zeros((2, 1)), a, 0.0, cell=0, arm=1)
    assert (exc.value.cell, exc.value.arm) == (0, 1)
    with pytest.raises(bounds.EmptyCellError):
        bounds.aggregate_pi_phi(nuisance, assignment, np.zeros((2, 1)), 0.0, cell=1)


def test_pi_aggregate_constant_is_exact():
    rng = stream_rng(2, "agg")
    weights = bounds.PartitionAssignment.from_labels(rng.integers(0, 3, 200), 3).weights
    values, valid = bounds.pi_phi_cells(np.full(200, 0.42), weights)
    np.testing.assert_allclose(values[valid], 0.42, atol=1e-12)


def test_pi_aggregate_separable_split():
    z = np.linspace(-1, 1, 400)
    pi_at_x = (z > 0).astype(np.float64)
    weights = bounds.PartitionAssignment.from_labels((z > 0).astype(int), 2).weights
    values, valid = bounds.pi_phi_cells(pi_at_x, weights)
    assert valid.all()
    np.testing.assert_array_equal(values, [0.0, 1.0])


def _synthetic_mu(x, z):
    return 0.3 + 0.2 * x + 0.1 * np.sin(3.0 * z)


def _synthetic_eta(z):
    return 1.0 / (1.0 + np.exp(-1.2 * z))


def _synthetic_pi(x, z):
    return 0.5 + 0.3 * np.tanh(z) + 0.1 * x


def test_plugin_aggregates_match_quadrature_oracle():
    # Fixed synthetic nuisances, dataset-1 instrument law, hard split at 0,
    # treatments sampled from the same eta so the population weight matches.
    n = 100_000
    x = 0.3
    z = data._mixture_instrument(n, 5)
    a = (stream_rng(5, "treat").random(n) < _synthetic_eta(z)).astype(int)
    weights = bounds.PartitionAssignment.from_labels((z >= 0).astype(int), 2).weights

    mu_vals, _ = bounds.mu_phi_cells(_synthetic_mu(x, z), _synthetic_eta(z), a, weights, arm=1)
    pi_vals, _ = bounds.pi_phi_cells(_synthetic_pi(x, z), weights)
    for cell, (lo, hi) in enumerate([(-1.0, 0.0), (0.0, 1.0)]):
        mu_pop = bounds.population_aggregate_mu(_synthetic_mu, _synthetic_eta, lo, hi, x, arm=1)
        pi_pop = bounds.population_aggregate_pi(_synthetic_pi, lo, hi, x)
        assert abs(mu_vals[cell] - mu_pop) < 0.02
        assert abs(pi_vals[cell] - pi_pop) < 0.01


# ------------------------------------------------------------ bound algebra


def test_pairwise_bound_matrix_hand_example():
    pi = np.array([0.8, 0.3])
    mu1 = np.array([0.6, 0.0])
    mu0 = np.array([0.0, 0.2])
    b_plus, b_minus = bounds.pairwise_bound_matrix(pi, mu1, mu0, UNIT)
    assert b_plus[0, 1] == pytest.approx(0.54, abs=1e-12)
    assert b_minus[0, 1] == pytest.approx(0.04, abs=1e-12)


def test_point_identification_when_propensities_saturate():
    pi = np.array([1.0, 0.0])
    mu1 = np.array([0.7, 0.4])
    mu0 = np.array([0.5, 0.2])
    b_plus, b_minus = bounds.pairwise_bound_matrix(pi, mu1, mu0, UNIT)
    assert b_plus[0, 1] == pytest.approx(0.7 - 0.2, abs=1e-12)
    assert b_minus[0, 1] == pytest.approx(0.7 - 0.2, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.floats(min_value=0, max_value=1), min_size=2, max_size=6),
    st.floats(min_value=-2, max_value=2),
    st.floats(min_value=0.1, max_value=3),
)
def test_pairwise_width_identity(pis, s1, width):
    rng = OutcomeRange(s1, s1 + width)
    pi = np.asarray(pis)
    k = len(pi)
    mu1 = np.linspace(-1, 1, k)
    mu0 = np.linspace(1, -1, k)
    b_plus, b_minus = bounds.pairwise_bound_matrix(pi, mu1, mu0, rng)
    expected = ((1.0 - pi)[:, None] + pi[None, :]) * rng.width
    np.testing.assert_allclose(b_plus - b_minus, expected, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(min_value=0, max_value=1), st.floats(-5, 5), st.floats(-5, 5))
def test_k1_width_is_outcome_range(pi, mu1, mu0):
    lower, upper, _, _ = bounds.discrete_instrument_bounds(
        np.array([pi]), np.array([mu1]), np.array([mu0]), UNIT
    )
    assert upper - lower == pytest.approx(UNIT.width, abs=1e-9)


def test_tightest_bounds_brute_force_equivalence():
    rng = stream_rng(3, "bf")
    for _ in range(50):
        k = int(rng.integers(1, 6))
        b_plus = rng.normal(size=(k, k))
        b_minus = rng.normal(size=(k, k))
        # Inject ties to exercise the lexicographic rule.
        if k > 1:
            b_plus[0, 0] = b_plus[k - 1, k - 1] = b_plus.min() - 1.0
        lower, upper, lower_pair, upper_pair = bounds.tightest_bounds(b_plus, b_minus)
        flat_up = min(((b_plus[l, m], (l, m)) for l in range(k) for m in range(k)), key=lambda t: (t[0], t[1]))
        flat_lo = max(((b_minus[l, m], (l, m)) for l in range(k) for m in range(k)), key=lambda t: (t[0], [-v for v in t[1]]))
        assert upper == flat_up[0]
        assert tuple(upper_pair) == flat_up[1]
        assert lower == flat_lo[0]
        assert tuple(lower_pair) == flat_lo[1]


def test_single_dominating_pair_returned_with_indices():
    b_plus = np.full((3, 3), 5.0)
    b_plus[1, 2] = -1.0
    b_minus = np.full((3, 3), -5.0)
    b_minus[2, 0] = 2.0
    lower, upper, lower_pair, upper_pair = bounds.tightest_bounds(b_plus, b_minus)
    assert (upper, tuple(upper_pair)) == (-1.0, (1, 2))
    assert (lower, tuple(lower_pair)) == (2.0, (2, 0))


def test_grid_reduction_matches_per_point_reduction():
    rng = stream_rng(4, "grid")
    nq, k = 23, 5
    rep = bounds.RepresentationNuisance(
        x=np.linspace(-1, 1, nq),
        pi=rng.random((nq, k)),
        mu1=rng.normal(size=(nq, k)),
        mu0=rng.normal(size=(nq, k)),
        valid_l=np.array([True, True, False, True, True]),
        valid_m=np.array([True, False, True, True, True]),
    )
    pair = bounds.bounds_on_grid(rep, UNIT)
    for i in range(nq):
        b_plus, b_minus = bounds.pairwise_bound_matrix(rep.pi[i], rep.mu1[i], rep.mu0[i], UNIT)
        lo, up, lo_pair, up_pair = bounds.tightest_bounds(b_plus, b_minus, rep.valid_l, rep.valid_m)
        assert pair.lower[i] == lo
        assert pair.upper[i] == up
        np.testing.assert_array_equal(pair.lower_pair[i], lo_pair)
        np.testing.assert_array_equal(pair.upper_pair[i], up_pair)


def test_duplicate_cell_leaves_bounds_unchanged():
    rng = stream_rng(5, "dup")
    nq, k = 11, 3
    pi = rng.random((nq, k))
    mu1 = rng.normal(size=(nq, k))
    mu0 = rng.normal(size=(nq, k))
    base = bounds.discrete_bounds_on_grid(np.linspace(-1, 1, nq), pi, mu1, mu0, UNIT)
    dup = bounds.discrete_bounds_on_grid(
        np.linspace(-1, 1, nq),
        np.concatenate([pi, pi[:, :1]], axis=1),
        np.concatenate([mu1, mu1[:, :1]], axis=1),
        np.concatenate([mu0, mu0[:, :1]], axis=1),
        UNIT,
    )
    np.testing.assert_allclose(dup.lower, base.lower, atol=1e-12)
    np.testing.assert_allclose(dup.upper, base.upper, atol=1e-12)


def test_no_valid_pair_raises():
    with pytest.raises(bounds.EmptyCellError):
        bounds.tightest_bounds(np.zeros((2, 2)), np.zeros((2, 2)), np.array([False, False]), np.array([True, True]))


# ------------------------------------------------- discrete DGP validity


def _enumerable_dgp():
    pz = {0: 0.4, 1: 0.6}
    pu = {0: 0.7, 1: 0.3}

    def prop(z, u, x):
        return 1.0 / (1.0 + np.exp(-(1.5 * z - 0.8 * u + 0.4 * x - 0.2)))

    def outcome(x, a, u):
        return 1.0 / (1.0 + np.exp(-(0.8 * a + 0.5 * x - 0.4 * u + 0.3 * a * x)))

    return pz, pu, prop, outcome


def test_discrete_bounds_contain_cate_on_enumerable_dgp():
    pz, pu, prop, outcome = _enumerable_dgp()
    x_grid = np.linspace(-1, 1, 101)
    levels = [0, 1]
    pi = np.empty((101, 2))
    mu1 = np.empty((101, 2))
    mu0 = np.empty((101, 2))
    tau = np.empty(101)
    for i, x in enumerate(x_grid):
        tau[i] = sum(pu[u] * (outcome(x, 1, u) - outcome(x, 0, u)) for u in (0, 1))
        for j, z in enumerate(levels):
            pi[i, j] = sum(pu[u] * prop(z, u, x) for u in (0, 1))
            for arm in (0, 1):
                w = {u: pu[u] * (prop(z, u, x) if arm == 1 else 1 - prop(z, u, x)) for u in (0, 1)}
                val = sum(w[u] * outcome(x, arm, u) for u in (0, 1)) / sum(w.values())
                (mu1 if arm == 1 else mu0)[i, j] = val
    pair = bounds.discrete_bounds_on_grid(x_grid, pi, mu1, mu0, UNIT)
    assert np.all(pair.lower <= tau + 1e-12)
    assert np.all(tau <= pair.upper + 1e-12)
    del pz


# ------------------------------------------------- population oracle


@pytest.fixture(scope="module")
def d1_range():
    split = data.split_dataset(data.generate_dataset1(2000, 0), 0)
    return data.outcome_range_from_train(split.train)


def test_population_oracle_dataset1_contains_cate(d1_range):
    x_grid = np.linspace(-1, 1, 21)
    pair = bounds.population_bounds_oracle(1, [0.0], d1_range, x_grid, n_z=801, n_u=401, n_s=801)
    tau = data.tau_dataset12(x_grid)
    assert np.all(pair.lower <= tau)
    assert np.all(tau <= pair.upper)


def test_population_oracle_single_cell_width(d1_range):
    x_grid = np.linspace(-1, 1, 5)
    pair = bounds.population_bounds_oracle(1, [], d1_range, x_grid, n_z=401, n_u=201, n_s=401,
                                           check_convergence=False)
    np.testing.assert_allclose(pair.width, d1_range.width, atol=1e-9)


def test_population_oracle_flags_nonconvergence(d1_range):
    with pytest.raises(bounds.QuadratureError):
        bounds.population_bounds_oracle(1, [0.0], d1_range, np.linspace(-1, 1, 3), n_z=7, n_u=5, n_s=7)


def test_dataset3_pattern_enumeration_matches_level_bounds(d1_range):
    x_grid = np.linspace(-1, 1, 11)
    pi6, mu16, mu06, _ = bounds.dataset3_level_nuisances(x_grid, n_u=2001)
    level_pair = bounds.discrete_bounds_on_grid(x_grid, pi6, mu16, mu06, d1_range)
    # One level per first-five-bit pattern; nuisances depend on the pattern
    # only through its popcount, so bounds must agree exactly.
    patterns = np.array([bin(p).count("1") for p in range(32)])
    pi32, mu132, mu032, _ = bounds.dataset3_level_nuisances(x_grid, n_u=2001, levels=patterns)
    pattern_pair = bounds.discrete_bounds_on_grid(x_grid, pi32, mu132, mu032, d1_range)
    np.testing.assert_allclose(pattern_pair.lower, level_pair.lower, atol=1e-12)
    np.testing.assert_allclose(pattern_pair.upper, level_pair.upper, atol=1e-12)


# ------------------------------------------------- csv round trip


def test_bound_csv_round_trip(tmp_path):
    rng = stream_rng(6, "csv")
    pair = bounds.discrete_bounds_on_grid(
        np.linspace(-1, 1, 9), rng.random((9, 3)), rng.normal(size=(9, 3)), rng.normal(size=(9, 3)), UNIT
    )
    path = tmp_path / "bounds.csv"
    pair.to_csv(path)
    loaded = bounds.BoundPair.from_csv(path)
    np.testing.assert_array_equal(loaded.x, pair.x)
    np.testing.assert_array_equal(loaded.lower, pair.lower)
    np.testing.assert_array_equal(loaded.upper, pair.upper)
    np.testing.assert_array_equal(loaded.upper_pair, pair.upper_pair)
    np.testing.assert_array_equal(loaded.lower_pair, pair.lower_pair)
