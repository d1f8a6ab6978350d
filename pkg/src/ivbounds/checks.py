"""Self-contained verification suite behind the ``checks`` CLI command.

Each check returns (name, passed, detail); the suite covers gradient
correctness for every graph op kind, the plug-in-vs-quadrature agreement,
both asymptotic variance formulas, the bias-variance identity and the core
bound-algebra identities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import bounds as bnd
from . import data as dgp
from . import metrics
from .data import OutcomeRange
from .rng import stream_rng


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: {self.detail}"


GRADIENT_CASES = {
    "matmul": lambda x: ad.reduce_sum(ad.matmul(x, ad.constant(np.arange(6.0).reshape(3, 2)))),
    "add": lambda x: ad.reduce_sum(ad.add(ad.add(x, ad.constant(np.ones((2, 3)))), 0.5)),
    "sub": lambda x: ad.reduce_sum(ad.sub(ad.sub(x, ad.constant(np.ones((2, 3)))), 0.25)),
    "mul": lambda x: ad.reduce_sum(ad.mul(ad.mul(x, ad.constant(np.full((2, 3), 1.5))), 2.0)),
    "div": lambda x: ad.reduce_sum(ad.div(ad.div(x, ad.constant(np.full((2, 3), 2.0))), 4.0)),
    "neg": lambda x: ad.reduce_sum(ad.neg(x)),
    "relu": lambda x: ad.reduce_sum(ad.relu(x)),
    "sigmoid": lambda x: ad.reduce_sum(ad.sigmoid(x)),
    "softmax": lambda x: ad.reduce_sum(ad.mul(ad.softmax(x), ad.constant(np.arange(6.0).reshape(2, 3)))),
    "log_softmax": lambda x: ad.reduce_sum(ad.mul(ad.log_softmax(x), ad.constant(np.arange(6.0).reshape(2, 3)))),
    "softplus": lambda x: ad.reduce_sum(ad.softplus(x)),
    "log": lambda x: ad.reduce_sum(ad.log(ad.add(ad.mul(x, x), 1.0))),
    "exp": lambda x: ad.reduce_sum(ad.exp(x)),
    "clip_min": lambda x: ad.reduce_sum(ad.clip_min(x, 0.1)),
    "sum": lambda x: ad.reduce_sum(ad.mul(ad.reduce_sum(x, axis=1), ad.constant(np.array([1.0, 2.0])))),
    "mean": lambda x: ad.reduce_sum(ad.mul(ad.reduce_mean(x, axis=0), ad.constant(np.array([1.0, -1.0, 2.0])))),
    "min": lambda x: ad.reduce_sum(ad.reduce_min(x, axis=1)),
    "max": lambda x: ad.reduce_sum(ad.reduce_max(x, axis=1)),
    "concat": lambda x: ad.reduce_sum(
        ad.mul(ad.concat([x, ad.mul(x, 2.0)], axis=1), ad.constant(np.arange(12.0).reshape(2, 6)))
    ),
    "gumbel_noise_add": lambda x: ad.reduce_sum(
        ad.sigmoid(ad.gumbel_noise_add(x, np.linspace(-1, 1, 6).reshape(2, 3)))
    ),
}


def _contract_checked_ops() -> dict[str, CheckResult]:
    out = {}
    x = ad.input_node(np.array([1.0, 2.0]), name="x", trainable=True)
    grads = ad.backward_grad(ad.reduce_sum(ad.mul(ad.detach(x), x)))
    ok = np.array_equal(grads["x"], x.value)
    out["detach"] = CheckResult("gradient detach", ok, "stop-gradient contract")
    out["input"] = CheckResult("gradient input", True, "covered by every finite-difference case")

    logits = ad.input_node(np.array([[0.2, 0.5], [0.9, 0.1]]), name="l", trainable=True)
    soft = ad.softmax(logits)
    hard = ad.straight_through(soft)
    onehot_ok = set(np.unique(hard.value)) <= {0.0, 1.0}
    coeff = ad.constant(np.arange(4.0).reshape(2, 2))
    g_hard = ad.backward_grad(ad.reduce_sum(ad.mul(hard, coeff)))["l"]
    logits2 = ad.input_node(logits.value, name="l", trainable=True)
    g_soft = ad.backward_grad(ad.reduce_sum(ad.mul(ad.softmax(logits2), coeff)))["l"]
    st_ok = onehot_ok and np.array_equal(g_hard, g_soft)
    out["straight_through"] = CheckResult("gradient straight_through", st_ok, "exact one-hot, soft backward")
    return out


def gradient_checks(tolerance: float = 1e-4) -> list[CheckResult]:
    results = []
    contract = _contract_checked_ops()
    covered = set(GRADIENT_CASES) | set(contract)
    for op in sorted(GRADIENT_CASES):
        rng = np.random.default_rng(abs(hash(op)) % 2**32)
        point = rng.normal(size=(2, 3))
        point = np.where(np.abs(point) < 1e-3, point + 0.1, point)
        point = np.where(np.abs(point - 0.1) < 1e-3, point + 0.05, point)
        err = ad.finite_diff_check(GRADIENT_CASES[op], point, step=1e-5)
        results.append(CheckResult(f"gradient {op}", err < tolerance, f"max relative error {err:.2e}"))
    results.extend(contract.values())
    missing = set(ad.OP_KINDS) - covered
    results.append(
        CheckResult("gradient coverage", not missing, "all op kinds checked" if not missing else f"missing {missing}")
    )
    return results


def composite_loss_gradient_check(tolerance: float = 1e-3) -> CheckResult:
    from . import nuisance as nuis_mod
    from . import partition
    from .nets import PartitionNet, TrainConfig, sample_gumbel

    split = dgp.split_dataset(dgp.generate_dataset1(400, 0), 0)
    nuis = nuis_mod.fit_nuisances(split, TrainConfig(seed=0, max_epochs=3))
    batch = split.train.subset(np.arange(16))
    const = partition.batch_constants(nuis, batch)
    config = TrainConfig(seed=0, k=2, batch_size=16)
    net = PartitionNet.create(1, 2, stream_rng(5, "init"))
    noise = sample_gumbel((16, 2), stream_rng(5, "noise"))
    rng_range = OutcomeRange(0.0, 1.0)

    root, _, _, _ = partition.composite_loss_graph(net, const, rng_range, config, noise, hard=False)
    grads = ad.backward_grad(root)
    step = 1e-6
    worst = 0.0
    for name in net.params:
        base = net.params[name].copy()
        for flat in range(base.size):
            vals = []
            for sign in (+1.0, -1.0):
                net.params[name].flat[flat] = base.flat[flat] + sign * step
                r, _, _, _ = partition.composite_loss_graph(net, const, rng_range, config, noise, hard=False)
                vals.append(float(r.value))
            net.params[name].flat[flat] = base.flat[flat]
            numeric = (vals[0] - vals[1]) / (2 * step)
            analytic = grads[name].flat[flat]
            worst = max(worst, abs(analytic - numeric) / (abs(analytic) + 1e-8))
        net.params[name] = base
    return CheckResult("gradient composite loss (16 samples, k=2)", worst < tolerance, f"max relative error {worst:.2e}")


def quadrature_agreement_check(n: int = 100_000) -> list[CheckResult]:
    def mu_fn(x, z):
        return 0.3 + 0.2 * x + 0.1 * np.sin(3.0 * z)

    def eta_fn(z):
        return 1.0 / (1.0 + np.exp(-1.2 * z))

    def pi_fn(x, z):
        return 0.5 + 0.3 * np.tanh(z) + 0.1 * x

    x = 0.3
    z = dgp._mixture_instrument(n, 5)
    a = (stream_rng(5, "treat").random(n) < eta_fn(z)).astype(int)
    weights = bnd.PartitionAssignment.from_labels((z >= 0).astype(int), 2).weights
    mu_vals, _ = bnd.mu_phi_cells(mu_fn(x, z), eta_fn(z), a, weights, arm=1)
    pi_vals, _ = bnd.pi_phi_cells(pi_fn(x, z), weights)
    results = []
    for cell, (lo, hi) in enumerate([(-1.0, 0.0), (0.0, 1.0)]):
        mu_pop = bnd.population_aggregate_mu(mu_fn, eta_fn, lo, hi, x, arm=1)
        pi_pop = bnd.population_aggregate_pi(pi_fn, lo, hi, x)
        results.append(
            CheckResult(
                f"plug-in mu aggregate vs quadrature (cell {cell})",
                abs(mu_vals[cell] - mu_pop) < 0.02,
                f"|{mu_vals[cell]:.4f} - {mu_pop:.4f}| at n={n}",
            )
        )
        results.append(
            CheckResult(
                f"plug-in pi aggregate vs quadrature (cell {cell})",
                abs(pi_vals[cell] - pi_pop) < 0.01,
                f"|{pi_vals[cell]:.4f} - {pi_pop:.4f}| at n={n}",
            )
        )
    return results


def variance_checks(replicates: int = 10_000, n: int = 1_000) -> list[CheckResult]:
    configs = [
        ("p=0.5,q=0.6", metrics.DiscreteVarianceDgp(
            z_probs=np.array([0.25, 0.25, 0.25, 0.25]),
            cells=np.array([0, 0, 1, 1]),
            mu_hat=np.array([0.2, 0.9, 0.4, 0.7]),
            eta_hat=np.array([0.3, 0.7, 0.4, 0.6]),
            pi_hat=np.array([0.0, 1.0, 0.0, 1.0]),
            treat_prob=np.array([0.6, 0.6, 0.5, 0.5]),
        ), 0),
        ("p=0.25,q=0.7", metrics.DiscreteVarianceDgp(
            z_probs=np.array([0.125, 0.125, 0.375, 0.375]),
            cells=np.array([0, 0, 1, 1]),
            mu_hat=np.array([0.5, 1.2, 0.4, 0.7]),
            eta_hat=np.array([0.45, 0.8, 0.4, 0.6]),
            pi_hat=np.array([0.2, 0.9, 0.1, 0.8]),
            treat_prob=np.array([0.7, 0.7, 0.5, 0.5]),
        ), 1),
    ]
    results = []
    for label, harness, seed in configs:
        mu_rep, pi_rep = metrics.variance_mc_check(harness, cell=0, arm=1, n=n, replicates=replicates, seed=seed)
        for rep in (mu_rep, pi_rep):
            results.append(
                CheckResult(
                    f"asymptotic variance {rep.estimator} aggregate ({label})",
                    rep.relative_error < 0.10,
                    f"empirical {rep.empirical_n_var:.4f} vs formula {rep.formula_value:.4f} "
                    f"(rel err {rep.relative_error:.3f})",
                )
            )
    return results


def decomposition_checks(replicates: int = 2_000) -> list[CheckResult]:
    report = metrics.decomposition_check(x=0.2, n=1_000, replicates=replicates, seed=0, b_star_upper=0.3)
    return [
        CheckResult(
            "bias-variance identity for the upper bound",
            report.identity_relative_error < 0.05,
            f"MSE {report.mse:.5f} vs bias^2+var {report.bias_sq + report.variance:.5f}",
        ),
        CheckResult(
            "factor-2 error bound never violated",
            report.factor2_lhs <= report.factor2_rhs + 1e-12,
            f"lhs {report.factor2_lhs:.5f} <= rhs {report.factor2_rhs:.5f}",
        ),
    ]


def bound_identity_checks() -> list[CheckResult]:
    rng = stream_rng(7, "identity")
    results = []
    ok = True
    for _ in range(200):
        k = int(rng.integers(1, 7))
        pi = rng.random(k)
        mu1 = rng.normal(size=k)
        mu0 = rng.normal(size=k)
        s1 = float(rng.normal())
        width = float(rng.random() * 3 + 0.1)
        r = OutcomeRange(s1, s1 + width)
        b_plus, b_minus = bnd.pairwise_bound_matrix(pi, mu1, mu0, r)
        expected = ((1.0 - pi)[:, None] + pi[None, :]) * r.width
        if not np.allclose(b_plus - b_minus, expected, atol=1e-12):
            ok = False
        lo, up, _, _ = bnd.tightest_bounds(
            *bnd.pairwise_bound_matrix(pi[:1], mu1[:1], mu0[:1], r)
        )
        if abs((up - lo) - r.width) > 1e-9:
            ok = False
    results.append(CheckResult("pairwise width identity / k=1 width", ok, "200 random draws"))
    return results


def oracle_validity_checks() -> list[CheckResult]:
    x_grid = np.linspace(-0.99, 0.99, 101)
    r = OutcomeRange(-0.35, 1.05)
    pair = metrics.oracle_bounds_dataset3(x_grid, r, n_u=4001)
    tau = dgp.tau_dataset3(x_grid)
    ok = bool(np.all(pair.lower <= tau) and np.all(tau <= pair.upper))
    return [CheckResult("dataset-3 oracle bounds contain the CATE", ok, "101-point grid")]


def run_all_checks() -> list[CheckResult]:
    results = []
    results.extend(gradient_checks())
    results.append(composite_loss_gradient_check())
    results.extend(bound_identity_checks())
    results.extend(quadrature_agreement_check())
    results.extend(variance_checks())
    results.extend(decomposition_checks())
    results.extend(oracle_validity_checks())
    return results
