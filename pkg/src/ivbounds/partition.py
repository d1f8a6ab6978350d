"""Second stage: train the partition net on the composite loss.

Per batch, soft (straight-through) cell weights feed the plug-in
aggregates, the pairwise bound matrices and their min/max reduction; the
training loss is

    L = L_b + lam * L_reg + gamma * L_aux

with L_b the mean bound width over the batch, L_reg the negative
log-likelihood of the batch cell masses and L_aux the cross-entropy of the
auxiliary head against the (stop-gradient) sampled assignments. First-stage
nuisances are frozen throughout; validation and final bound evaluation use
noise-free argmax assignments.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import bounds as bnd
from .data import DatasetSplit, OutcomeRange, SampleBatch
from .nets import PartitionNet, TrainConfig, TrainLog, sample_gumbel, train_with_early_stopping
from .nuisance import NuisanceSet
from .rng import stream_rng

logger = logging.getLogger(__name__)

MASS_CLAMP = 1e-8


@dataclass
class CompositeLossBreakdown:
    l_b: float
    l_reg: float
    l_aux: float
    lam: float
    gamma: float

    @property
    def total(self) -> float:
        return self.l_b + self.lam * self.l_reg + self.gamma * self.l_aux


@dataclass
class BatchConstants:
    """Frozen nuisance evaluations for one set of samples.

    Queries and aggregation samples are the same batch: m1[i, j] is the
    arm-1 outcome prediction at (x_i, z_j).
    """

    m1: np.ndarray
    m0: np.ndarray
    p: np.ndarray
    eta: np.ndarray
    a: np.ndarray
    z: np.ndarray
    x: np.ndarray

    def subset(self, idx: np.ndarray) -> "BatchConstants":
        grid = np.ix_(idx, idx)
        return BatchConstants(
            m1=self.m1[grid], m0=self.m0[grid], p=self.p[grid],
            eta=self.eta[idx], a=self.a[idx], z=self.z[idx], x=self.x[idx],
        )

    def __len__(self) -> int:
        return len(self.a)


def batch_constants(nuisances: NuisanceSet, batch: SampleBatch) -> BatchConstants:
    m0, m1 = nuisances.mu.predict_pairwise(batch.x, batch.z)
    return BatchConstants(
        m1=m1,
        m0=m0,
        p=nuisances.pi.predict_pairwise(batch.x, batch.z),
        eta=nuisances.eta.predict(batch.z),
        a=batch.a.astype(np.float64),
        z=batch.z,
        x=batch.x,
    )


def _validity(weights: np.ndarray, a: np.ndarray):
    den1 = weights.T @ (a == 1).astype(np.float64)
    den0 = weights.T @ (a == 0).astype(np.float64)
    mass = weights.sum(axis=0)
    return (den1 > 0) & (mass > 0), (den0 > 0) & (mass > 0)


def _selection(valid: np.ndarray) -> np.ndarray:
    k = len(valid)
    return np.eye(k)[:, valid]


def _onehot_labels(weights_value: np.ndarray) -> np.ndarray:
    labels = np.zeros_like(weights_value)
    labels[np.arange(weights_value.shape[0]), np.argmax(weights_value, axis=1)] = 1.0
    return labels


def composite_loss_graph(net: PartitionNet, const: BatchConstants, rng_range: OutcomeRange,
                         config: TrainConfig, noise: np.ndarray | None, hard: bool = True):
    """Differentiable composite loss for one batch.

    Returns (root, parts, pnodes, info); ``parts['l_b']`` is None when no
    valid (l, m) pair exists, in which case the batch trains on the
    regularizers alone. Cells with an empty arm are dropped from the
    pairwise reduction via constant selection matrices.
    """
    n = len(const)
    weights, aux_logits, pnodes = net.assignment_graph(const.z, noise, config.temperature, hard)

    # Mass penalty on the soft weights: straight-through hard masses can hit
    # exactly zero, where the clamped log has no gradient and a collapsed
    # cell would never be repopulated. The soft masses keep the restoring
    # force alive; in soft mode the two coincide.
    soft = weights.parents[0] if weights.op == "straight_through" else weights
    masses = ad.matmul(ad.constant(np.full((1, n), 1.0 / n)), soft)
    if float(np.min(masses.value)) < MASS_CLAMP:
        logger.warning("cell mass clamped at %g during loss evaluation", MASS_CLAMP)
    l_reg = ad.neg(ad.reduce_sum(ad.log(ad.clip_min(masses, MASS_CLAMP))))

    # Stop-gradient labels: the sampled discrete assignment, as a constant.
    labels = ad.constant(_onehot_labels(weights.value))
    l_aux = ad.neg(ad.reduce_mean(ad.reduce_sum(ad.mul(labels, ad.log_softmax(aux_logits)), axis=1)))

    valid_l, valid_m = _validity(weights.value, const.a)
    info = {"valid_l": valid_l, "valid_m": valid_m, "masses": masses.value.copy().ravel()}
    l_b = None
    if valid_l.any() and valid_m.any():
        ones_col = ad.constant(np.ones((n, 1)))
        a1 = ad.constant(const.a.reshape(1, n))
        a0 = ad.constant((1.0 - const.a).reshape(1, n))
        count_row = ad.constant(np.ones((1, n)))
        s_l = ad.constant(_selection(valid_l))
        s_m = ad.constant(_selection(valid_m))

        num1 = ad.matmul(ad.matmul(ad.constant(const.m1 * const.eta[None, :]), weights), s_l)
        den1 = ad.matmul(ones_col, ad.matmul(ad.matmul(a1, weights), s_l))
        mu1 = ad.div(num1, den1)
        num0 = ad.matmul(ad.matmul(ad.constant(const.m0 * (1.0 - const.eta)[None, :]), weights), s_m)
        den0 = ad.matmul(ones_col, ad.matmul(ad.matmul(a0, weights), s_m))
        mu0 = ad.div(num0, den0)

        pnum = ad.matmul(ad.constant(const.p), weights)
        mass_counts = ad.matmul(count_row, weights)
        pi_l = ad.div(ad.matmul(pnum, s_l), ad.matmul(ones_col, ad.matmul(mass_counts, s_l)))
        pi_m = ad.div(ad.matmul(pnum, s_m), ad.matmul(ones_col, ad.matmul(mass_counts, s_m)))

        a_up = ad.add(ad.mul(pi_l, mu1), ad.mul(1.0 - pi_l, rng_range.s2))
        a_lo = ad.add(ad.mul(pi_l, mu1), ad.mul(1.0 - pi_l, rng_range.s1))
        b_up = ad.add(ad.mul(1.0 - pi_m, mu0), ad.mul(pi_m, rng_range.s1))
        b_lo = ad.add(ad.mul(1.0 - pi_m, mu0), ad.mul(pi_m, rng_range.s2))
        upper = ad.sub(ad.reduce_min(a_up, axis=1), ad.reduce_max(b_up, axis=1))
        lower = ad.sub(ad.reduce_max(a_lo, axis=1), ad.reduce_min(b_lo, axis=1))
        l_b = ad.reduce_mean(ad.sub(upper, lower))
    else:
        logger.warning("batch has no valid (l, m) pair; bound-width term dropped")

    root = ad.add(l_reg * config.lam, l_aux * config.gamma) if l_b is None else ad.add(
        l_b, ad.add(l_reg * config.lam, l_aux * config.gamma)
    )
    parts = {"l_b": l_b, "l_reg": l_reg, "l_aux": l_aux}
    return root, parts, pnodes, info


def composite_losses(weights: np.ndarray, aux_logits: np.ndarray | None, const: BatchConstants,
                     rng_range: OutcomeRange, lam: float, gamma: float) -> tuple[CompositeLossBreakdown, dict]:
    """Numpy evaluation of the three loss terms for given cell weights."""
    masses = weights.mean(axis=0)
    if masses.min() < MASS_CLAMP:
        logger.warning("cell mass clamped at %g during loss evaluation", MASS_CLAMP)
    l_reg = float(-np.sum(np.log(np.maximum(masses, MASS_CLAMP))))

    if aux_logits is None:
        l_aux = 0.0
    else:
        labels = np.argmax(weights, axis=1)
        shifted = aux_logits - aux_logits.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        l_aux = float(-np.mean(logp[np.arange(len(labels)), labels]))

    valid_l, valid_m = _validity(weights, const.a)
    info = {"valid_l": valid_l, "valid_m": valid_m, "masses": masses}
    if valid_l.any() and valid_m.any():
        eta = const.eta
        den1 = weights.T @ (const.a == 1).astype(np.float64)
        den0 = weights.T @ (const.a == 0).astype(np.float64)
        mass_counts = weights.sum(axis=0)
        mu1 = np.divide((const.m1 * eta[None, :]) @ weights, den1[None, :], out=np.zeros((len(const), weights.shape[1])), where=den1[None, :] > 0)
        mu0 = np.divide((const.m0 * (1.0 - eta)[None, :]) @ weights, den0[None, :], out=np.zeros((len(const), weights.shape[1])), where=den0[None, :] > 0)
        pi = np.divide(const.p @ weights, mass_counts[None, :], out=np.zeros((len(const), weights.shape[1])), where=mass_counts[None, :] > 0)
        rep = bnd.RepresentationNuisance(x=const.x, pi=pi, mu1=mu1, mu0=mu0, valid_l=valid_l, valid_m=valid_m)
        pair = bnd.bounds_on_grid(rep, rng_range)
        l_b = float(np.mean(pair.width))
    else:
        l_b = np.inf
    return CompositeLossBreakdown(l_b=l_b, l_reg=l_reg, l_aux=l_aux, lam=lam, gamma=gamma), info


def _soft_weights(net: PartitionNet, z: np.ndarray, temperature: float,
                  rng: np.random.Generator | None) -> np.ndarray:
    logits = net.logits(z)
    if rng is not None:
        logits = logits + sample_gumbel(logits.shape, rng)
    shifted = logits / temperature
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def loss_bound(batch: SampleBatch, nuisances: NuisanceSet, net: PartitionNet, rng_range: OutcomeRange,
               temperature: float = 1.0, rng: np.random.Generator | None = None) -> float:
    """Mean bound width over the batch under soft assignments."""
    if len(batch) < 2:
        raise ValueError("need at least two samples")
    const = batch_constants(nuisances, batch)
    weights = _soft_weights(net, batch.z, temperature, rng)
    breakdown, _ = composite_losses(weights, None, const, rng_range, lam=0.0, gamma=0.0)
    return breakdown.l_b


def loss_reg(assignment: bnd.PartitionAssignment) -> float:
    """Negative log-likelihood of the cell masses (clamped at 1e-8)."""
    masses = assignment.cell_masses
    if masses.min() < MASS_CLAMP:
        logger.warning("cell mass clamped at %g in loss_reg", MASS_CLAMP)
    return float(-np.sum(np.log(np.maximum(masses, MASS_CLAMP))))


def loss_aux(z: np.ndarray, net: PartitionNet, rng: np.random.Generator | None = None,
             temperature: float = 1.0) -> float:
    """Cross-entropy of the auxiliary head against assignment labels."""
    h = net.logits(z)
    if rng is not None:
        h = h + sample_gumbel(h.shape, rng)
    labels = np.argmax(h / temperature, axis=1)
    from .nets import _as_col, _dense_np, _stack_np  # local to avoid cycle at import

    hidden = _stack_np(_as_col(z), net.params, "z_enc.", net.depth)
    aux = _dense_np(hidden, net.params, "aux")
    shifted = aux - aux.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return float(-np.mean(logp[np.arange(len(labels)), labels]))


def hard_assignment(net: PartitionNet, z: np.ndarray) -> bnd.PartitionAssignment:
    return bnd.PartitionAssignment.from_labels(net.assign_hard(z), net.k)


def validation_loss(net: PartitionNet, const: BatchConstants, rng_range: OutcomeRange,
                    config: TrainConfig) -> tuple[float, CompositeLossBreakdown, dict]:
    """Composite loss with deterministic hard assignments (no noise)."""
    weights = hard_assignment(net, const.z).weights
    from .nets import _as_col, _dense_np, _stack_np

    hidden = _stack_np(_as_col(const.z), net.params, "z_enc.", net.depth)
    aux = _dense_np(hidden, net.params, "aux")
    breakdown, info = composite_losses(weights, aux, const, rng_range, config.lam, config.gamma)
    return breakdown.total, breakdown, info


INIT_LOGIT_SCALE = 3.0


def _fresh_partition_net(split: DatasetSplit, config: TrainConfig, tag: str) -> PartitionNet:
    """Amplified, train-centered init: confident, balanced initial cells.

    The default tiny init leaves the logit spread far below the Gumbel
    noise scale, so assignments start as pure noise and training cannot
    bootstrap; amplifying and centering the logits on the training
    instruments starts from a crisp, data-dependent partition.
    """
    net = PartitionNet.create(split.train.d, config.k, stream_rng(config.seed, f"partition-init-{tag}"))
    for name in net.params:
        net.params[name] = net.params[name] * INIT_LOGIT_SCALE
    net.params["logits.b"] = net.params["logits.b"] - net.logits(split.train.z).mean(axis=0)
    return net


def _warm_start_to_labels(net: PartitionNet, z: np.ndarray, labels: np.ndarray,
                          config: TrainConfig, tag: str, epochs: int = 25) -> None:
    """Pre-train the assignment logits toward candidate cell labels."""
    from .nets import AdamState, adam_step

    onehot = np.zeros((len(labels), net.k))
    onehot[np.arange(len(labels)), labels] = 1.0
    state = AdamState.for_params(net.params)
    rng = stream_rng(config.seed, f"partition-warm-{tag}")
    for _ in range(epochs):
        perm = rng.permutation(len(labels))
        for lo in range(0, len(perm), config.batch_size):
            idx = perm[lo : lo + config.batch_size]
            if len(idx) < 2:
                continue
            pnodes = net.param_nodes()
            from .nets import _as_col, _dense, _stack

            h = _stack(ad.input_node(_as_col(z[idx])), pnodes, "z_enc.", net.depth)
            logits = _dense(h, pnodes, "logits")
            ce = ad.neg(ad.reduce_mean(ad.reduce_sum(ad.mul(ad.constant(onehot[idx]), ad.log_softmax(logits)), axis=1)))
            grads = ad.backward_grad(ce)
            adam_step(net.params, grads, state, config.learning_rate)


def _quantile_labels(values: np.ndarray, k: int) -> np.ndarray:
    edges = np.quantile(values, np.linspace(0, 1, k + 1)[1:-1])
    return np.digitize(values, edges)


def _candidate_nets(split: DatasetSplit, nuisances: NuisanceSet, config: TrainConfig) -> list[PartitionNet]:
    """Restart candidates: random init plus warm starts to cheap partitions.

    The warm starts seed qualitatively different basins (cells of similar
    predicted treatment probability; k-means cells of the raw instrument);
    the composite loss then refines each and validation picks the winner.
    """
    candidates = [_fresh_partition_net(split, config, "random")]
    if config.restarts >= 2 and config.k >= 2:
        eta_vals = nuisances.eta.predict(split.train.z)
        if len(np.unique(eta_vals)) >= config.k:
            net = _fresh_partition_net(split, config, "eta")
            _warm_start_to_labels(net, split.train.z, _quantile_labels(eta_vals, config.k), config, "eta")
            candidates.append(net)
    if config.restarts >= 3 and config.k >= 2:
        from .naive import kmeans_fit

        try:
            km = kmeans_fit(split.train.z, config.k, config.seed, n_restarts=3)
        except ValueError:
            km = None
        if km is not None:
            net = _fresh_partition_net(split, config, "kmeans")
            _warm_start_to_labels(net, split.train.z, km.assign(split.train.z), config, "kmeans")
            candidates.append(net)
    return candidates[: max(1, config.restarts)]


@dataclass
class Stage2Result:
    net: PartitionNet
    epoch_rows: list[dict]
    log: TrainLog
    restart: int
    val_total: float


def train_partition(split: DatasetSplit, nuisances: NuisanceSet, config: TrainConfig,
                    rng_range: OutcomeRange | None = None):
    """Algorithm body: per batch, assignments -> aggregates -> bounds -> loss
    -> gradient step; restarts from candidate inits, winner by hard-mode
    validation loss.

    Returns (net, epoch_rows, result). ``epoch_rows`` is the per-epoch log
    of the winning restart: mean train loss parts, hard-mode validation
    total, min validation cell mass.
    """
    if not nuisances.frozen:
        raise ValueError("first-stage nuisances must be frozen before the second stage")
    from .data import outcome_range_from_train

    rng_range = rng_range or outcome_range_from_train(split.train)
    train_const = batch_constants(nuisances, split.train)
    val_const = batch_constants(nuisances, split.val)

    best: Stage2Result | None = None
    for restart, net in enumerate(_candidate_nets(split, nuisances, config)):
        gumbel_rng = stream_rng(config.seed, f"partition-gumbel-{restart}")
        batch_parts: list[CompositeLossBreakdown] = []
        epoch_rows: list[dict] = []

        def loss_fn(model, batch):
            idx = batch["idx"].astype(int)
            const = train_const.subset(idx)
            noise = sample_gumbel((len(idx), config.k), gumbel_rng)
            root, parts, pnodes, _ = composite_loss_graph(model, const, rng_range, config, noise, hard=True)
            batch_parts.append(
                CompositeLossBreakdown(
                    l_b=float(parts["l_b"].value) if parts["l_b"] is not None else np.nan,
                    l_reg=float(parts["l_reg"].value),
                    l_aux=float(parts["l_aux"].value),
                    lam=config.lam,
                    gamma=config.gamma,
                )
            )
            return root, pnodes

        def val_loss(model):
            total, breakdown, info = validation_loss(model, val_const, rng_range, config)
            with np.errstate(invalid="ignore"):
                epoch_rows.append(
                    {
                        "epoch": len(epoch_rows),
                        "l_b": float(np.nanmean([p.l_b for p in batch_parts])) if batch_parts else np.nan,
                        "l_reg": float(np.mean([p.l_reg for p in batch_parts])) if batch_parts else np.nan,
                        "l_aux": float(np.mean([p.l_aux for p in batch_parts])) if batch_parts else np.nan,
                        "total": float(np.mean([p.total for p in batch_parts])) if batch_parts else np.nan,
                        "val_total": total,
                        "min_cell_mass": float(info["masses"].min()),
                    }
                )
            batch_parts.clear()
            return total

        log = train_with_early_stopping(
            net,
            loss_fn,
            {"idx": np.arange(len(split.train), dtype=np.float64)},
            {"idx": np.arange(len(split.val), dtype=np.float64)},
            config,
            val_loss_fn=val_loss,
            rng=stream_rng(config.seed, f"partition-batches-{restart}"),
            min_batch_size=max(2, 2 * config.k),
        )
        final_val, _, _ = validation_loss(net, val_const, rng_range, config)
        result = Stage2Result(net=net, epoch_rows=epoch_rows, log=log, restart=restart, val_total=final_val)
        if best is None or result.val_total < best.val_total:
            best = result
    return best.net, best.epoch_rows, best


def evaluate_bounds(net: PartitionNet, nuisances: NuisanceSet, batch: SampleBatch,
                    rng_range: OutcomeRange, agg_z: np.ndarray | None = None,
                    agg_a: np.ndarray | None = None) -> tuple[bnd.BoundPair, dict]:
    """Final bounds at the batch's query points: hard assignments.

    The plug-in sums run over (agg_z, agg_a) when given (the estimator is
    defined over the whole observational sample), else over the batch.
    """
    if agg_z is None:
        agg_z, agg_a = batch.z, batch.a
    assignment = hard_assignment(net, agg_z)
    rep = bnd.representation_from_estimates(nuisances, assignment, agg_z, agg_a, batch.x)
    pair = bnd.bounds_on_grid(rep, rng_range)
    diag = {
        "cell_masses": assignment.cell_masses,
        "min_cell_mass": float(assignment.cell_masses.min()),
        "valid_l": rep.valid_l,
        "valid_m": rep.valid_m,
    }
    return pair, diag


def tune_gamma(split: DatasetSplit, nuisances: NuisanceSet, config: TrainConfig,
               n_draws: int = 8) -> tuple[float, list[dict]]:
    """Random-search gamma over [0, 1], scored by validation L_b + lam L_reg."""
    from dataclasses import replace

    from .data import outcome_range_from_train

    rng_range = outcome_range_from_train(split.train)
    draw_rng = stream_rng(config.seed, "gamma-search")
    val_const = batch_constants(nuisances, split.val)
    trials = []
    for gamma in draw_rng.random(n_draws):
        trial_config = replace(config, gamma=float(gamma))
        net, _, _ = train_partition(split, nuisances, trial_config, rng_range)
        _, breakdown, _ = validation_loss(net, val_const, rng_range, trial_config)
        trials.append({"gamma": float(gamma), "score": breakdown.l_b + config.lam * breakdown.l_reg})
    best = min(trials, key=lambda t: t["score"])
    return best["gamma"], trials


TRAIN_LOG_COLUMNS = ["epoch", "l_b", "l_reg", "l_aux", "total", "val_total", "min_cell_mass"]


def write_train_log_csv(rows: list[dict], path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRAIN_LOG_COLUMNS)
    for row in rows:
        writer.writerow([row["epoch"]] + [format(float(row[c]), ".17g") for c in TRAIN_LOG_COLUMNS[1:]])
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())
