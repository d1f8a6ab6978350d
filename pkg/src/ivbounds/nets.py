"""Network architectures, the Adam optimizer and the training loop.

All models are small relu MLPs (hidden width 10). The outcome and
propensity nets encode covariate and instrument through separate branches
joined by shared layers; the outcome net has one scalar head per treatment
arm. The partition net maps instruments to k cells through a
Gumbel-softmax layer and carries an auxiliary linear classification head
on its last hidden layer.
"""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .rng import stream_rng

HIDDEN_WIDTH = 10


@dataclass(frozen=True)
class MlpSpec:
    """Two-branch MLP dimensions: encoders, shared trunk, output heads."""

    x_depth: int = 2
    z_depth: int = 3
    shared_depth: int = 2
    hidden: int = HIDDEN_WIDTH
    heads: int = 1
    head_transform: str = "identity"  # or "sigmoid"

    def __post_init__(self):
        if min(self.x_depth, self.z_depth, self.shared_depth) < 1:
            raise ValueError("all depths must be >= 1")
        if self.hidden < 1:
            raise ValueError("hidden width must be >= 1")
        if self.head_transform not in ("identity", "sigmoid"):
            raise ValueError(f"unknown head transform {self.head_transform!r}")


@dataclass
class TrainConfig:
    """Shared training hyperparameters for both stages.

    The batch size default favors many small steps: with n = 2000 (800
    training samples) larger batches starve Adam of updates inside the
    100-epoch budget and the nets underfit visibly.
    """

    learning_rate: float = 0.03
    max_epochs: int = 100
    patience: int = 10
    batch_size: int = 32
    k: int = 2
    lam: float = 1.0
    gamma: float = 0.5
    temperature: float = 1.0
    seed: int = 0
    restarts: int = 3

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.batch_size < 2 * self.k:
            raise ValueError("batch size must be >= 2k")
        if self.lam < 0 or self.gamma < 0:
            raise ValueError("loss weights must be non-negative")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")


def _init_dense(rng: np.random.Generator, params: dict, prefix: str, fan_in: int, fan_out: int) -> None:
    bound = 1.0 / np.sqrt(fan_in)
    params[f"{prefix}.w"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    params[f"{prefix}.b"] = rng.uniform(-bound, bound, size=(fan_out,))


def _init_stack(rng, params, prefix, in_dim, depth, hidden) -> int:
    d = in_dim
    for i in range(depth):
        _init_dense(rng, params, f"{prefix}{i}", d, hidden)
        d = hidden
    return d


def _dense(h: ad.Node, pnodes: dict[str, ad.Node], prefix: str) -> ad.Node:
    return ad.add(ad.matmul(h, pnodes[f"{prefix}.w"]), pnodes[f"{prefix}.b"])


def _stack(h: ad.Node, pnodes, prefix: str, depth: int) -> ad.Node:
    for i in range(depth):
        h = ad.relu(_dense(h, pnodes, f"{prefix}{i}"))
    return h


def _dense_np(h: np.ndarray, params, prefix: str) -> np.ndarray:
    return h @ params[f"{prefix}.w"] + params[f"{prefix}.b"]


def _stack_np(h: np.ndarray, params, prefix: str, depth: int) -> np.ndarray:
    for i in range(depth):
        h = np.maximum(_dense_np(h, params, f"{prefix}{i}"), 0.0)
    return h


def _as_col(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v.reshape(-1, 1) if v.ndim == 1 else v


class _Net:
    """Common parameter plumbing for all model classes."""

    kind = ""

    def __init__(self, params: dict[str, np.ndarray]):
        self.params = params

    def param_nodes(self) -> dict[str, ad.Node]:
        return {name: ad.input_node(arr, name=name, trainable=True) for name, arr in self.params.items()}

    def copy_params(self) -> dict[str, np.ndarray]:
        return {name: arr.copy() for name, arr in self.params.items()}

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        if set(params) != set(self.params):
            raise ValueError("parameter name mismatch")
        self.params = {name: np.array(arr, dtype=np.float64) for name, arr in params.items()}

    def meta(self) -> dict:
        raise NotImplementedError


class TwoHeadOutcomeNet(_Net):
    """Outcome regression E[Y | X, A, Z] with one scalar head per arm."""

    kind = "two_head_outcome"

    def __init__(self, x_dim: int, z_dim: int, spec: MlpSpec, params: dict):
        super().__init__(params)
        self.x_dim = x_dim
        self.z_dim = z_dim
        self.spec = spec

    @classmethod
    def create(cls, x_dim: int, z_dim: int, rng: np.random.Generator, spec: MlpSpec | None = None):
        spec = spec or MlpSpec(heads=2)
        params: dict[str, np.ndarray] = {}
        _init_stack(rng, params, "x_enc.", x_dim, spec.x_depth, spec.hidden)
        _init_stack(rng, params, "z_enc.", z_dim, spec.z_depth, spec.hidden)
        _init_stack(rng, params, "shared.", 2 * spec.hidden, spec.shared_depth, spec.hidden)
        _init_dense(rng, params, "head0", spec.hidden, 1)
        _init_dense(rng, params, "head1", spec.hidden, 1)
        return cls(x_dim, z_dim, spec, params)

    def meta(self) -> dict:
        return {"x_dim": self.x_dim, "z_dim": self.z_dim, "spec": asdict(self.spec)}

    @classmethod
    def from_meta(cls, meta: dict, params: dict):
        return cls(meta["x_dim"], meta["z_dim"], MlpSpec(**meta["spec"]), params)

    def _trunk(self, pnodes, x: np.ndarray, z: np.ndarray) -> ad.Node:
        hx = _stack(ad.input_node(_as_col(x)), pnodes, "x_enc.", self.spec.x_depth)
        hz = _stack(ad.input_node(_as_col(z)), pnodes, "z_enc.", self.spec.z_depth)
        return _stack(ad.concat([hx, hz], axis=1), pnodes, "shared.", self.spec.shared_depth)

    def loss_graph(self, batch: dict[str, np.ndarray]):
        """Per-sample squared error against the head matching the treatment."""
        pnodes = self.param_nodes()
        h = self._trunk(pnodes, batch["x"], batch["z"])
        y0 = _dense(h, pnodes, "head0")
        y1 = _dense(h, pnodes, "head1")
        a = _as_col(batch["a"]).astype(np.float64)
        pred = ad.add(ad.mul(y1, ad.constant(a)), ad.mul(y0, ad.constant(1.0 - a)))
        diff = ad.sub(pred, ad.constant(_as_col(batch["y"])))
        return ad.reduce_mean(ad.mul(diff, diff)), pnodes

    def _trunk_np(self, x: np.ndarray, z: np.ndarray) -> np.ndarray:
        hx = _stack_np(_as_col(x), self.params, "x_enc.", self.spec.x_depth)
        hz = _stack_np(_as_col(z), self.params, "z_enc.", self.spec.z_depth)
        return _stack_np(np.concatenate([hx, hz], axis=1), self.params, "shared.", self.spec.shared_depth)

    def predict(self, x: np.ndarray, z: np.ndarray) -> np.ndarray:
        """Predictions for both arms, shape (n, 2) ordered [arm 0, arm 1]."""
        h = self._trunk_np(x, z)
        return np.concatenate([_dense_np(h, self.params, "head0"), _dense_np(h, self.params, "head1")], axis=1)

    def predict_pairwise(self, xq: np.ndarray, z: np.ndarray, chunk: int = 64):
        """M_a[i, j] = prediction at (x_i, z_j); returns (M0, M1)."""
        hx = _stack_np(_as_col(xq), self.params, "x_enc.", self.spec.x_depth)
        hz = _stack_np(_as_col(z), self.params, "z_enc.", self.spec.z_depth)
        nq, nz = hx.shape[0], hz.shape[0]
        m0 = np.empty((nq, nz))
        m1 = np.empty((nq, nz))
        for lo in range(0, nq, chunk):
            hi = min(lo + chunk, nq)
            block = np.concatenate([np.repeat(hx[lo:hi], nz, axis=0), np.tile(hz, (hi - lo, 1))], axis=1)
            h = _stack_np(block, self.params, "shared.", self.spec.shared_depth)
            m0[lo:hi] = _dense_np(h, self.params, "head0").reshape(hi - lo, nz)
            m1[lo:hi] = _dense_np(h, self.params, "head1").reshape(hi - lo, nz)
        return m0, m1


class PropensityNet(_Net):
    """P(A = 1 | X, Z) with a sigmoid head, trained with logistic loss."""

    kind = "propensity"

    def __init__(self, x_dim: int, z_dim: int, spec: MlpSpec, params: dict):
        super().__init__(params)
        self.x_dim = x_dim
        self.z_dim = z_dim
        self.spec = spec

    @classmethod
    def create(cls, x_dim: int, z_dim: int, rng: np.random.Generator, spec: MlpSpec | None = None):
        spec = spec or MlpSpec(heads=1, head_transform="sigmoid")
        params: dict[str, np.ndarray] = {}
        _init_stack(rng, params, "x_enc.", x_dim, spec.x_depth, spec.hidden)
        _init_stack(rng, params, "z_enc.", z_dim, spec.z_depth, spec.hidden)
        _init_stack(rng, params, "shared.", 2 * spec.hidden, spec.shared_depth, spec.hidden)
        _init_dense(rng, params, "head", spec.hidden, 1)
        return cls(x_dim, z_dim, spec, params)

    def meta(self) -> dict:
        return {"x_dim": self.x_dim, "z_dim": self.z_dim, "spec": asdict(self.spec)}

    @classmethod
    def from_meta(cls, meta: dict, params: dict):
        return cls(meta["x_dim"], meta["z_dim"], MlpSpec(**meta["spec"]), params)

    def loss_graph(self, batch: dict[str, np.ndarray]):
        pnodes = self.param_nodes()
        hx = _stack(ad.input_node(_as_col(batch["x"])), pnodes, "x_enc.", self.spec.x_depth)
        hz = _stack(ad.input_node(_as_col(batch["z"])), pnodes, "z_enc.", self.spec.z_depth)
        h = _stack(ad.concat([hx, hz], axis=1), pnodes, "shared.", self.spec.shared_depth)
        logit = _dense(h, pnodes, "head")
        a = ad.constant(_as_col(batch["a"]).astype(np.float64))
        # Logistic loss in logit form: softplus(w) - a * w.
        return ad.reduce_mean(ad.sub(ad.softplus(logit), ad.mul(a, logit))), pnodes

    def _logits_np(self, x: np.ndarray, z: np.ndarray) -> np.ndarray:
        hx = _stack_np(_as_col(x), self.params, "x_enc.", self.spec.x_depth)
        hz = _stack_np(_as_col(z), self.params, "z_enc.", self.spec.z_depth)
        h = _stack_np(np.concatenate([hx, hz], axis=1), self.params, "shared.", self.spec.shared_depth)
        return _dense_np(h, self.params, "head")

    def predict(self, x: np.ndarray, z: np.ndarray) -> np.ndarray:
        return _sigmoid_np(self._logits_np(x, z))[:, 0]

    def predict_pairwise(self, xq: np.ndarray, z: np.ndarray, chunk: int = 64) -> np.ndarray:
        hx = _stack_np(_as_col(xq), self.params, "x_enc.", self.spec.x_depth)
        hz = _stack_np(_as_col(z), self.params, "z_enc.", self.spec.z_depth)
        nq, nz = hx.shape[0], hz.shape[0]
        out = np.empty((nq, nz))
        for lo in range(0, nq, chunk):
            hi = min(lo + chunk, nq)
            block = np.concatenate([np.repeat(hx[lo:hi], nz, axis=0), np.tile(hz, (hi - lo, 1))], axis=1)
            h = _stack_np(block, self.params, "shared.", self.spec.shared_depth)
            out[lo:hi] = _sigmoid_np(_dense_np(h, self.params, "head")).reshape(hi - lo, nz)
        return out


class EtaNet(_Net):
    """P(A = 1 | Z): three relu layers on the instrument, sigmoid head."""

    kind = "eta"

    def __init__(self, z_dim: int, depth: int, hidden: int, params: dict):
        super().__init__(params)
        self.z_dim = z_dim
        self.depth = depth
        self.hidden = hidden

    @classmethod
    def create(cls, z_dim: int, rng: np.random.Generator, depth: int = 3, hidden: int = HIDDEN_WIDTH):
        params: dict[str, np.ndarray] = {}
        _init_stack(rng, params, "z_enc.", z_dim, depth, hidden)
        _init_dense(rng, params, "head", hidden, 1)
        return cls(z_dim, depth, hidden, params)

    def meta(self) -> dict:
        return {"z_dim": self.z_dim, "depth": self.depth, "hidden": self.hidden}

    @classmethod
    def from_meta(cls, meta: dict, params: dict):
        return cls(meta["z_dim"], meta["depth"], meta["hidden"], params)

    def loss_graph(self, batch: dict[str, np.ndarray]):
        pnodes = self.param_nodes()
        h = _stack(ad.input_node(_as_col(batch["z"])), pnodes, "z_enc.", self.depth)
        logit = _dense(h, pnodes, "head")
        a = ad.constant(_as_col(batch["a"]).astype(np.float64))
        return ad.reduce_mean(ad.sub(ad.softplus(logit), ad.mul(a, logit))), pnodes

    def predict(self, z: np.ndarray) -> np.ndarray:
        h = _stack_np(_as_col(z), self.params, "z_enc.", self.depth)
        return _sigmoid_np(_dense_np(h, self.params, "head"))[:, 0]


class PartitionNet(_Net):
    """Instrument-to-cell map: relu trunk, k-way Gumbel-softmax head,
    plus an auxiliary linear classification head on the last hidden layer."""

    kind = "partition"

    def __init__(self, z_dim: int, k: int, depth: int, hidden: int, params: dict):
        super().__init__(params)
        self.z_dim = z_dim
        self.k = k
        self.depth = depth
        self.hidden = hidden

    @classmethod
    def create(cls, z_dim: int, k: int, rng: np.random.Generator, depth: int = 3, hidden: int = HIDDEN_WIDTH):
        if k < 1:
            raise ValueError("k must be >= 1")
        params: dict[str, np.ndarray] = {}
        _init_stack(rng, params, "z_enc.", z_dim, depth, hidden)
        _init_dense(rng, params, "logits", hidden, k)
        _init_dense(rng, params, "aux", hidden, k)
        return cls(z_dim, k, depth, hidden, params)

    def meta(self) -> dict:
        return {"z_dim": self.z_dim, "k": self.k, "depth": self.depth, "hidden": self.hidden}

    @classmethod
    def from_meta(cls, meta: dict, params: dict):
        return cls(meta["z_dim"], meta["k"], meta["depth"], meta["hidden"], params)

    def logits(self, z: np.ndarray) -> np.ndarray:
        h = _stack_np(_as_col(z), self.params, "z_enc.", self.depth)
        return _dense_np(h, self.params, "logits")

    def assign_hard(self, z: np.ndarray) -> np.ndarray:
        """Deterministic evaluation-time labels: argmax of logits, no noise."""
        return np.argmax(self.logits(z), axis=1)

    def assignment_graph(self, z: np.ndarray, noise: np.ndarray | None, temperature: float, hard: bool):
        """Build the (weights, last-hidden, aux-logits) sub-graph for a batch."""
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        pnodes = self.param_nodes()
        h = _stack(ad.input_node(_as_col(z)), pnodes, "z_enc.", self.depth)
        logits = _dense(h, pnodes, "logits")
        noisy = logits if noise is None else ad.gumbel_noise_add(logits, noise)
        soft = ad.softmax(ad.div(noisy, temperature))
        weights = ad.straight_through(soft) if hard else soft
        aux_logits = _dense(h, pnodes, "aux")
        return weights, aux_logits, pnodes


def _sigmoid_np(v: np.ndarray) -> np.ndarray:
    return np.where(v >= 0, 1.0 / (1.0 + np.exp(-v)), np.exp(v) / (1.0 + np.exp(v)))


def sample_gumbel(shape, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(shape)
    return -np.log(-np.log(u + 1e-20) + 1e-20)


def gumbel_softmax_sample(logits: np.ndarray, temperature: float, hard: bool, rng: np.random.Generator) -> np.ndarray:
    """Sample a relaxed (or straight-through hard) categorical vector.

    Soft mode returns softmax((logits + Gumbel noise) / temperature); hard
    mode returns the exact one-hot of the argmax. Gradient semantics live
    in the graph path (``PartitionNet.assignment_graph``).
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits must be finite")
    y = (logits + sample_gumbel(logits.shape, rng)) / temperature
    y2 = np.atleast_2d(y)
    shifted = y2 - y2.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    soft = e / e.sum(axis=-1, keepdims=True)
    if hard:
        out = np.zeros_like(soft)
        out[np.arange(soft.shape[0]), np.argmax(soft, axis=1)] = 1.0
    else:
        out = soft
    return out.reshape(y.shape)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            m={name: np.zeros_like(arr) for name, arr in params.items()},
            v={name: np.zeros_like(arr) for name, arr in params.items()},
        )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One Adam update, in place. Missing grads are treated as zero."""
    state.t += 1
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape or state.m[name].shape != p.shape:
            raise ValueError(f"shape mismatch for {name}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = state.m[name] / (1.0 - beta1**state.t)
        v_hat = state.v[name] / (1.0 - beta2**state.t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)


class TrainingAbort(RuntimeError):
    def __init__(self, epoch: int, batch: int, message: str):
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"epoch {epoch}, batch {batch}: {message}")


@dataclass
class TrainLog:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1


def train_with_early_stopping(
    net: _Net,
    loss_fn,
    train: dict[str, np.ndarray],
    val: dict[str, np.ndarray],
    config: TrainConfig,
    val_loss_fn=None,
    rng: np.random.Generator | None = None,
    min_batch_size: int = 2,
) -> TrainLog:
    """Minibatch Adam with early stopping on validation loss.

    ``loss_fn(net, batch) -> (scalar root node, param nodes)``. The net is
    left holding the parameters of the epoch with the smallest validation
    loss. Validation defaults to the loss on the full validation arrays;
    pass ``val_loss_fn(net) -> float`` to override (the second stage
    validates in hard assignment mode).
    """
    n = len(next(iter(train.values())))
    n_val = len(next(iter(val.values())))
    if n == 0 or n_val == 0:
        raise ValueError("train and validation splits must be non-empty")
    rng = rng if rng is not None else stream_rng(config.seed, "train-batches")
    state = AdamState.for_params(net.params)
    log = TrainLog()
    best_val = np.inf
    best_params = net.copy_params()
    stale = 0
    for epoch in range(config.max_epochs):
        perm = rng.permutation(n)
        epoch_losses = []
        for b, lo in enumerate(range(0, n, config.batch_size)):
            idx = perm[lo : lo + config.batch_size]
            if len(idx) < min_batch_size:
                continue
            batch = {key: arr[idx] for key, arr in train.items()}
            try:
                root, _ = loss_fn(net, batch)
            except ad.NonFiniteError as exc:
                raise TrainingAbort(epoch, b, str(exc)) from exc
            value = float(root.value)
            if not np.isfinite(value):
                raise TrainingAbort(epoch, b, "loss is not finite")
            grads = ad.backward_grad(root)
            adam_step(net.params, grads, state, config.learning_rate)
            epoch_losses.append(value)
        if val_loss_fn is not None:
            v = float(val_loss_fn(net))
        else:
            v = float(loss_fn(net, val)[0].value)
        log.train_loss.append(float(np.mean(epoch_losses)) if epoch_losses else np.nan)
        log.val_loss.append(v)
        if v < best_val:
            best_val = v
            best_params = net.copy_params()
            log.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    net.set_params(best_params)
    return log


_NET_KINDS = {
    TwoHeadOutcomeNet.kind: TwoHeadOutcomeNet,
    PropensityNet.kind: PropensityNet,
    EtaNet.kind: EtaNet,
    PartitionNet.kind: PartitionNet,
}

_CKPT_MAGIC = b"IVBNET01"


def save_checkpoint(net: _Net, path) -> None:
    """Write magic + JSON header + little-endian float64 parameter blobs."""
    names = sorted(net.params)
    header = {
        "kind": net.kind,
        "meta": net.meta(),
        "arrays": [{"name": name, "shape": list(net.params[name].shape)} for name in names],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name in names:
            fh.write(np.ascontiguousarray(net.params[name], dtype="<f8").tobytes())


def load_checkpoint(path) -> _Net:
    with open(path, "rb") as fh:
        magic = fh.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise ValueError(f"not a model checkpoint: {path}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        params = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape)
            params[entry["name"]] = np.array(arr, dtype=np.float64)
    cls = _NET_KINDS[header["kind"]]
    return cls.from_meta(header["meta"], params)


def clone_net(net: _Net) -> _Net:
    out = copy.copy(net)
    out.params = net.copy_params()
    return out
