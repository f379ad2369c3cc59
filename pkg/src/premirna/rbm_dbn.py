"""Bernoulli RBMs trained with CD-1, greedy DBN pretraining and fine-tuning.

Visible units take real values in [0, 1] and are treated as Bernoulli
probabilities, which suits min-max scaled feature vectors.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from premirna import nn

DBN_HIDDEN = (100, 70, 35)
INIT_STD = 0.1  # N(0, 0.01) read as variance 0.01


@dataclass
class RbmParams:
    W: np.ndarray  # (visible, hidden)
    b_v: np.ndarray
    b_h: np.ndarray

    def __post_init__(self):
        nv, nh = self.W.shape
        if self.b_v.shape != (nv,) or self.b_h.shape != (nh,):
            raise ValueError(f"bias shapes {self.b_v.shape}, {self.b_h.shape} do not fit W {self.W.shape}")

    @property
    def n_visible(self) -> int:
        return self.W.shape[0]

    @property
    def n_hidden(self) -> int:
        return self.W.shape[1]

    def copy(self) -> "RbmParams":
        return RbmParams(self.W.copy(), self.b_v.copy(), self.b_h.copy())

    @classmethod
    def init(cls, n_visible: int, n_hidden: int, rng: np.random.Generator, std: float = INIT_STD):
        return cls(rng.normal(0.0, std, (n_visible, n_hidden)), np.zeros(n_visible), np.zeros(n_hidden))


@dataclass(frozen=True)
class DbnPlan:
    sizes: tuple  # (input_dim, hidden1, hidden2, ...)
    head: str = "softmax"  # or "sigmoid" for a single output unit

    def __post_init__(self):
        if len(self.sizes) < 2:
            raise ValueError("a DBN plan needs at least one hidden layer")
        if any(int(s) < 1 for s in self.sizes):
            raise ValueError(f"layer sizes must be positive, got {self.sizes}")
        if self.head not in ("softmax", "sigmoid"):
            raise ValueError(f"head must be 'softmax' or 'sigmoid', got {self.head!r}")

    @property
    def output_units(self) -> int:
        return 2 if self.head == "softmax" else 1


@dataclass
class DbnConfig:
    pretrain_lr: float = 0.05
    pretrain_epochs: int = 50
    batch_size: int = 32
    finetune_lr: float = 0.01
    finetune_epochs: int = 100
    head_epochs: int = 100  # head-only training when finetune_epochs == 0
    momentum: float = 0.0
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _check_unit_interval(x, what):
    if not np.all(np.isfinite(x)) or x.min(initial=0.0) < 0.0 or x.max(initial=0.0) > 1.0:
        raise ValueError(f"{what} must lie in [0, 1]")


def rbm_hidden_probs(rbm: RbmParams, v) -> np.ndarray:
    """p(h_j = 1 | v) = sigmoid(b_h[j] + sum_i v_i W[i, j]); rows of ``v`` are batch items."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != rbm.n_visible:
        raise ValueError(f"visible vector has {v.shape[-1]} units, RBM expects {rbm.n_visible}")
    return nn.sigmoid(v @ rbm.W + rbm.b_h)


def rbm_visible_probs(rbm: RbmParams, h) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.shape[-1] != rbm.n_hidden:
        raise ValueError(f"hidden vector has {h.shape[-1]} units, RBM expects {rbm.n_hidden}")
    return nn.sigmoid(h @ rbm.W.T + rbm.b_v)


def rbm_energy(rbm: RbmParams, v, h) -> np.ndarray:
    """E(v, h) = -b_v.v - b_h.h - v W h for batches of binary states."""
    v = np.atleast_2d(v)
    h = np.atleast_2d(h)
    return -(v @ rbm.b_v) - (h @ rbm.b_h) - np.einsum("bi,ij,bj->b", v, rbm.W, h)


def rbm_cd1_update(rbm: RbmParams, batch, eta: float, seed) -> tuple[RbmParams, float]:
    """One CD-1 step on ``batch``; returns the new parameters and the
    mean squared reconstruction error of the batch."""
    v0 = np.asarray(batch, dtype=np.float64)
    _check_unit_interval(v0, "RBM batch")
    rng = np.random.default_rng(seed)
    h0_prob = rbm_hidden_probs(rbm, v0)
    h0 = (rng.random(h0_prob.shape) < h0_prob).astype(np.float64)
    v1 = rbm_visible_probs(rbm, h0)
    h1_prob = rbm_hidden_probs(rbm, v1)
    m = len(v0)
    dW = eta * (v0.T @ h0_prob - v1.T @ h1_prob) / m
    db_v = eta * (v0 - v1).mean(axis=0)
    db_h = eta * (h0_prob - h1_prob).mean(axis=0)
    for name, d in (("W", dW), ("b_v", db_v), ("b_h", db_h)):
        if not np.all(np.isfinite(d)):
            raise nn.TrainingDivergence(f"non-finite CD-1 update for {name}")
    new = RbmParams(rbm.W + dW, rbm.b_v + db_v, rbm.b_h + db_h)
    return new, float(((v0 - v1) ** 2).mean())


def reconstruction_error(rbm: RbmParams, data) -> float:
    """Mean squared error of the deterministic up-down reconstruction."""
    data = np.asarray(data, dtype=np.float64)
    recon = rbm_visible_probs(rbm, rbm_hidden_probs(rbm, data))
    return float(((data - recon) ** 2).mean())


def train_rbm(data, n_hidden: int, epochs: int = 50, eta: float = 0.05, batch_size: int = 32,
              seed: int = 0) -> tuple[RbmParams, list[float]]:
    """CD-1 training; returns the RBM and the reconstruction error before
    training followed by the error after each epoch."""
    data = np.asarray(data, dtype=np.float64)
    _check_unit_interval(data, "RBM training data")
    rng = np.random.default_rng([seed, 3])
    rbm = RbmParams.init(data.shape[1], n_hidden, rng)
    history = [reconstruction_error(rbm, data)]
    for _ in range(epochs):
        order = rng.permutation(len(data))
        for start in range(0, len(data), batch_size):
            batch = data[order[start:start + batch_size]]
            rbm, _ = rbm_cd1_update(rbm, batch, eta, int(rng.integers(2**63)))
        history.append(reconstruction_error(rbm, data))
    return rbm, history


def dbn_pretrain(plan: DbnPlan, data, config: DbnConfig = DbnConfig()) -> list[RbmParams]:
    """Greedy layer-wise pretraining: each RBM models the hidden
    probabilities of the one below it."""
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != plan.sizes[0]:
        raise ValueError(f"data must have {plan.sizes[0]} columns, got shape {x.shape}")
    stack = []
    for k, n_hidden in enumerate(plan.sizes[1:]):
        rbm, _ = train_rbm(x, n_hidden, config.pretrain_epochs, config.pretrain_lr,
                           config.batch_size, seed=config.seed * 1000 + k)
        stack.append(rbm)
        x = rbm_hidden_probs(rbm, x)
        _check_unit_interval(x, f"layer {k + 1} representation")
    return stack


def dbn_network_spec(plan: DbnPlan) -> nn.NetworkSpec:
    layers = [nn.dense(n, "sigmoid") for n in plan.sizes[1:]]
    if plan.head == "softmax":
        layers += [nn.dense(2, "identity"), nn.softmax_layer()]
    else:
        layers += [nn.dense(1, "sigmoid")]
    return nn.NetworkSpec((plan.sizes[0],), tuple(layers), name="dbn")


def unroll(plan: DbnPlan, stack: list[RbmParams], seed: int = 0) -> nn.Network:
    """Feed-forward net whose sigmoid layers carry the pretrained weights."""
    if len(stack) != len(plan.sizes) - 1:
        raise ValueError(f"stack has {len(stack)} RBMs, plan needs {len(plan.sizes) - 1}")
    net = nn.Network(dbn_network_spec(plan), seed)
    for layer, rbm in zip(net.layers, stack):
        if layer.params["W"].shape != rbm.W.T.shape:
            raise ValueError(f"RBM shape {rbm.W.shape} does not fit layer {layer.params['W'].shape}")
        layer.params["W"][...] = rbm.W.T
        layer.params["b"][...] = rbm.b_h
    return net


def dbn_finetune(plan: DbnPlan, stack: list[RbmParams], x, y,
                 config: DbnConfig = DbnConfig()) -> tuple[nn.Network, list[float]]:
    """Unroll the stack, add the output head and train with SGD + cross-entropy.

    With ``finetune_epochs == 0`` the pretrained layers stay frozen and only
    the head is trained, for ``head_epochs`` epochs.
    """
    net = unroll(plan, stack, seed=config.seed)
    epochs = config.finetune_epochs
    if epochs == 0:
        net.frozen = set(range(len(stack)))
        epochs = config.head_epochs
    train = nn.TrainConfig(config.finetune_lr, config.batch_size, epochs, config.momentum, config.seed)
    history = nn.fit(net, x, y, train)
    return net, history


def train_dbn(plan: DbnPlan, x, y, config: DbnConfig = DbnConfig()):
    """Pretrain then fine-tune; returns ``(network, stack, loss_history)``."""
    stack = dbn_pretrain(plan, x, config)
    net, history = dbn_finetune(plan, stack, x, y, config)
    return net, stack, history


def stack_to_header(stack: list[RbmParams]) -> tuple[list[dict], list[np.ndarray]]:
    """Model-file section describing the pretrained RBMs plus their arrays."""
    meta, arrays = [], []
    for rbm in stack:
        meta.append({"visible": rbm.n_visible, "hidden": rbm.n_hidden})
        arrays += [rbm.W, rbm.b_v, rbm.b_h]
    return meta, arrays


def stack_from_arrays(meta: list[dict], arrays: list[np.ndarray]) -> list[RbmParams]:
    if len(arrays) != 3 * len(meta):
        raise ValueError("pretrained stack arrays do not match their description")
    return [RbmParams(*arrays[3 * k:3 * k + 3]) for k in range(len(meta))]
