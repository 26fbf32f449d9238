"""Minimal numpy multilayer perceptron, Adam, and the desk-scale training loops.

The decoder maps 64-d voice embeddings to shape coefficients. Parameters
live in a flat ``dict`` (``W0, b0, W1, b1, ...``) with ``W_k`` of shape
``(in, out)`` so a batch ``x`` of shape ``(B, in)`` maps to ``x @ W + b``.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from voxface.errors import DataError, NumericalError
from voxface.losses import kd_divergence, pgt_loss, reg_loss, triplet_loss

log = logging.getLogger(__name__)

EMBEDDING_DIM = 64
ACTIVATIONS = ("relu", "identity")


@dataclass
class MlpModel:
    sizes: tuple[int, ...]
    params: dict[str, np.ndarray]
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        if len(self.sizes) < 2 or min(self.sizes) < 1:
            raise DataError(f"invalid layer sizes {self.sizes}")
        if self.activation not in ACTIVATIONS:
            raise DataError(f"unknown activation {self.activation!r}")
        for k in range(self.n_layers):
            w, b = self.params.get(f"W{k}"), self.params.get(f"b{k}")
            if w is None or b is None:
                raise DataError(f"missing parameters for layer {k}")
            if w.shape != (self.sizes[k], self.sizes[k + 1]) or b.shape != (self.sizes[k + 1],):
                raise DataError(f"layer {k} parameter shapes do not match sizes {self.sizes}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise DataError(f"layer {k} parameters are not finite")

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    @classmethod
    def init(cls, sizes: Sequence[int], seed: int = 0, activation: str = "relu") -> "MlpModel":
        """Uniform ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` weights and biases."""
        rng = np.random.default_rng(seed)
        params = {}
        for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            params[f"W{k}"] = rng.uniform(-bound, bound, (fan_in, fan_out))
            params[f"b{k}"] = rng.uniform(-bound, bound, fan_out)
        return cls(tuple(sizes), params, activation, seed)

    def copy(self) -> "MlpModel":
        return replace(self, params={k: v.copy() for k, v in self.params.items()})

    def hidden_dim(self) -> int:
        if self.n_layers < 2:
            raise DataError("model has no hidden layer")
        return self.sizes[-2]


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]
    pre: list[np.ndarray]
    output: np.ndarray

    @property
    def hidden(self) -> np.ndarray:
        """Activations entering the output layer (the last hidden features)."""
        return self.inputs[-1]


def _act(model: MlpModel, x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) if model.activation == "relu" else x


def forward_cache(model: MlpModel, x) -> ForwardCache:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != model.sizes[0]:
        raise DataError(f"input width {x.shape[1]} does not match model input {model.sizes[0]}")
    inputs, pre = [], []
    h = x
    for k in range(model.n_layers):
        inputs.append(h)
        a = h @ model.params[f"W{k}"] + model.params[f"b{k}"]
        pre.append(a)
        h = a if k == model.n_layers - 1 else _act(model, a)
    return ForwardCache(inputs, pre, h)


def forward(model: MlpModel, x) -> np.ndarray:
    """Batched forward pass; hidden layers use the model activation, the output is linear."""
    return forward_cache(model, x).output


def backward(
    model: MlpModel,
    x,
    upstream_grad,
    hidden_grad: Optional[np.ndarray] = None,
    cache: Optional[ForwardCache] = None,
) -> dict[str, np.ndarray]:
    """Parameter gradients of ``sum(upstream_grad * forward(x))``.

    ``hidden_grad``, when given, is an extra gradient arriving at the last
    hidden activations (used by the feature-distillation term).
    """
    cache = cache or forward_cache(model, x)
    g = np.atleast_2d(np.asarray(upstream_grad, dtype=np.float64))
    if g.shape != cache.output.shape:
        raise DataError(f"upstream gradient shape {g.shape} != output shape {cache.output.shape}")
    grads = {}
    for k in reversed(range(model.n_layers)):
        if k < model.n_layers - 1 and model.activation == "relu":
            g = g * (cache.pre[k] > 0)
        grads[f"W{k}"] = cache.inputs[k].T @ g
        grads[f"b{k}"] = g.sum(axis=0)
        if k > 0:
            g = g @ model.params[f"W{k}"].T
            if k == model.n_layers - 1 and hidden_grad is not None:
                hg = np.atleast_2d(hidden_grad)
                if hg.shape != g.shape:
                    raise DataError(f"hidden gradient shape {hg.shape} != {g.shape}")
                g = g + hg
    return grads


# -- optimizer ---------------------------------------------------------------


@dataclass
class TrainConfig:
    learning_rate: float = 2e-4
    batch_size: int = 64
    steps: int = 2000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    tri_weight: float = 1.0
    div_weight: float = 1.0
    hidden: tuple[int, ...] = (128, 128)
    activation: str = "relu"

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.steps < 1:
            raise DataError("learning rate, batch size and steps must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0:
            raise DataError("invalid Adam hyperparameters")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    cfg: TrainConfig,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns new arrays and the advanced state."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name}")
    t = state.step + 1
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    new_params, m_new, v_new = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        elif g.shape != p.shape:
            raise DataError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = cfg.beta1 * state.m.get(name, np.zeros_like(p)) + (1 - cfg.beta1) * g
        v = cfg.beta2 * state.v.get(name, np.zeros_like(p)) + (1 - cfg.beta2) * g * g
        new_params[name] = p - cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        m_new[name], v_new[name] = m, v
    return new_params, AdamState(m_new, v_new, t)


# -- data --------------------------------------------------------------------


@dataclass
class SyntheticDataset:
    """Embedding/coefficient pairs with identity labels.

    ``names`` gives one identity name per identity index.
    """

    embeddings: np.ndarray
    coeffs: np.ndarray
    ids: np.ndarray
    names: tuple[str, ...] = ()
    map_weights: Optional[np.ndarray] = None
    map_bias: Optional[np.ndarray] = None

    def __post_init__(self):
        self.embeddings = np.atleast_2d(np.asarray(self.embeddings, dtype=np.float64))
        self.coeffs = np.atleast_2d(np.asarray(self.coeffs, dtype=np.float64))
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        if not (len(self.embeddings) == len(self.coeffs) == len(self.ids)):
            raise DataError("embeddings, coefficients and ids must have equal length")
        if not self.names:
            self.names = tuple(f"id{i:04d}" for i in range(int(self.ids.max()) + 1 if self.ids.size else 0))

    def __len__(self) -> int:
        return len(self.ids)

    def validate(self) -> None:
        ids, counts = np.unique(self.ids, return_counts=True)
        if ids.size < 2:
            raise DataError("triplet sampling needs at least 2 identities")
        if counts.min() < 2:
            raise DataError(
                f"identity {self.names[ids[np.argmin(counts)]]} has a single sample; "
                "positives need 2"
            )

    def subset(self, mask) -> "SyntheticDataset":
        return replace(
            self, embeddings=self.embeddings[mask], coeffs=self.coeffs[mask], ids=self.ids[mask]
        )


def _letter_names(n: int, rng: np.random.Generator) -> tuple[str, ...]:
    letters = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
    return tuple(f"{letters[rng.integers(26)]}{i:04d}" for i in range(n))


def make_synthetic_dataset(
    n_identities: int = 40,
    per_identity: int = 6,
    coeff_count: int = 10,
    embedding_dim: int = EMBEDDING_DIM,
    noise: float = 0.0,
    spread: float = 0.3,
    coeff_scale: float = 1.0,
    seed: int = 0,
    names: Optional[Sequence[str]] = None,
) -> SyntheticDataset:
    """Seeded linear-plus-noise data.

    Each identity has a centre embedding; its utterances scatter around it
    with standard deviation ``spread``. Coefficients are
    ``x @ W + b + noise * N(0, 1)`` for a fixed random map ``W, b`` scaled so
    coefficients have standard deviation about ``coeff_scale``.
    """
    rng = np.random.default_rng(seed)
    centres = rng.standard_normal((n_identities, embedding_dim))
    ids = np.repeat(np.arange(n_identities), per_identity)
    x = centres[ids] + spread * rng.standard_normal((ids.size, embedding_dim))
    w = rng.standard_normal((embedding_dim, coeff_count)) * coeff_scale / np.sqrt(embedding_dim)
    b = 0.1 * coeff_scale * rng.standard_normal(coeff_count)
    y = x @ w + b + noise * rng.standard_normal((ids.size, coeff_count))
    if names is None:
        names = _letter_names(n_identities, rng)
    return SyntheticDataset(x, y, ids, tuple(names), w, b)


def _sample_triplets(ids: np.ndarray, batch: np.ndarray, rng: np.random.Generator):
    """Uniform positive (same id, different item) and negative (other id) per anchor."""
    pos = np.empty_like(batch)
    neg = np.empty_like(batch)
    for n, i in enumerate(batch):
        same = np.flatnonzero(ids == ids[i])
        same = same[same != i]
        other = np.flatnonzero(ids != ids[i])
        pos[n] = same[rng.integers(same.size)]
        neg[n] = other[rng.integers(other.size)]
    return pos, neg


@dataclass
class TrainResult:
    model: MlpModel
    trace: list[dict[str, float]]

    @property
    def losses(self) -> np.ndarray:
        return np.array([row["total"] for row in self.trace])


def train_supervised(
    data: SyntheticDataset,
    cfg: TrainConfig = TrainConfig(),
    model: Optional[MlpModel] = None,
) -> TrainResult:
    """Regression plus triplet training of the coefficient decoder."""
    data.validate()
    rng = np.random.default_rng(cfg.seed)
    if model is None:
        sizes = (data.embeddings.shape[1], *cfg.hidden, data.coeffs.shape[1])
        model = MlpModel.init(sizes, seed=cfg.seed, activation=cfg.activation)
    model = model.copy()
    state = AdamState()
    trace = []
    n = len(data)
    bs = min(cfg.batch_size, n)
    for step in range(cfg.steps):
        batch = rng.choice(n, size=bs, replace=False)
        row = {"step": step}
        if cfg.tri_weight:
            pos, neg = _sample_triplets(data.ids, batch, rng)
            x = np.concatenate([data.embeddings[batch], data.embeddings[pos], data.embeddings[neg]])
        else:
            x = data.embeddings[batch]
        cache = forward_cache(model, x)
        a = cache.output[:bs]
        reg = reg_loss(a, data.coeffs[batch])
        g_out = np.zeros_like(cache.output)
        g_out[:bs] = reg.grads["alpha"]
        total = reg.value
        row["reg"] = reg.value
        if cfg.tri_weight:
            tri = triplet_loss(a, cache.output[bs : 2 * bs], cache.output[2 * bs :])
            g_out[:bs] += cfg.tri_weight * tri.grads["alpha"]
            g_out[bs : 2 * bs] = cfg.tri_weight * tri.grads["alpha_pos"]
            g_out[2 * bs :] = cfg.tri_weight * tri.grads["alpha_neg"]
            total += cfg.tri_weight * tri.value
            row["tri"] = tri.value
        row["total"] = total
        grads = backward(model, x, g_out, cache=cache)
        model.params, state = adam_step(model.params, grads, state, cfg)
        trace.append(row)
    return TrainResult(model, trace)


ExpertMap = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]


def linear_expert(model: MlpModel) -> ExpertMap:
    """Wrap a frozen model as an expert returning ``(coeffs, hidden features)``."""
    frozen = model.copy()

    def expert(x):
        cache = forward_cache(frozen, x)
        return cache.output, cache.hidden

    return expert


def train_distilled(
    expert_map: ExpertMap,
    embeddings: np.ndarray,
    cfg: TrainConfig = TrainConfig(),
    model: Optional[MlpModel] = None,
    ids: Optional[np.ndarray] = None,
) -> TrainResult:
    """Train a student from a frozen expert's pseudo ground truth and features.

    Per step the loss is ``pgt + div_weight * div`` plus ``tri_weight * tri``
    when identity labels ``ids`` are supplied; the adversarial terms are not
    part of this loop. The student's last hidden layer is matched against the
    expert features.
    """
    x_all = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    n = len(x_all)
    if n < 2:
        raise DataError("distillation needs at least 2 embeddings")
    alpha_e_all, z_e_all = expert_map(x_all)
    rng = np.random.default_rng(cfg.seed)
    if model is None:
        sizes = (x_all.shape[1], *cfg.hidden, alpha_e_all.shape[1])
        model = MlpModel.init(sizes, seed=cfg.seed, activation=cfg.activation)
    model = model.copy()
    if model.hidden_dim() != z_e_all.shape[1]:
        raise DataError(
            f"student hidden width {model.hidden_dim()} != expert feature width {z_e_all.shape[1]}"
        )
    use_tri = ids is not None and cfg.tri_weight > 0
    if use_tri:
        ids = np.asarray(ids, dtype=np.int64)
        SyntheticDataset(x_all, alpha_e_all, ids).validate()
    state = AdamState()
    trace = []
    bs = min(cfg.batch_size, n)
    for step in range(cfg.steps):
        batch = rng.choice(n, size=bs, replace=False)
        if use_tri:
            pos, neg = _sample_triplets(ids, batch, rng)
            x = np.concatenate([x_all[batch], x_all[pos], x_all[neg]])
        else:
            x = x_all[batch]
        cache = forward_cache(model, x)
        a = cache.output[:bs]
        z = cache.hidden[:bs]
        pg = pgt_loss(alpha_e_all[batch], a)
        row = {"step": step, "pgt": pg.value}
        g_out = np.zeros_like(cache.output)
        g_out[:bs] = pg.grads["alpha"]
        g_hidden = np.zeros_like(cache.hidden)
        total = pg.value
        if cfg.div_weight:
            div = kd_divergence(z_e_all[batch], z)
            g_hidden[:bs] = cfg.div_weight * div.grads["student"]
            total += cfg.div_weight * div.value
            row["div"] = div.value
        if use_tri:
            tri = triplet_loss(a, cache.output[bs : 2 * bs], cache.output[2 * bs :])
            g_out[:bs] += cfg.tri_weight * tri.grads["alpha"]
            g_out[bs : 2 * bs] = cfg.tri_weight * tri.grads["alpha_pos"]
            g_out[2 * bs :] = cfg.tri_weight * tri.grads["alpha_neg"]
            total += cfg.tri_weight * tri.value
            row["tri"] = tri.value
        row["total"] = total
        grads = backward(model, x, g_out, hidden_grad=g_hidden, cache=cache)
        model.params, state = adam_step(model.params, grads, state, cfg)
        trace.append(row)
    return TrainResult(model, trace)


# -- files -------------------------------------------------------------------

CHECKPOINT_MAGIC = "mlp-checkpoint"


def save_checkpoint(path: str | os.PathLike, model: MlpModel) -> None:
    """Text checkpoint.

    First line ``mlp-checkpoint <activation> <seed> <size0> <size1> ...``, then
    for each layer the ``W`` rows (``in`` lines of ``out`` numbers) followed by
    one line of ``b``.
    """
    with open(path, "w") as fh:
        fh.write(f"{CHECKPOINT_MAGIC} {model.activation} {model.seed} ")
        fh.write(" ".join(map(str, model.sizes)) + "\n")
        for k in range(model.n_layers):
            for row in model.params[f"W{k}"]:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")
            fh.write(" ".join(repr(float(v)) for v in model.params[f"b{k}"]) + "\n")


def load_checkpoint(path: str | os.PathLike) -> MlpModel:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise DataError(f"{path}: empty checkpoint")
    head = lines[0].split()
    if len(head) < 5 or head[0] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not an MLP checkpoint")
    try:
        activation, seed = head[1], int(head[2])
        sizes = tuple(int(s) for s in head[3:])
        params, pos = {}, 1
        for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            params[f"W{k}"] = np.array(
                [[float(v) for v in ln.split()] for ln in lines[pos : pos + fan_in]]
            ).reshape(fan_in, fan_out)
            pos += fan_in
            params[f"b{k}"] = np.array([float(v) for v in lines[pos].split()]).reshape(fan_out)
            pos += 1
    except (ValueError, IndexError) as exc:
        raise DataError(f"{path}: malformed checkpoint ({exc})") from None
    return MlpModel(sizes, params, activation, seed)


def write_trace(path: str | os.PathLike, trace: list[dict[str, float]]) -> None:
    """Tab-separated training log with a header row."""
    keys = ["step"] + sorted({k for row in trace for k in row} - {"step"})
    with open(path, "w") as fh:
        fh.write("\t".join(keys) + "\n")
        for row in trace:
            fh.write("\t".join(repr(row.get(k, float("nan"))) for k in keys) + "\n")
