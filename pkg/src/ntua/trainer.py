"""Fine-tuning of cache keys: weighted cross-entropy, analytic gradient, AdamW, cosine schedule."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .cache import FALLBACK, WeightedCache, adapter_logits, phi
from .data_store import ClassifierWeights, EmbeddingSet


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    base_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0
    use_weights_in_loss: bool = True  # cache weights inside the training logits
    include_omega: bool = True
    logit_scale: float = 1.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.base_lr >= 0:
            raise ValueError("base_lr must be non-negative")


@dataclass
class TrainReport:
    epoch_losses: list[float]
    final_loss: float
    wall_time: float
    steps: int
    config: dict = field(default_factory=dict)
    seed: int = 0

    def to_dict(self, include_time: bool = True) -> dict:
        d = asdict(self)
        if not include_time:
            d.pop("wall_time")
        return d


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def weighted_ce_loss(logits, labels, omega) -> float:
    """(1/m) sum_i omega_i * CE(logits_i, labels_i).

    ``labels`` may be class indices or one-hot rows.
    """
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite logits")
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels.argmax(axis=1)
    omega = np.asarray(omega, dtype=np.float64).reshape(-1)
    if not (z.shape[0] == labels.size == omega.size):
        raise ValueError("logits, labels and omega differ in length")
    if np.any(omega < 0):
        raise ValueError("omega must be non-negative")
    nll = -log_softmax(z)[np.arange(z.shape[0]), labels]
    return float(np.sum(omega * nll) / z.shape[0])


def _forward(keys, queries, cache: WeightedCache, w: np.ndarray, use_weights: bool, scale: float):
    s = queries @ keys.T
    a = phi(s, cache.beta)
    aw = a * cache.weights[None, :] if use_weights else a
    z = scale * (cache.alpha * (aw @ cache.values) + queries @ w.T)
    return a, z


def loss_and_grad(
    keys: np.ndarray,
    queries: np.ndarray,
    labels: np.ndarray,
    omega: np.ndarray,
    cache: WeightedCache,
    w,
    use_weights: bool = True,
    logit_scale: float = 1.0,
) -> tuple[float, np.ndarray]:
    """Loss and its gradient with respect to ``keys`` only.

    Chain: z = scale*(alpha*(phi(q k^T) [*c]) V + q W^T); phi' = beta*phi.
    """
    keys = np.asarray(keys, dtype=np.float64)
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    wm = np.asarray(w.matrix if isinstance(w, ClassifierWeights) else w, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    omega = np.asarray(omega, dtype=np.float64)
    m = q.shape[0]
    a, z = _forward(keys, q, cache, wm, use_weights, logit_scale)
    if not np.all(np.isfinite(z)):
        raise TrainingError(f"non-finite logits (max |logit| {np.nanmax(np.abs(z))})")
    logp = log_softmax(z)
    loss = float(np.sum(omega * -logp[np.arange(m), labels]) / m)
    dz = np.exp(logp)
    dz[np.arange(m), labels] -= 1.0
    dz *= (omega / m)[:, None] * logit_scale
    da = cache.alpha * (dz @ cache.values.T)  # (m, M)
    if use_weights:
        da = da * cache.weights[None, :]
    ds = da * (cache.beta * a)
    return loss, ds.T @ q


def loss_grad_keys(cache: WeightedCache, queries, labels, omega, w, use_weights: bool = True, logit_scale: float = 1.0):
    return loss_and_grad(cache.keys, queries, labels, omega, cache, w, use_weights, logit_scale)[1]


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise ValueError("need 0 <= step <= total_steps and total_steps >= 1")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, params: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(params, dtype=np.float64), np.zeros_like(params, dtype=np.float64))


def adamw_step(params, grads, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
    """One decoupled-weight-decay Adam update; returns (params, state) as new arrays."""
    t = state.t + 1
    m = beta1 * state.m + (1 - beta1) * grads
    v = beta2 * state.v + (1 - beta2) * grads * grads
    m_hat = m / (1 - beta1**t)
    v_hat = v / (1 - beta2**t)
    new = params - lr * weight_decay * params - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new, AdamState(m, v, t)


def train_step(keys, state: AdamState, queries, labels, omega, cache: WeightedCache, w, lr: float, cfg: TrainConfig):
    """Loss/gradient on one batch followed by one AdamW update, all in float64."""
    loss, grad = loss_and_grad(keys, queries, labels, omega, cache, w, cfg.use_weights_in_loss, cfg.logit_scale)
    if not math.isfinite(loss):
        raise TrainingError("non-finite loss")
    keys, state = adamw_step(keys, grad, state, lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    return keys, state, loss


def training_queries(cache: WeightedCache, features: EmbeddingSet | None, w: ClassifierWeights) -> np.ndarray:
    """Query per cache row: the sample's student feature, or W_c for fallback rows."""
    if features is None:
        return cache.keys.astype(np.float64)
    idx = features.index_of()
    rows = []
    for rid, prov, c in zip(cache.row_ids, cache.provenance, cache.labels):
        if prov == FALLBACK:
            c0 = int(rid.split(":")[1])
            rows.append(w.matrix[c0])
        elif rid in idx:
            rows.append(features.features[idx[rid]])
        else:
            raise KeyError(f"no training feature for cached sample {rid!r}")
    return np.asarray(rows, dtype=np.float64).reshape(-1, cache.dim)


def train_keys(
    cache: WeightedCache,
    queries: np.ndarray,
    labels: np.ndarray,
    omega: np.ndarray | None,
    w: ClassifierWeights,
    cfg: TrainConfig,
) -> tuple[WeightedCache, TrainReport]:
    """Fine-tune cache keys with shuffled mini-batches; everything else stays frozen."""
    start = time.perf_counter()
    q = np.asarray(queries, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    m = q.shape[0]
    if labels.size != m:
        raise ValueError("labels and queries differ in length")
    if omega is None or not cfg.include_omega:
        omega = np.ones(m)
    omega = np.asarray(omega, dtype=np.float64)
    if omega.size != m:
        raise ValueError("omega and queries differ in length")
    wm = np.asarray(w.matrix, dtype=np.float64)
    rng = np.random.default_rng(cfg.seed)
    keys = cache.keys.astype(np.float64)
    state = AdamState.zeros_like(keys)
    n_batches = -(-m // cfg.batch_size)
    total = cfg.epochs * n_batches
    step = 0
    epoch_losses = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(m)
        losses = []
        for b in range(n_batches):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            lr = cosine_lr(step, total, cfg.base_lr)
            try:
                keys, state, loss = train_step(keys, state, q[idx], labels[idx], omega[idx], cache, wm, lr, cfg)
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}, batch {b}: {exc}") from None
            losses.append(loss * idx.size)
            step += 1
        epoch_losses.append(float(sum(losses) / m))
    # final loss over the whole training set with the trained keys
    final_loss, _ = loss_and_grad(keys, q, labels, omega, cache, wm, cfg.use_weights_in_loss, cfg.logit_scale)
    trained = cache.with_keys(keys.astype(np.float32))
    report = TrainReport(
        epoch_losses=epoch_losses,
        final_loss=float(final_loss),
        wall_time=time.perf_counter() - start,
        steps=step,
        config=asdict(cfg),
        seed=cfg.seed,
    )
    return trained, report


def initial_loss(cache: WeightedCache, queries, labels, omega, w, cfg: TrainConfig) -> float:
    z = adapter_logits(queries, cache, w, cfg.use_weights_in_loss) * cfg.logit_scale
    om = np.ones(len(labels)) if omega is None or not cfg.include_omega else omega
    return weighted_ce_loss(z, labels, om)
