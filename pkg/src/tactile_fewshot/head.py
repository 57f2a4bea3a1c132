"""Cosine-softmax prototypical head with per-episode adaptation of (W, b).

Logits are ``alpha * <x/|x|, w_n/|w_n|> + b_n``. W starts as the
row-normalized class prototypes and b at zero; adaptation minimizes the
support cross-entropy plus ``lam`` times the posterior entropy with Adam,
full batch, for a fixed number of steps. Embeddings are never modified.

Zero-norm embeddings or weight rows normalize to the zero vector, so their
cosine term is 0 and the logit reduces to the bias.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class EpisodeError(ValueError):
    pass


@dataclass(frozen=True)
class HeadConfig:
    alpha: float = 10.0
    lam: float = 0.10
    steps: int = 250
    lr: float = 1.5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam decay rates must lie in [0, 1)")


@dataclass(eq=False)
class Episode:
    n_way: int
    k_shot: int
    support: np.ndarray
    support_labels: np.ndarray
    query: np.ndarray
    query_labels: np.ndarray
    class_map: tuple = ()
    support_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, int))
    query_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, int))


@dataclass(eq=False)
class AdaptedHead:
    W: np.ndarray
    b: np.ndarray
    alpha: float
    config: HeadConfig = HeadConfig()
    loss_trace: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def n_way(self) -> int:
        return self.W.shape[0]

    def same_state(self, other: "AdaptedHead") -> bool:
        return (
            self.W.tobytes() == other.W.tobytes()
            and self.b.tobytes() == other.b.tobytes()
            and self.alpha == other.alpha
            and self.loss_trace.tobytes() == other.loss_trace.tobytes()
        )


def normalize_rows(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalize; returns ``(normalized, inverse_norms)`` with zero rows kept at 0."""
    m = np.asarray(m, dtype=float)
    norms = np.sqrt(np.einsum("...i,...i->...", m, m))
    inv = np.zeros_like(norms)
    np.divide(1.0, norms, out=inv, where=norms > 0)
    return m * inv[..., None], inv


def compute_prototypes(support: np.ndarray, labels: np.ndarray, n_way: int) -> np.ndarray:
    """Class-wise mean of support embeddings, one row per class slot."""
    support = np.atleast_2d(np.asarray(support, dtype=float))
    labels = np.asarray(labels, dtype=int)
    counts = np.bincount(labels, minlength=n_way)
    if counts.size > n_way or np.any(labels < 0):
        raise EpisodeError(f"support labels must lie in 0..{n_way - 1}")
    if np.any(counts == 0):
        raise EpisodeError(f"empty class slot(s) {np.flatnonzero(counts == 0).tolist()}")
    sums = np.zeros((n_way, support.shape[1]))
    np.add.at(sums, labels, support)
    return sums / counts[:, None]


def init_head(support: np.ndarray, labels: np.ndarray, n_way: int, alpha: float = 10.0, config: HeadConfig | None = None) -> AdaptedHead:
    """Unadapted head: normalized prototypes, zero bias."""
    protos = compute_prototypes(support, labels, n_way)
    W, _ = normalize_rows(protos)
    return AdaptedHead(W, np.zeros(n_way), float(alpha), config or HeadConfig(alpha=alpha))


def head_logits(x: np.ndarray, head: AdaptedHead) -> np.ndarray:
    """``alpha * cos(x, w_n) + b_n`` for one embedding or a batch of rows."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != head.W.shape[1]:
        raise ValueError(f"embedding length {x.shape[-1]} does not match head dimension {head.W.shape[1]}")
    xh, _ = normalize_rows(x)
    wh, _ = normalize_rows(head.W)
    return head.alpha * (xh @ wh.T) + head.b


def posteriors(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_posteriors(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def predict(x: np.ndarray, head: AdaptedHead) -> np.ndarray:
    """Argmax class slot; ties go to the smallest slot."""
    return np.argmax(head_logits(x, head), axis=-1)


def _forward(xh, onehot, W, b, alpha, lam):
    """Loss and gradients with pre-normalized support rows ``xh``."""
    wh, inv = normalize_rows(W)
    z = alpha * (xh @ wh.T) + b
    logp = _log_posteriors(z)
    p = np.exp(logp)
    ent = -(p * logp).sum(axis=1)
    m = xh.shape[0]
    per = -(onehot * logp).sum(axis=1) + lam * ent
    # shifted mean: exact when every row has the same loss
    loss = per[0] + (per - per[0]).sum() / m
    g = (p - onehot - lam * p * (logp + ent[:, None])) / m
    db = g.sum(axis=0)
    dwh = alpha * (g.T @ xh)
    radial = (wh * dwh).sum(axis=1)
    dW = (dwh - wh * radial[:, None]) * inv[:, None]
    return loss, dW, db


def _onehot(labels: np.ndarray, n_way: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    out = np.zeros((labels.size, n_way))
    out[np.arange(labels.size), labels] = 1.0
    return out


def support_loss(head: AdaptedHead, support: np.ndarray, labels: np.ndarray, lam: float | None = None) -> float:
    """Mean over support of ``-log p(y|x) + lam * H(p(.|x))``."""
    lam = head.config.lam if lam is None else lam
    xh, _ = normalize_rows(np.atleast_2d(support))
    loss, _, _ = _forward(xh, _onehot(labels, head.n_way), head.W, head.b, head.alpha, lam)
    return float(loss)


def loss_gradients(head: AdaptedHead, support: np.ndarray, labels: np.ndarray, lam: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Analytic ``(dL/dW, dL/db)`` of :func:`support_loss`."""
    lam = head.config.lam if lam is None else lam
    xh, _ = normalize_rows(np.atleast_2d(support))
    _, dW, db = _forward(xh, _onehot(labels, head.n_way), head.W, head.b, head.alpha, lam)
    return dW, db


def adapt(support: np.ndarray, labels: np.ndarray, n_way: int, config: HeadConfig | None = None) -> AdaptedHead:
    """Fit (W, b) on the support set with Adam; alpha stays fixed.

    With ``config.steps == 0`` this returns exactly :func:`init_head`.
    """
    cfg = config or HeadConfig()
    head = init_head(support, labels, n_way, cfg.alpha, cfg)
    xh, _ = normalize_rows(np.atleast_2d(support))
    onehot = _onehot(labels, n_way)
    W, b = head.W.copy(), head.b.copy()
    mW, vW = np.zeros_like(W), np.zeros_like(W)
    mb, vb = np.zeros_like(b), np.zeros_like(b)
    trace = np.empty(cfg.steps + 1)
    b1, b2 = cfg.beta1, cfg.beta2
    for step in range(1, cfg.steps + 1):
        loss, dW, db = _forward(xh, onehot, W, b, cfg.alpha, cfg.lam)
        trace[step - 1] = loss
        mW = b1 * mW + (1 - b1) * dW
        vW = b2 * vW + (1 - b2) * dW * dW
        mb = b1 * mb + (1 - b1) * db
        vb = b2 * vb + (1 - b2) * db * db
        step_size = cfg.lr / (1 - b1**step)
        c2 = 1.0 / (1 - b2**step)
        W = W - step_size * mW / (np.sqrt(vW * c2) + cfg.eps)
        b = b - step_size * mb / (np.sqrt(vb * c2) + cfg.eps)
    trace[cfg.steps] = _forward(xh, onehot, W, b, cfg.alpha, cfg.lam)[0]
    return AdaptedHead(W, b, cfg.alpha, cfg, trace)


def classify_queries(episode: Episode, head: AdaptedHead) -> tuple[np.ndarray, float]:
    """Forward-only predictions for the query set and their accuracy."""
    q = np.asarray(episode.query, dtype=float)
    if q.size == 0 or len(episode.query_labels) == 0:
        raise EpisodeError("empty query set; accuracy undefined")
    if q.ndim != 2 or q.shape[1] != head.W.shape[1]:
        raise ValueError(f"query embeddings of shape {q.shape} do not match head dimension {head.W.shape[1]}")
    if head.n_way != episode.n_way:
        raise ValueError(f"head has {head.n_way} classes, episode has {episode.n_way}")
    pred = predict(q, head)
    return pred, float(np.mean(pred == np.asarray(episode.query_labels)))
