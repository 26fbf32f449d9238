"""Training objectives with analytic gradients.

Every function returns a :class:`LossValue` holding the scalar, gradients
keyed by input name, and a per-component breakdown. Coefficient inputs may be
single vectors ``(P,)`` or batches ``(B, P)``; batched squared-error and
triplet losses average over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from voxface.errors import DataError, NumericalError

TRIPLET_MARGIN = 1.0
KD_EPS = 1e-12


@dataclass
class LossValue:
    value: float
    grads: dict[str, np.ndarray] = field(default_factory=dict)
    parts: dict[str, float] = field(default_factory=dict)
    flags: set[str] = field(default_factory=set)


def _as_coeffs(x) -> np.ndarray:
    if hasattr(x, "values"):
        x = x.values
    return np.asarray(x, dtype=np.float64)


def _check_same(*arrays):
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise DataError(f"coefficient shapes differ: {sorted(shapes)}")


def _batch_count(a: np.ndarray) -> int:
    return 1 if a.ndim == 1 else a.shape[0]


def reg_loss(alpha, alpha_star) -> LossValue:
    """Squared Euclidean distance to the ground-truth coefficients."""
    a, g = _as_coeffs(alpha), _as_coeffs(alpha_star)
    _check_same(a, g)
    diff = a - g
    nb = _batch_count(a)
    value = float(np.sum(diff * diff)) / nb
    return LossValue(value, {"alpha": 2.0 * diff / nb}, {"reg": value})


def pgt_loss(alpha_expert, alpha) -> LossValue:
    """Squared distance to the expert's pseudo ground truth."""
    out = reg_loss(alpha, alpha_expert)
    out.parts = {"pgt": out.value}
    return out


def triplet_loss(alpha, alpha_pos, alpha_neg) -> LossValue:
    """Hinge ``max(|a - p| - |a - n| + 1, 0)`` on Euclidean coefficient distances.

    Where the hinge argument is exactly zero the zero branch is taken. A zero
    distance contributes a zero subgradient for its own term.
    """
    a, p, n = _as_coeffs(alpha), _as_coeffs(alpha_pos), _as_coeffs(alpha_neg)
    _check_same(a, p, n)
    a2, p2, n2 = np.atleast_2d(a), np.atleast_2d(p), np.atleast_2d(n)
    dp_vec, dn_vec = a2 - p2, a2 - n2
    dp = np.linalg.norm(dp_vec, axis=1)
    dn = np.linalg.norm(dn_vec, axis=1)
    arg = dp - dn + TRIPLET_MARGIN
    active = arg > 0
    nb = a2.shape[0]
    value = float(np.sum(np.where(active, arg, 0.0))) / nb

    with np.errstate(invalid="ignore", divide="ignore"):
        up = np.where(dp[:, None] > 0, dp_vec / dp[:, None], 0.0)
        un = np.where(dn[:, None] > 0, dn_vec / dn[:, None], 0.0)
    w = active[:, None] / nb
    ga, gp, gn = w * (up - un), -w * up, w * un
    shape = a.shape
    return LossValue(
        value,
        {"alpha": ga.reshape(shape), "alpha_pos": gp.reshape(shape), "alpha_neg": gn.reshape(shape)},
        {"tri": value},
    )


# -- GAN real / fake compositions --------------------------------------------


@dataclass(frozen=True)
class LogitsBatch:
    """Discriminator and classifier outputs for a batch.

    ``real_flags`` marks items whose discriminator target is "real"; the
    dedicated :func:`gan_real_loss` / :func:`gan_fake_loss` override it.
    """

    disc_logits: np.ndarray
    class_logits: np.ndarray
    labels: np.ndarray
    real_flags: Optional[np.ndarray] = None

    def __post_init__(self):
        d = np.asarray(self.disc_logits, dtype=np.float64).reshape(-1)
        c = np.atleast_2d(np.asarray(self.class_logits, dtype=np.float64))
        lab = np.asarray(self.labels).reshape(-1)
        if c.shape[0] != d.size or lab.size != d.size:
            raise DataError("disc logits, class logits and labels need the same batch size")
        if not (np.all(np.isfinite(d)) and np.all(np.isfinite(c))):
            raise DataError("logits must be finite")
        if lab.size and (lab.min() < 0 or lab.max() >= c.shape[1]):
            raise DataError(f"label out of range for {c.shape[1]} classes")
        object.__setattr__(self, "disc_logits", d)
        object.__setattr__(self, "class_logits", c)
        object.__setattr__(self, "labels", lab.astype(np.int64))
        if self.real_flags is not None:
            f = np.asarray(self.real_flags, dtype=bool).reshape(-1)
            if f.size != d.size:
                raise DataError("real_flags must have one entry per item")
            object.__setattr__(self, "real_flags", f)


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def _sigmoid(x):
    return np.exp(_log_sigmoid(x))


def _log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))


def gan_loss(batch: LogitsBatch, real_target=None) -> LossValue:
    """Binary cross-entropy of the discriminator plus categorical
    cross-entropy of the identity classifier, each averaged over the batch."""
    d = batch.disc_logits
    nb = d.size
    if real_target is None:
        if batch.real_flags is None:
            raise DataError("batch has no real/fake flags")
        y = batch.real_flags.astype(np.float64)
    else:
        y = np.full(nb, float(real_target))
    # BCE(x, y) = -y log s(x) - (1-y) log s(-x)
    bce = -(y * _log_sigmoid(d) + (1 - y) * _log_sigmoid(-d))
    l_d = float(np.mean(bce))
    logp = _log_softmax(batch.class_logits)
    rows = np.arange(nb)
    l_c = float(-np.mean(logp[rows, batch.labels]))
    g_d = (_sigmoid(d) - y) / nb
    g_c = np.exp(logp)
    g_c[rows, batch.labels] -= 1.0
    g_c /= nb
    return LossValue(
        l_d + l_c,
        {"disc_logits": g_d, "class_logits": g_c},
        {"disc": l_d, "cls": l_c},
    )


def gan_real_loss(batch: LogitsBatch) -> LossValue:
    return gan_loss(batch, real_target=True)


def gan_fake_loss(batch: LogitsBatch) -> LossValue:
    return gan_loss(batch, real_target=False)


# -- probabilistic knowledge transfer ----------------------------------------


def _unit_rows(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(z, axis=-1)
    if np.any(norms == 0):
        raise DataError("cosine kernel is undefined for a zero feature vector")
    return z / norms[..., None], norms


def cosine_kernel(z_i, z_j) -> float:
    """Cosine similarity shifted and scaled into ``[0, 1]``."""
    (u, v), _ = _unit_rows(np.stack([np.ravel(z_i), np.ravel(z_j)]).astype(np.float64))
    return float(np.clip(0.5 * (u @ v + 1.0), 0.0, 1.0))


def cosine_kernel_grad(z_i, z_j) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of :func:`cosine_kernel` with respect to both arguments."""
    (u, v), (ni, nj) = _unit_rows(np.stack([np.ravel(z_i), np.ravel(z_j)]).astype(np.float64))
    c = u @ v
    return 0.5 * (v - c * u) / ni, 0.5 * (u - c * v) / nj


def kernel_matrix(features) -> np.ndarray:
    z = np.atleast_2d(np.asarray(features, dtype=np.float64))
    u, _ = _unit_rows(z)
    return np.clip(0.5 * (u @ u.T + 1.0), 0.0, 1.0)


def conditional_probs(features) -> np.ndarray:
    """Matrix ``P`` with ``P[i, j]`` the probability of item ``i`` given item ``j``.

    Each column is the kernel column normalized over the other items; the
    diagonal is zero.
    """
    z = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if z.shape[0] < 2:
        raise DataError("conditional probabilities need a batch of at least 2")
    k = kernel_matrix(z)
    np.fill_diagonal(k, 0.0)
    col = k.sum(axis=0)
    if np.any(col <= 0):
        raise NumericalError(
            f"column {int(np.argmin(col))} has no positive kernel value; "
            "its conditional distribution is undefined"
        )
    return k / col


def _probs_vjp(z: np.ndarray, grad_p: np.ndarray) -> np.ndarray:
    """Back-propagate ``dL/dP`` through :func:`conditional_probs` to the features."""
    u, norms = _unit_rows(z)
    k = np.clip(0.5 * (u @ u.T + 1.0), 0.0, 1.0)
    np.fill_diagonal(k, 0.0)
    s = k.sum(axis=0)
    p = k / s
    g_k = (grad_p - np.sum(grad_p * p, axis=0, keepdims=True)) / s
    np.fill_diagonal(g_k, 0.0)
    g_u = 0.5 * (g_k + g_k.T) @ u
    g_u -= np.sum(g_u * u, axis=1, keepdims=True) * u
    return g_u / norms[:, None]


def conditional_probs_vjp(features, grad_probs) -> np.ndarray:
    """Vector-Jacobian product of :func:`conditional_probs`."""
    z = np.atleast_2d(np.asarray(features, dtype=np.float64))
    conditional_probs(z)
    return _probs_vjp(z, np.asarray(grad_probs, dtype=np.float64))


def kd_divergence(expert, student) -> LossValue:
    """Sum over items of the KL divergence from the expert's conditional
    distribution to the student's; gradient with respect to ``student``.

    Student probabilities are floored at ``KD_EPS`` inside the logarithm; when
    the floor is hit, ``"clamped"`` is added to ``flags`` and the floored
    entries are treated as constants.
    """
    ze = np.atleast_2d(np.asarray(expert, dtype=np.float64))
    zs = np.atleast_2d(np.asarray(student, dtype=np.float64))
    if ze.shape[0] != zs.shape[0]:
        raise DataError(f"expert batch {ze.shape[0]} and student batch {zs.shape[0]} differ")
    pe = conditional_probs(ze)
    ps = conditional_probs(zs)
    off = ~np.eye(ze.shape[0], dtype=bool)
    mask = off & (pe > 0)
    flags = set()
    clamped = mask & (ps < KD_EPS)
    if clamped.any():
        flags.add("clamped")
    ps_safe = np.maximum(ps, KD_EPS)
    terms = np.zeros_like(pe)
    terms[mask] = pe[mask] * (np.log(pe[mask]) - np.log(ps_safe[mask]))
    value = float(terms.sum())
    grad_p = np.zeros_like(ps)
    live = mask & ~clamped
    grad_p[live] = -pe[live] / ps[live]
    grad = _probs_vjp(zs, grad_p)
    return LossValue(value, {"student": grad.reshape(np.shape(student))}, {"div": value}, flags)


# -- combined objectives -----------------------------------------------------


def kd_loss(alpha_expert, alpha, expert, student) -> LossValue:
    """Pseudo-ground-truth loss plus conditional-distribution divergence."""
    pg = pgt_loss(alpha_expert, alpha)
    div = kd_divergence(expert, student)
    return LossValue(
        pg.value + div.value,
        {"alpha": pg.grads["alpha"], "student": div.grads["student"]},
        {"pgt": pg.value, "div": div.value},
        set(div.flags),
    )


def supervised_loss(alpha, alpha_star, alpha_pos, alpha_neg, tri_weight: float = 1.0) -> LossValue:
    """Regression loss plus triplet loss."""
    reg = reg_loss(alpha, alpha_star)
    tri = triplet_loss(alpha, alpha_pos, alpha_neg)
    return LossValue(
        reg.value + tri_weight * tri.value,
        {
            "alpha": reg.grads["alpha"] + tri_weight * tri.grads["alpha"],
            "alpha_pos": tri_weight * tri.grads["alpha_pos"],
            "alpha_neg": tri_weight * tri.grads["alpha_neg"],
        },
        {"reg": reg.value, "tri": tri.value},
    )


UNSUPERVISED_TERMS = ("fake", "real", "kd", "tri")


def unsupervised_loss(
    components: Mapping[str, LossValue], weights: Optional[Mapping[str, float]] = None
) -> LossValue:
    """Weighted sum of the ``fake``, ``real``, ``kd`` and ``tri`` terms (weights
    default to 1; missing terms count as zero).

    Gradients with key ``alpha`` are summed across terms; every other gradient
    is kept under ``"<term>.<key>"``.
    """
    unknown = set(components) - set(UNSUPERVISED_TERMS)
    if unknown:
        raise DataError(f"unknown loss terms {sorted(unknown)}")
    weights = dict(weights or {})
    value = 0.0
    grads: dict[str, np.ndarray] = {}
    parts: dict[str, float] = {}
    flags: set[str] = set()
    for term in UNSUPERVISED_TERMS:
        comp = components.get(term)
        if comp is None:
            parts[term] = 0.0
            continue
        w = float(weights.get(term, 1.0))
        value += w * comp.value
        parts[term] = comp.value
        flags |= comp.flags
        for key, g in comp.grads.items():
            if key == "alpha":
                grads["alpha"] = grads.get("alpha", 0.0) + w * g
            else:
                grads[f"{term}.{key}"] = w * g
    return LossValue(value, grads, parts, flags)
