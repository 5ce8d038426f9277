"""Swapped-prediction losses over prototype codes, in float64 numpy.

Embeddings live on the unit sphere, prototypes are unit-norm rows of ``C``
(K x d). Codes ``Q`` come from a Sinkhorn-Knopp equal-partition assignment of
the batch scores and are constants for differentiation.

The set loss treats every region of a video as a view of every other region:
for a set of N embeddings with codes q_i and predictions
p_j = softmax(C z_j / tau),

    L_set = -1/(N^2 - N) * sum_i sum_{j != i} q_i . log p_j

and the batch loss is the mean of L_set over sets. With N = 2 it is half the
classic two-view swapped loss.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import log_softmax, logsumexp

from .errors import DimensionMismatch, NumericalOverflow, SetTooSmall, ZeroVector

DEFAULT_TAU = 0.1
DEFAULT_EPSILON = 0.05
DEFAULT_SINKHORN_ITERS = 3


def normalize_embedding(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    if not norm > 0:
        raise ZeroVector("cannot normalize a zero vector")
    return v / norm


def normalize_rows(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ZeroVector("cannot normalize a zero row")
    return m / norms


@dataclass
class PrototypeBank:
    C: np.ndarray

    def __post_init__(self):
        self.C = np.asarray(self.C, dtype=np.float64)
        if self.C.ndim != 2:
            raise DimensionMismatch(f"prototype matrix must be 2-D, got shape {self.C.shape}")

    @classmethod
    def random(cls, n_prototypes: int, dim: int, rng: np.random.Generator) -> "PrototypeBank":
        return cls(normalize_rows(rng.standard_normal((n_prototypes, dim))))

    @property
    def n_prototypes(self) -> int:
        return self.C.shape[0]

    @property
    def dim(self) -> int:
        return self.C.shape[1]

    def renormalize(self) -> None:
        self.C = normalize_rows(self.C)


@dataclass
class CodeMatrix:
    Q: np.ndarray
    tau: float = DEFAULT_TAU
    epsilon: float = DEFAULT_EPSILON
    iters: int = DEFAULT_SINKHORN_ITERS
    # max |column sum - B/K| before the final row renormalization
    column_gap: float = 0.0


@dataclass
class SetBatch:
    """``embeddings`` is (S*N) x d with the N members of each set contiguous."""

    embeddings: np.ndarray
    n_per_set: int
    provenance: list = field(default_factory=list)

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.n_per_set < 2:
            raise SetTooSmall(f"sets need at least 2 members, got {self.n_per_set}")
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] % self.n_per_set:
            raise DimensionMismatch(
                f"{self.embeddings.shape[0]} embeddings do not split into sets of {self.n_per_set}")
        if self.provenance and len(self.provenance) != self.embeddings.shape[0]:
            raise DimensionMismatch("provenance length does not match the number of embeddings")

    @property
    def n_sets(self) -> int:
        return self.embeddings.shape[0] // self.n_per_set


def _matrix(bank) -> np.ndarray:
    return bank.C if isinstance(bank, PrototypeBank) else np.asarray(bank, dtype=np.float64)


def compute_scores(batch, bank) -> np.ndarray:
    """Cosine scores ``z_b . c_k`` for every embedding/prototype pair (B x K)."""
    Z = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    C = _matrix(bank)
    if Z.shape[1] != C.shape[1]:
        raise DimensionMismatch(f"embedding dim {Z.shape[1]} != prototype dim {C.shape[1]}")
    return Z @ C.T


def sinkhorn_codes(scores, epsilon: float = DEFAULT_EPSILON, iters: int = DEFAULT_SINKHORN_ITERS,
                   tau: float = DEFAULT_TAU) -> CodeMatrix:
    """Equal-partition soft assignment of B embeddings to K prototypes.

    Runs ``iters`` rounds of column (prototype) then row (sample) rescaling of
    ``exp(scores / epsilon)`` toward uniform marginals, in log space, then
    renormalizes every row to sum to one.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise DimensionMismatch(f"scores must be 2-D, got shape {scores.shape}")
    if epsilon <= 0 or iters < 1:
        raise ValueError("epsilon must be > 0 and iters >= 1")
    B, K = scores.shape
    if B < K:
        warnings.warn(f"Sinkhorn with fewer samples ({B}) than prototypes ({K})", RuntimeWarning, stacklevel=2)
    if not np.all(np.isfinite(scores)):
        raise NumericalOverflow("non-finite scores")

    log_q = scores / epsilon
    log_q = log_q - log_q.max()
    log_q = log_q - logsumexp(log_q)
    log_b, log_k = -np.log(B), -np.log(K)
    column_gap = 0.0
    for _ in range(iters):
        log_q = log_q - logsumexp(log_q, axis=0, keepdims=True) + log_k
        # equal-partition gap just before the final row normalization
        column_gap = float(np.max(np.abs(np.exp(logsumexp(log_q, axis=0)) * B - B / K)))
        log_q = log_q - logsumexp(log_q, axis=1, keepdims=True) + log_b
    Q = np.exp(log_q - logsumexp(log_q, axis=1, keepdims=True))
    if not np.all(np.isfinite(Q)):
        raise NumericalOverflow("Sinkhorn produced non-finite codes")
    return CodeMatrix(Q, tau=tau, epsilon=epsilon, iters=iters, column_gap=column_gap)


def _log_predictions(Z: np.ndarray, C: np.ndarray, tau: float) -> np.ndarray:
    return log_softmax(compute_scores(Z, C) / tau, axis=1)


def swap_term(q, z, bank, tau: float = DEFAULT_TAU) -> float:
    """Cross-entropy of code ``q`` against the prediction from embedding ``z``."""
    logp = _log_predictions(np.atleast_2d(z), _matrix(bank), tau)[0]
    return float(-np.dot(np.asarray(q, dtype=np.float64), logp))


def swav_pair_loss(z1, z2, q1, q2, bank, tau: float = DEFAULT_TAU) -> float:
    """Two-view swapped prediction loss: predict q1 from z2 and q2 from z1."""
    C = _matrix(bank)
    for z in (z1, z2):
        if np.shape(z)[-1] != C.shape[1]:
            raise DimensionMismatch("embedding and prototype dimensions differ")
    for q in (q1, q2):
        if np.shape(q)[-1] != C.shape[0]:
            raise DimensionMismatch("code length differs from the number of prototypes")
    return swap_term(q1, z2, C, tau) + swap_term(q2, z1, C, tau)


def _check_codes(batch: SetBatch, C: np.ndarray, Q: np.ndarray) -> None:
    if batch.embeddings.shape[1] != C.shape[1]:
        raise DimensionMismatch("embedding and prototype dimensions differ")
    if Q.shape != (batch.embeddings.shape[0], C.shape[0]):
        raise DimensionMismatch(f"codes of shape {Q.shape} do not match batch and bank")


def _codes(codes) -> np.ndarray:
    return codes.Q if isinstance(codes, CodeMatrix) else np.asarray(codes, dtype=np.float64)


def swav_s_loss_and_grad(batch: SetBatch, bank, tau: float = DEFAULT_TAU, codes=None,
                         need_grad: bool = True):
    """Set loss and, optionally, its gradients w.r.t. embeddings and prototypes.

    Codes are held constant. Returns ``(loss, grad_z, grad_C)``; the gradients
    are ``None`` when ``need_grad`` is false.
    """
    C = _matrix(bank)
    if codes is None:
        codes = sinkhorn_codes(compute_scores(batch.embeddings, C))
    Q = _codes(codes)
    _check_codes(batch, C, Q)
    S, N = batch.n_sets, batch.n_per_set
    Z = batch.embeddings
    logp = _log_predictions(Z, C, tau)

    Qs = Q.reshape(S, N, -1)
    Ls = logp.reshape(S, N, -1)
    cross = np.einsum("sik,sjk->sij", Qs, Ls)
    per_set = -(cross.sum(axis=(1, 2)) - np.trace(cross, axis1=1, axis2=2)) / (N * N - N)
    loss = float(per_set.mean())
    if not need_grad:
        return loss, None, None

    # d loss / d logits_j = w * sum_{i != j} (|q_i| p_j - q_i), logits = C z / tau
    w = 1.0 / ((N * N - N) * S)
    q_mass = Qs.sum(axis=2)
    others_mass = q_mass.sum(axis=1, keepdims=True) - q_mass
    others_codes = Qs.sum(axis=1, keepdims=True) - Qs
    g_logits = w * (others_mass[..., None] * np.exp(Ls) - others_codes)
    g_logits = g_logits.reshape(S * N, -1)
    grad_z = g_logits @ C / tau
    grad_C = g_logits.T @ Z / tau
    return loss, grad_z, grad_C


def swav_s_loss(batch: SetBatch, bank, tau: float = DEFAULT_TAU, codes=None) -> float:
    return swav_s_loss_and_grad(batch, bank, tau, codes, need_grad=False)[0]


def swav_s_grad(batch: SetBatch, bank, tau: float = DEFAULT_TAU, codes=None):
    _, grad_z, grad_C = swav_s_loss_and_grad(batch, bank, tau, codes)
    return grad_z, grad_C


def pair_batch(z1, z2, provenance: Optional[Sequence] = None) -> SetBatch:
    """Interleave two aligned view matrices into a batch of 2-member sets."""
    z1, z2 = np.atleast_2d(z1), np.atleast_2d(z2)
    stacked = np.stack([z1, z2], axis=1).reshape(-1, z1.shape[1])
    return SetBatch(stacked, 2, list(provenance or []))
