"""CTC loss via log-domain forward-backward, its analytic gradient, greedy
decoding, and an exhaustive path-enumeration oracle for tests."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .labels import BLANK_ID, InvalidTokenError, collapse

# Probabilities are floored before the log so a softmax underflow cannot
# poison the lattice with -inf.
PROB_FLOOR = 1e-30
ORACLE_MAX_PATHS = 1_000_000


class InfeasibleAlignmentError(ValueError):
    """The target cannot be aligned within the frame count (loss would be +inf)."""


class OracleSizeError(ValueError):
    """Brute-force path enumeration would exceed the path budget."""


@dataclass
class CtcResult:
    """Loss in nats, gradient w.r.t. the probability matrix, and the
    log-domain DP tables over the blank-extended label lattice."""

    loss: float
    grad: np.ndarray
    log_alpha: np.ndarray
    log_beta: np.ndarray


def _check_probs(probs: np.ndarray) -> np.ndarray:
    z = np.asarray(probs, dtype=np.float64)
    if z.ndim != 2:
        raise ValueError(f"probability matrix must be 2-D, got shape {z.shape}")
    if z.shape[0] < 1 or z.shape[1] < 2:
        raise ValueError(f"probability matrix needs >=1 frame and >=2 classes, got {z.shape}")
    return z


def _check_target(target: Sequence[int], n_classes: int) -> list[int]:
    out = []
    for idx in target:
        i = int(idx)
        if not 1 <= i < n_classes:
            raise InvalidTokenError(f"target id {i} not in [1, {n_classes - 1}]")
        out.append(i)
    return out


def validate_prob_matrix(probs: np.ndarray, tol: float = 1e-6) -> None:
    """Check the row-stochastic contract: positive entries, rows summing to 1."""
    z = _check_probs(probs)
    if not np.isfinite(z).all() or (z <= 0.0).any():
        raise ValueError("probability matrix must be strictly positive and finite")
    worst = np.abs(z.sum(axis=1) - 1.0).max()
    if worst > tol:
        raise ValueError(f"rows must sum to 1 within {tol}, worst deviation {worst:.3g}")


def min_frames(target: Sequence[int]) -> int:
    """Minimum frame count that can realize the target: length plus one forced
    blank per adjacent repeated label."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def extended_labels(target: Sequence[int]) -> np.ndarray:
    """Blank-interleaved label lattice: blank at both ends and between labels."""
    ext = np.full(2 * len(target) + 1, BLANK_ID, dtype=np.int64)
    ext[1::2] = target
    return ext


def _logsumexp_rows(a: np.ndarray) -> np.ndarray:
    top = a.max(axis=1)
    safe = np.isfinite(top)
    out = np.full(a.shape[0], -np.inf)
    if safe.any():
        shifted = a[safe] - top[safe, None]
        out[safe] = top[safe] + np.log(np.exp(shifted).sum(axis=1))
    return out


def ctc_loss(probs: np.ndarray, target: Sequence[int]) -> CtcResult:
    """Negative log-likelihood of `target` under per-frame posteriors `probs`.

    Marginalizes over every frame-level path that collapses to the target,
    using the standard forward-backward recursion over the blank-extended
    lattice.  The gradient w.r.t. each probability entry is recombined from
    the alpha/beta occupancies, so no graph framework is needed here.
    """
    z = _check_probs(probs)
    t_frames, n_classes = z.shape
    y = _check_target(target, n_classes)
    need = min_frames(y)
    if t_frames < need:
        raise InfeasibleAlignmentError(
            f"target of length {len(y)} needs at least {need} frames, got {t_frames}"
        )

    logz = np.log(np.maximum(z, PROB_FLOOR))
    ext = extended_labels(y)
    s_len = ext.size
    em = logz[:, ext]  # (T, S) per-frame log-prob of each lattice state

    allow_skip = np.zeros(s_len, dtype=bool)
    if s_len > 2:
        allow_skip[2:] = (ext[2:] != BLANK_ID) & (ext[2:] != ext[:-2])

    # alpha includes the emission at t; beta is the suffix mass from t+1 on.
    log_alpha = np.full((t_frames, s_len), -np.inf)
    log_alpha[0, 0] = em[0, 0]
    if s_len > 1:
        log_alpha[0, 1] = em[0, 1]
    for t in range(1, t_frames):
        prev = log_alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        if s_len > 2:
            acc[2:] = np.logaddexp(acc[2:], np.where(allow_skip[2:], prev[:-2], -np.inf))
        log_alpha[t] = acc + em[t]

    if s_len == 1:
        log_p = log_alpha[-1, -1]
    else:
        log_p = np.logaddexp(log_alpha[-1, -1], log_alpha[-1, -2])

    log_beta = np.full((t_frames, s_len), -np.inf)
    log_beta[-1, -1] = 0.0
    if s_len > 1:
        log_beta[-1, -2] = 0.0
    for t in range(t_frames - 2, -1, -1):
        nxt = log_beta[t + 1] + em[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        if s_len > 2:
            acc[:-2] = np.logaddexp(acc[:-2], np.where(allow_skip[2:], nxt[2:], -np.inf))
        log_beta[t] = acc

    # alpha_t(s) * beta_t(s) is the probability of all paths through state s
    # at frame t; summing per emitted class and dividing by z gives the grad.
    # Normalizing by log_p first keeps the exponentials in [0, 1].
    occupancy = np.exp(log_alpha + log_beta - log_p)
    indicator = np.zeros((s_len, n_classes))
    indicator[np.arange(s_len), ext] = 1.0
    grad = -(occupancy @ indicator) / np.maximum(z, PROB_FLOOR)
    grad += 0.0  # normalize -0.0 entries

    return CtcResult(loss=float(-log_p), grad=grad, log_alpha=log_alpha, log_beta=log_beta)


def ctc_grad_wrt_probs(probs: np.ndarray, target: Sequence[int]) -> np.ndarray:
    """Gradient of the CTC loss w.r.t. each probability entry."""
    return ctc_loss(probs, target).grad


def greedy_decode(probs: np.ndarray) -> list[int]:
    """Collapse of the per-frame argmax path; ties break toward the lowest id."""
    z = _check_probs(probs)
    best = np.argmax(z, axis=1)
    return collapse(best.tolist(), z.shape[1])


def brute_force_loss(probs: np.ndarray, target: Sequence[int]) -> float:
    """Direct evaluation of the CTC objective by enumerating every path.

    Sums the product of per-frame probabilities over each path whose collapse
    equals the target.  Independent of the forward-backward recursion; used
    as the test oracle.  Returns +inf when no path realizes the target.
    """
    z = _check_probs(probs)
    t_frames, n_classes = z.shape
    y = np.asarray(_check_target(target, n_classes), dtype=np.int64)
    n_paths = n_classes**t_frames
    if n_paths > ORACLE_MAX_PATHS:
        raise OracleSizeError(f"{n_classes}^{t_frames} paths exceed budget {ORACLE_MAX_PATHS}")

    paths = np.stack(
        np.unravel_index(np.arange(n_paths), (n_classes,) * t_frames), axis=1
    )  # (n_paths, T)
    path_prob = z[np.arange(t_frames), paths].prod(axis=1)

    changed = np.ones_like(paths, dtype=bool)
    changed[:, 1:] = paths[:, 1:] != paths[:, :-1]
    keep = changed & (paths != BLANK_ID)
    hits = keep.sum(axis=1) == y.size
    if y.size:
        cand = paths[hits]
        collapsed = cand[keep[hits]].reshape(-1, y.size)
        hit_prob = path_prob[hits][(collapsed == y).all(axis=1)]
    else:
        hit_prob = path_prob[hits]
    total = hit_prob.sum()
    if total <= 0.0:
        return math.inf
    return float(-np.log(total))
