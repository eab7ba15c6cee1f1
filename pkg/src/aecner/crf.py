"""Linear-chain CRF over tag sequences.

Scores a tag sequence as the sum of per-position emission scores and
adjacent-tag transition scores, normalizes exactly with the log-space
forward recursion, differentiates the negative log-likelihood through
forward-backward posterior marginals, and decodes with Viterbi.

All functions are pure; batching across sentences is the caller's job.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .core import LabelScheme, TagSequence


class CrfError(ValueError):
    pass


@dataclass
class CrfParams:
    """Transition matrix trans[y, y'] = score of tag y at i followed by y' at i+1.

    Start/end boundary score vectors exist only when boundary mode is on;
    the default (off) matches a score that is purely emissions plus
    transitions.
    """

    trans: np.ndarray
    start: np.ndarray | None = None
    end: np.ndarray | None = None

    def __post_init__(self):
        self.trans = np.asarray(self.trans, dtype=np.float64)
        if self.trans.ndim != 2 or self.trans.shape[0] != self.trans.shape[1]:
            raise CrfError(f"transition matrix must be square, got {self.trans.shape}")
        if not np.all(np.isfinite(self.trans)):
            raise CrfError("transition matrix has non-finite entries")
        for name in ("start", "end"):
            vec = getattr(self, name)
            if vec is not None:
                vec = np.asarray(vec, dtype=np.float64)
                if vec.shape != (self.num_tags,):
                    raise CrfError(f"{name} scores must have shape ({self.num_tags},)")
                if not np.all(np.isfinite(vec)):
                    raise CrfError(f"{name} scores have non-finite entries")
                setattr(self, name, vec)
        if (self.start is None) != (self.end is None):
            raise CrfError("boundary mode needs both start and end scores")

    @property
    def num_tags(self) -> int:
        return self.trans.shape[0]

    @property
    def boundary(self) -> bool:
        return self.start is not None

    @staticmethod
    def zeros(num_tags: int, boundary: bool = False) -> "CrfParams":
        start = np.zeros(num_tags) if boundary else None
        end = np.zeros(num_tags) if boundary else None
        return CrfParams(np.zeros((num_tags, num_tags)), start, end)

    def copy(self) -> "CrfParams":
        return CrfParams(
            self.trans.copy(),
            None if self.start is None else self.start.copy(),
            None if self.end is None else self.end.copy(),
        )

    def tensors(self) -> dict[str, np.ndarray]:
        out = {"crf.trans": self.trans}
        if self.boundary:
            out["crf.start"] = self.start
            out["crf.end"] = self.end
        return out


def _check_emissions(E: np.ndarray, A: CrfParams) -> np.ndarray:
    E = np.asarray(E, dtype=np.float64)
    if E.ndim != 2:
        raise CrfError(f"emission matrix must be 2-D, got shape {E.shape}")
    if E.shape[0] < 1:
        raise CrfError("emission matrix needs at least one row")
    if E.shape[1] != A.num_tags:
        raise CrfError(
            f"emissions have {E.shape[1]} tags but transitions expect {A.num_tags}"
        )
    return E


def sequence_score(E: np.ndarray, A: CrfParams, y: TagSequence) -> float:
    """Score of one tag sequence: emissions at each position plus transitions
    between neighbors (plus boundary scores when enabled)."""
    E = _check_emissions(E, A)
    tags = np.asarray(y.tags, dtype=np.int64)
    n = E.shape[0]
    if tags.shape != (n,):
        raise CrfError(f"tag sequence length {tags.shape} does not match n={n}")
    if tags.min() < 0 or tags.max() >= A.num_tags:
        raise CrfError("tag index out of range")
    score = float(E[np.arange(n), tags].sum())
    if n > 1:
        score += float(A.trans[tags[:-1], tags[1:]].sum())
    if A.boundary:
        score += float(A.start[tags[0]] + A.end[tags[-1]])
    return score


def _forward(E: np.ndarray, A: CrfParams) -> np.ndarray:
    """alpha[i, t] = log sum over prefixes ending in tag t at position i."""
    n, T = E.shape
    alpha = np.empty((n, T))
    alpha[0] = E[0] + (A.start if A.boundary else 0.0)
    for i in range(1, n):
        alpha[i] = logsumexp(alpha[i - 1][:, None] + A.trans, axis=0) + E[i]
    return alpha


def _backward(E: np.ndarray, A: CrfParams) -> np.ndarray:
    """beta[i, t] = log sum over suffixes given tag t at position i."""
    n, T = E.shape
    beta = np.empty((n, T))
    beta[n - 1] = A.end if A.boundary else 0.0
    for i in range(n - 2, -1, -1):
        beta[i] = logsumexp(A.trans + E[i + 1] + beta[i + 1], axis=1)
    return beta


def log_partition(E: np.ndarray, A: CrfParams) -> float:
    """log of the normalizer: sum of exp(score) over every tag sequence."""
    E = _check_emissions(E, A)
    alpha = _forward(E, A)
    last = alpha[-1] + (A.end if A.boundary else 0.0)
    return float(logsumexp(last))


def posterior_marginals(E: np.ndarray, A: CrfParams):
    """Exact unary (n x T) and pairwise ((n-1) x T x T) posterior marginals
    via log-space forward-backward."""
    E = _check_emissions(E, A)
    n, T = E.shape
    alpha = _forward(E, A)
    beta = _backward(E, A)
    log_z = logsumexp(alpha[-1] + (A.end if A.boundary else 0.0))

    unary = np.exp(alpha + beta - log_z)
    pairwise = np.empty((max(n - 1, 0), T, T))
    for i in range(n - 1):
        log_pair = (
            alpha[i][:, None] + A.trans + E[i + 1][None, :] + beta[i + 1][None, :]
        )
        pairwise[i] = np.exp(log_pair - log_z)
    return unary, pairwise


def crf_nll(E: np.ndarray, A: CrfParams, y_true: TagSequence):
    """Negative log-likelihood of the ground-truth sequence and its gradients.

    Returns (loss, grad_E, grad_params) where grad_E has the shape of E and
    grad_params is a CrfParams holding the gradient for the transition matrix
    (and boundary vectors when enabled). Gradients are posterior marginals
    minus ground-truth indicator counts.
    """
    E = _check_emissions(E, A)
    tags = np.asarray(y_true.tags, dtype=np.int64)
    n = E.shape[0]
    if tags.shape != (n,):
        raise CrfError(f"tag sequence length {tags.shape} does not match n={n}")

    unary, pairwise = posterior_marginals(E, A)
    log_z = log_partition(E, A)
    loss = log_z - sequence_score(E, A, y_true)

    grad_e = unary.copy()
    grad_e[np.arange(n), tags] -= 1.0

    grad_trans = pairwise.sum(axis=0) if n > 1 else np.zeros_like(A.trans)
    for i in range(n - 1):
        grad_trans[tags[i], tags[i + 1]] -= 1.0

    grad_start = grad_end = None
    if A.boundary:
        grad_start = unary[0].copy()
        grad_start[tags[0]] -= 1.0
        grad_end = unary[-1].copy()
        grad_end[tags[-1]] -= 1.0
    return float(loss), grad_e, CrfParams(grad_trans, grad_start, grad_end)


def viterbi(E: np.ndarray, A: CrfParams):
    """Highest-scoring tag sequence and its score.

    Ties are broken toward the lower tag index at every backtracking step
    (np.argmax returns the first maximum).
    """
    E = _check_emissions(E, A)
    return _viterbi_impl(E, A.trans, A.start, A.end)


def _viterbi_impl(E, trans, start, end):
    n, T = E.shape
    delta = np.empty((n, T))
    backptr = np.zeros((n, T), dtype=np.int64)
    delta[0] = E[0] + (start if start is not None else 0.0)
    for i in range(1, n):
        cand = delta[i - 1][:, None] + trans
        backptr[i] = np.argmax(cand, axis=0)
        delta[i] = cand[backptr[i], np.arange(T)] + E[i]
    last = delta[-1] + (end if end is not None else 0.0)
    best_last = int(np.argmax(last))
    tags = [best_last]
    for i in range(n - 1, 0, -1):
        tags.append(int(backptr[i, tags[-1]]))
    tags.reverse()
    return TagSequence(tuple(tags)), float(last[best_last])


def bio_transition_mask(scheme: LabelScheme) -> np.ndarray:
    """0/-inf matrix: -inf on transitions that break BIO validity
    (O -> I-t, B-s -> I-t with s != t, I-s -> I-t with s != t)."""
    T = scheme.num_tags
    mask = np.zeros((T, T))
    for a in range(T):
        a_prefix, a_type = scheme.split_tag(a)
        for b in range(T):
            b_prefix, b_type = scheme.split_tag(b)
            if b_prefix == "I" and not (a_prefix in ("B", "I") and a_type == b_type):
                mask[a, b] = -np.inf
    return mask


def bio_start_mask(scheme: LabelScheme) -> np.ndarray:
    """0/-inf vector: -inf on I-t tags, which may not start a sequence."""
    mask = np.zeros(scheme.num_tags)
    for t in range(scheme.num_tags):
        if scheme.split_tag(t)[0] == "I":
            mask[t] = -np.inf
    return mask


def constrained_viterbi(E: np.ndarray, A: CrfParams, scheme: LabelScheme):
    """Viterbi restricted to BIO-valid sequences.

    The returned score is the score of the output under the unmasked
    parameters, which coincides with the masked DP optimum because a valid
    path never uses a masked transition.
    """
    E = _check_emissions(E, A)
    if scheme.num_tags != A.num_tags:
        raise CrfError(
            f"scheme has {scheme.num_tags} tags but transitions expect {A.num_tags}"
        )
    trans = A.trans + bio_transition_mask(scheme)
    start = (A.start if A.boundary else 0.0) + bio_start_mask(scheme)
    end = A.end if A.boundary else None
    return _viterbi_impl(E, trans, start, end)
