"""Marginal measurement-to-Bernoulli association probabilities.

Two solvers share one input (:class:`AssociationProblem`) and one output
(:class:`MarginalAssociation`):

* :func:`exact_marginals` sums over every one-to-one partial assignment.  The
  sum is organized as a forward/backward recursion over subsets of the
  smaller side, so it is exact but exponential in ``min(n, m)``.
* :func:`bp_marginals` runs loopy belief propagation on the bipartite
  association graph.

:func:`associate` splits a problem into gated clusters and picks a solver per
cluster.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .gaussian import logsumexp
from .errors import AssociationTooLarge
from .rfs import AssociationProblem

EXACT_LIMIT = 10
_TINY = 1e-300


@dataclass(frozen=True)
class MarginalAssociation:
    p_miss: np.ndarray
    p_assoc: np.ndarray
    p_new: np.ndarray
    converged: bool = True
    iterations: int = 0

    @property
    def n(self) -> int:
        return self.p_miss.size

    @property
    def m(self) -> int:
        return self.p_new.size

    def transposed(self) -> "MarginalAssociation":
        return MarginalAssociation(self.p_new, self.p_assoc.T, self.p_miss,
                                   self.converged, self.iterations)


def _trivial(prob: AssociationProblem) -> MarginalAssociation | None:
    n, m = prob.n, prob.m
    if m == 0 or n == 0:
        return MarginalAssociation(np.ones(n), np.zeros((n, m)), np.ones(m))
    return None


def exact_marginals(prob: AssociationProblem, limit: int = EXACT_LIMIT) -> MarginalAssociation:
    """Exact marginals by summing over all valid association maps."""
    if prob.n > limit or prob.m > limit:
        raise AssociationTooLarge(
            f"exact association limited to n, m <= {limit} (got n={prob.n}, m={prob.m}); "
            "use bp_marginals for larger problems"
        )
    done = _trivial(prob)
    if done is not None:
        return done
    return _exact_any(prob)


def _exact_subset_dp(prob: AssociationProblem) -> MarginalAssociation:
    n, m = prob.n, prob.m
    n_masks = 1 << m
    masks = np.arange(n_masks)
    has = [(masks >> j) & 1 == 1 for j in range(m)]

    # forward[i, mask]: log-sum over Bernoullis < i that used exactly `mask`
    forward = np.full((n + 1, n_masks), -np.inf)
    forward[0, 0] = 0.0
    for i in range(n):
        cur = forward[i] + prob.log_miss[i]
        terms = [cur]
        for j in range(m):
            shifted = np.full(n_masks, -np.inf)
            shifted[has[j]] = forward[i, masks[has[j]] ^ (1 << j)] + prob.log_detect[i, j]
            terms.append(shifted)
        forward[i + 1] = logsumexp(np.stack(terms), axis=0)

    # backward[i, mask]: log-sum over Bernoullis >= i given `mask` already used,
    # including the new/clutter weight of measurements left unused at the end
    backward = np.full((n + 1, n_masks), -np.inf)
    unused_new = np.zeros(n_masks)
    for j in range(m):
        unused_new = unused_new + np.where(has[j], 0.0, prob.log_new[j])
    backward[n] = unused_new
    for i in range(n - 1, -1, -1):
        terms = [backward[i + 1] + prob.log_miss[i]]
        for j in range(m):
            val = np.full(n_masks, -np.inf)
            free = ~has[j]
            val[free] = backward[i + 1, masks[free] | (1 << j)] + prob.log_detect[i, j]
            terms.append(val)
        backward[i] = logsumexp(np.stack(terms), axis=0)

    log_z = backward[0, 0]
    p_miss = np.empty(n)
    p_assoc = np.zeros((n, m))
    for i in range(n):
        p_miss[i] = np.exp(logsumexp(forward[i] + prob.log_miss[i] + backward[i + 1]) - log_z)
        for j in range(m):
            free = ~has[j]
            p_assoc[i, j] = np.exp(
                logsumexp(forward[i, free] + prob.log_detect[i, j]
                          + backward[i + 1, masks[free] | (1 << j)]) - log_z
            )
    final = forward[n] + unused_new
    p_new = np.array([np.exp(logsumexp(final[~has[j]]) - log_z) for j in range(m)])
    return MarginalAssociation(_clip(p_miss), _clip(p_assoc), _clip(p_new))


def _single_row(prob: AssociationProblem) -> MarginalAssociation:
    """Closed form for one Bernoulli: it either misses or takes one measurement."""
    ln = prob.log_new
    finite = np.isfinite(ln)
    n_blocked = np.count_nonzero(~finite)
    total = ln[finite].sum()
    # log-product of the other measurements' new weights, exact even when
    # some of them are -inf
    others = np.where(finite, total - np.where(finite, ln, 0.0), total)
    others[n_blocked - (~finite) > 0] = -np.inf
    logits = np.concatenate([prob.log_miss + (total if n_blocked == 0 else -np.inf),
                             prob.log_detect[0] + others])
    p = np.exp(logits - logsumexp(logits))
    return MarginalAssociation(_clip(p[:1]), _clip(p[None, 1:]), _clip(1.0 - p[1:]))


def _exact_any(prob: AssociationProblem) -> MarginalAssociation:
    if prob.n == 1:
        return _single_row(prob)
    if prob.m == 1:
        return _single_row(prob.transposed()).transposed()
    if prob.m > prob.n:
        return _exact_subset_dp(prob.transposed()).transposed()
    return _exact_subset_dp(prob)


def _clip(p):
    return np.clip(p, 0.0, 1.0)


def _scaled_weights(prob: AssociationProblem):
    """Linear-domain weights after per-row and per-column rescaling.

    Multiplying a Bernoulli's miss and detect weights (or a measurement's new
    and detect weights) by a common constant leaves every marginal unchanged,
    so rows are normalized to max 1 and then columns likewise.
    """
    row = np.maximum(prob.log_miss, prob.log_detect.max(axis=1))
    row = np.where(np.isfinite(row), row, 0.0)
    ld = prob.log_detect - row[:, None]
    lm = prob.log_miss - row
    col = np.maximum(prob.log_new, ld.max(axis=0))
    col = np.where(np.isfinite(col), col, 0.0)
    ld = ld - col[None, :]
    ln = prob.log_new - col
    return np.exp(lm), np.exp(ld), np.exp(ln)


def bp_marginals(prob: AssociationProblem, max_iters: int = 200, tol: float = 1e-6
                 ) -> MarginalAssociation:
    """Loopy belief propagation on the association factor graph.

    Synchronous schedule: all Bernoulli-to-measurement messages, then all
    measurement-to-Bernoulli messages.  Stops when the largest message change
    drops below ``tol``; the flag ``converged`` reports whether that happened.
    """
    done = _trivial(prob)
    if done is not None:
        return done
    w_miss, w_det, w_new = _scaled_weights(prob)

    # mu[i, k]: measurement k -> Bernoulli i ; nu[i, k]: Bernoulli i -> measurement k
    mu = np.ones_like(w_det)
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        prod = w_det * mu
        row_tot = w_miss + prod.sum(axis=1)
        nu = w_det / np.maximum(row_tot[:, None] - prod, _TINY)
        col_tot = w_new + nu.sum(axis=0)
        mu_next = 1.0 / np.maximum(col_tot[None, :] - nu, _TINY)
        delta = np.max(np.abs(mu_next - mu))
        mu = mu_next
        if delta < tol:
            marg = _bp_beliefs(w_miss, w_det, w_new, mu)
            # stop only once both normalizations agree to the same tolerance
            if np.max(np.abs(marg[2] + marg[1].sum(axis=0) - 1.0)) < tol:
                converged = True
                break
    p_miss, p_assoc, p_new = _bp_beliefs(w_miss, w_det, w_new, mu)
    return MarginalAssociation(p_miss, p_assoc, p_new, converged, it)


def _bp_beliefs(w_miss, w_det, w_new, mu):
    prod = w_det * mu
    row_tot = np.maximum(w_miss + prod.sum(axis=1), _TINY)
    p_miss = w_miss / row_tot
    p_assoc = prod / row_tot[:, None]
    nu = w_det / np.maximum(row_tot[:, None] - prod, _TINY)
    col_tot = np.maximum(w_new + nu.sum(axis=0), _TINY)
    p_new = w_new / col_tot
    return _clip(p_miss), _clip(p_assoc), _clip(p_new)


def _clusters(prob: AssociationProblem):
    n, m = prob.n, prob.m
    rows, cols = np.nonzero(np.isfinite(prob.log_detect))
    graph = coo_matrix((np.ones(rows.size), (rows, n + cols)), shape=(n + m, n + m))
    n_comp, labels = connected_components(graph, directed=False)
    for c in range(n_comp):
        members = np.flatnonzero(labels == c)
        yield members[members < n], members[members >= n] - n


def associate(prob: AssociationProblem, method: str = "auto", max_iters: int = 200,
              tol: float = 1e-6, exact_limit: int = EXACT_LIMIT) -> MarginalAssociation:
    """Solve a full-scan association problem.

    ``method`` is ``"bp"``, ``"exact"`` or ``"auto"``.  Under ``"auto"`` the
    gated graph is split into connected clusters; clusters within the exact
    limit are enumerated, larger ones use belief propagation.
    """
    if method == "bp":
        return bp_marginals(prob, max_iters, tol)
    if method == "exact":
        return exact_marginals(prob, limit=exact_limit)
    if method != "auto":
        raise ValueError(f"unknown association method {method!r}")
    done = _trivial(prob)
    if done is not None:
        return done
    n, m = prob.n, prob.m
    p_miss = np.ones(n)
    p_assoc = np.zeros((n, m))
    p_new = np.ones(m)
    converged = True
    iterations = 0
    for ti, mi in _clusters(prob):
        if ti.size == 0 or mi.size == 0:
            continue
        sub = AssociationProblem(prob.log_miss[ti], prob.log_detect[np.ix_(ti, mi)],
                                 prob.log_new[mi])
        if min(ti.size, mi.size) <= exact_limit and max(ti.size, mi.size) <= 4 * exact_limit:
            res = _exact_any(sub)
        else:
            res = bp_marginals(sub, max_iters, tol)
            converged &= res.converged
            iterations = max(iterations, res.iterations)
        p_miss[ti] = res.p_miss
        p_new[mi] = res.p_new
        p_assoc[np.ix_(ti, mi)] = res.p_assoc
    return MarginalAssociation(p_miss, p_assoc, p_new, converged, iterations)
