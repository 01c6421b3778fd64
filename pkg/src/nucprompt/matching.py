"""Hungarian assignment of predicted to ground-truth points, and the training losses.

The assignment is treated as a constant during backpropagation: it is
recomputed from detached coordinates at every step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import NumericError

DEFAULT_LOSS_WEIGHTS = (1.0, 5e-3, 1e-4)  # classification, regression, count


@dataclass
class Assignment:
    pairs: np.ndarray  # M x 2 (proposal index, gt index), sorted by proposal index
    unmatched_proposals: np.ndarray
    unmatched_gt: np.ndarray
    total_cost: float

    @property
    def proposal_idx(self) -> np.ndarray:
        return self.pairs[:, 0]

    @property
    def gt_idx(self) -> np.ndarray:
        return self.pairs[:, 1]


def _shortest_augmenting_path(cost: np.ndarray):
    """Min-cost assignment of every row of an ``n x m`` matrix, ``n <= m``.

    Returns the column of each row plus the optimal dual potentials ``(u, v)``;
    reduced costs ``cost - u[:, None] - v`` are non-negative and zero on the
    assigned entries.
    """
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.int64)  # 1-based row owning each column, 0 = free
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            cols = np.nonzero(used)[0]
            u[owner[cols]] += delta
            v[cols] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    row_to_col = np.empty(n, dtype=np.int64)
    for j in range(1, m + 1):
        if owner[j]:
            row_to_col[owner[j] - 1] = j - 1
    return row_to_col, u[1:], v[1:]


def _assignment_cost(cost, rows, cols) -> float:
    return math.fsum(cost[rows, cols].tolist())


def _solve_lexicographic(cost: np.ndarray) -> np.ndarray:
    """Optimal assignment (``n <= m``) whose column sequence is lexicographically smallest.

    Any optimal assignment uses only zero-reduced-cost entries under optimal
    potentials, so a row with a single such entry is forced. Rows with several
    candidates try them in ascending order and keep the first that still
    admits an optimum for the remaining rows.
    """
    n, m = cost.shape
    cols, u, v = _shortest_augmenting_path(cost)
    scale = max(1.0, float(np.abs(cost).max(initial=0.0)))
    tol = 1e-9 * scale * max(n, 1)

    chosen = np.empty(n, dtype=np.int64)
    avail = np.ones(m, dtype=bool)
    sub_u, sub_v = u, v  # potentials of the current residual problem
    sub_cols = cols  # its current optimal solution (column per remaining row)
    for i in range(n):
        current = int(sub_cols[0])
        if i == n - 1:
            # last row: cheapest remaining column, lowest index among ties
            rest = np.where(avail, cost[i], np.inf)
            chosen[i] = int(np.flatnonzero(rest <= rest.min() + tol)[0])
            break
        reduced = cost[i] - sub_u[0] - sub_v
        cand = np.nonzero(avail & (reduced <= tol))[0]
        picked = current
        if len(cand) > 1:
            rest_rows = np.arange(i + 1, n)
            best = cost[i, current] + _assignment_cost(cost, rest_rows, sub_cols[1:])
            for j in cand:
                j = int(j)
                if j >= current:
                    break
                mask = avail.copy()
                mask[j] = False
                idx = np.nonzero(mask)[0]
                c2, u2, v2 = _shortest_augmenting_path(cost[np.ix_(rest_rows, idx)])
                if cost[i, j] + _assignment_cost(cost, rest_rows, idx[c2]) <= best + tol:
                    picked = j
                    sub_u = np.concatenate([[0.0], u2])
                    sub_v = np.zeros(m)
                    sub_v[idx] = v2
                    sub_cols = np.concatenate([[j], idx[c2]])
                    break
        chosen[i] = picked
        avail[picked] = False
        sub_u, sub_cols = sub_u[1:], sub_cols[1:]
    return chosen


def hungarian(cost) -> Assignment:
    """Minimum-total-cost matching of ``min(K, N)`` pairs for a ``K x N`` cost matrix.

    Among equal-cost optima, the smaller side (in index order) takes the lowest
    partner index available.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be 2-D, got shape {cost.shape}")
    if np.isnan(cost).any():
        raise NumericError("NaN in cost matrix")
    if not np.isfinite(cost).all():
        raise NumericError("infinite entry in cost matrix")
    k, n = cost.shape
    if k == 0 or n == 0:
        pairs = np.zeros((0, 2), dtype=np.int64)
    elif k <= n:
        cols = _solve_lexicographic(cost)
        pairs = np.stack([np.arange(k), cols], axis=1)
    else:
        rows = _solve_lexicographic(cost.T)
        pairs = np.stack([rows, np.arange(n)], axis=1)
        pairs = pairs[np.argsort(pairs[:, 0], kind="stable")]
    return Assignment(
        pairs=pairs,
        unmatched_proposals=np.setdiff1d(np.arange(k), pairs[:, 0]),
        unmatched_gt=np.setdiff1d(np.arange(n), pairs[:, 1]),
        total_cost=_assignment_cost(cost, pairs[:, 0], pairs[:, 1]),
    )


def distance_matrix(points, gt_points) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    g = np.asarray(gt_points, dtype=np.float64).reshape(-1, 2)
    return np.sqrt(((p[:, None, :] - g[None, :, :]) ** 2).sum(-1))


def match_points(points, gt_points) -> Assignment:
    """Euclidean-distance Hungarian matching; accepts tensors (detached) or arrays."""
    if isinstance(points, torch.Tensor):
        points = points.detach().cpu().numpy()
    if isinstance(gt_points, torch.Tensor):
        gt_points = gt_points.detach().cpu().numpy()
    return hungarian(distance_matrix(points, gt_points))


def assigned_labels(assignment: Assignment, gt_classes, n_proposals: int, n_classes: int) -> np.ndarray:
    """Class label per proposal: matched ones take their gt class, the rest background ``C``."""
    labels = np.full(n_proposals, n_classes, dtype=np.int64)
    if len(assignment.pairs):
        labels[assignment.proposal_idx] = np.asarray(gt_classes)[assignment.gt_idx]
    return labels


def regression_loss(points: torch.Tensor, gt_points: torch.Tensor, assignment: Assignment) -> torch.Tensor:
    """Sum of L1 distances over matched pairs."""
    if len(assignment.pairs) == 0:
        return points.new_zeros(())
    pred = points[torch.as_tensor(assignment.proposal_idx)]
    gt = torch.as_tensor(gt_points, dtype=points.dtype)[torch.as_tensor(assignment.gt_idx)]
    return (pred - gt).abs().sum()


@dataclass
class LossBreakdown:
    l_cls: torch.Tensor
    l_reg: torch.Tensor
    l_count: torch.Tensor
    total: torch.Tensor
    weights: tuple[float, float, float] = field(default=DEFAULT_LOSS_WEIGHTS)

    def as_floats(self) -> dict:
        return {k: float(getattr(self, k).detach()) for k in ("l_cls", "l_reg", "l_count", "total")}


def total_loss(l_cls, l_reg, l_count, weights=DEFAULT_LOSS_WEIGHTS) -> LossBreakdown:
    w_cls, w_reg, w_count = weights
    parts = {}
    for name, value in (("l_cls", l_cls), ("l_reg", l_reg), ("l_count", l_count)):
        value = torch.as_tensor(value)
        if not torch.isfinite(value).all():
            raise NumericError(f"{name} is not finite: {float(value)}")
        parts[name] = value
    total = w_cls * parts["l_cls"] + w_reg * parts["l_reg"] + w_count * parts["l_count"]
    return LossBreakdown(parts["l_cls"], parts["l_reg"], parts["l_count"], total, tuple(weights))
