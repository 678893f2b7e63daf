"""Multi-Bernoulli negative-log-likelihood training loss.

The MB density at the ground-truth set is approximated by its best single
association: matched pairs contribute -log r - log N(x; mu, Sigma),
unassigned components contribute -log(1 - r), and each unassigned truth
element costs a fixed penalty (a proxy for the vanishing density of an
unexplained object).  The matching is found exactly with an optimal
assignment on detached costs, so the returned value is differentiable in
all density parameters for that fixed matching.
"""

from __future__ import annotations

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

LOG_2PI = float(np.log(2.0 * np.pi))
_BIG = 1e9

DEFAULT_MISS_PENALTY = 20.0


def _match_costs(existence: torch.Tensor, mean: torch.Tensor,
                 chol: torch.Tensor, truth: torch.Tensor) -> torch.Tensor:
    """(k, n) matrix of -log r_i - log N(x_j; mu_i, Sigma_i)."""
    k = mean.shape[0]
    n = truth.shape[0]
    diff = truth[None, :, :] - mean[:, None, :]              # (k, n, 4)
    sol = torch.linalg.solve_triangular(
        chol[:, None, :, :].expand(k, n, 4, 4).reshape(-1, 4, 4),
        diff.reshape(-1, 4, 1), upper=False).reshape(k, n, 4)
    maha = (sol * sol).sum(-1)                               # (k, n)
    logdet = 2.0 * torch.log(
        torch.diagonal(chol, dim1=-2, dim2=-1)).sum(-1)      # (k,)
    log_norm = -0.5 * (4.0 * LOG_2PI + logdet[:, None] + maha)
    return -torch.log(existence)[:, None] - log_norm


def best_association(cost_match: np.ndarray, cost_unmatched: np.ndarray,
                     miss_penalty: float) -> tuple[list[tuple[int, int]],
                                                   list[int], list[int]]:
    """Minimum-cost partial matching of components to truth elements.

    Returns (matched (i, j) pairs, unmatched component indices, unmatched
    truth indices)."""
    k, n = cost_match.shape
    size = k + n
    cost = np.zeros((size, size))
    cost[:k, :n] = np.minimum(cost_match, _BIG)
    cost[:k, n:] = _BIG
    cost[np.arange(k), n + np.arange(k)] = np.minimum(cost_unmatched, _BIG)
    cost[k:, :n] = _BIG
    cost[k + np.arange(n), np.arange(n)] = miss_penalty
    cost[k:, n:] = 0.0
    rows, cols = linear_sum_assignment(cost)
    matched, un_comp, un_truth = [], [], []
    for r, c in zip(rows, cols):
        if r < k and c < n:
            matched.append((int(r), int(c)))
        elif r < k:
            un_comp.append(int(r))
        elif c < n:
            un_truth.append(int(c))
    return matched, un_comp, un_truth


def mb_nll_loss(existence: torch.Tensor, mean: torch.Tensor,
                chol: torch.Tensor, truth: torch.Tensor,
                miss_penalty: float = DEFAULT_MISS_PENALTY) -> torch.Tensor:
    """Best-association NLL of the truth set under the MB density."""
    k = existence.shape[0]
    n = truth.shape[0]
    unmatched = -torch.log1p(-existence)
    if n == 0:
        return unmatched.sum() if k else existence.sum() * 0.0
    if k == 0:
        return torch.as_tensor(n * miss_penalty, dtype=truth.dtype)
    cost_match = _match_costs(existence, mean, chol, truth)
    with torch.no_grad():
        matched, un_comp, un_truth = best_association(
            cost_match.detach().cpu().numpy(),
            unmatched.detach().cpu().numpy(), miss_penalty)
    loss = truth.new_zeros(())
    if matched:
        rows = torch.tensor([m[0] for m in matched], dtype=torch.long)
        cols = torch.tensor([m[1] for m in matched], dtype=torch.long)
        loss = loss + cost_match[rows, cols].sum()
    if un_comp:
        loss = loss + unmatched[torch.tensor(un_comp, dtype=torch.long)].sum()
    loss = loss + len(un_truth) * miss_penalty
    return loss


def batch_loss(output_existence: torch.Tensor, output_mean: torch.Tensor,
               output_chol: torch.Tensor, truths: list[torch.Tensor],
               miss_penalty: float = DEFAULT_MISS_PENALTY) -> torch.Tensor:
    """Mean per-record loss over a padded batch."""
    losses = [
        mb_nll_loss(output_existence[b], output_mean[b], output_chol[b],
                    truths[b], miss_penalty)
        for b in range(len(truths))
    ]
    return torch.stack(losses).mean()
