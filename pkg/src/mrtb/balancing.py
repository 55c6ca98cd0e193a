"""Load-balancing kernels: auxiliary loss, balanced assignment, Sinkhorn, expert bias.

Everything here is a pure function of its inputs. Scope handling (which tokens
feed one balancing computation) lives in the training driver; this module only
sees the resulting statistics or score matrices.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfigError, InvalidInputError, NumericError, SolverError

METHODS = ("lbl", "ba", "sh", "eb")


@dataclass
class BalanceStats:
    """Per-expert selection fractions and mean router probabilities for one scope.

    ``f`` counts expert-selections divided by k*T so it sums to 1 under top-k.
    ``f`` is piecewise-constant in the parameters; only ``P`` carries gradient.
    """

    f: np.ndarray
    P: np.ndarray
    tokens: int

    def validate(self) -> None:
        if abs(float(self.f.sum()) - 1.0) > 1e-9 or abs(float(self.P.sum()) - 1.0) > 1e-9:
            raise InvalidInputError("balance statistics must each sum to 1")


@dataclass
class BalancingConfig:
    method: str = "lbl"
    scope_sequences: int = 1
    strength: float = 0.0
    sinkhorn_iters: int = 50
    sinkhorn_tol: float = 1e-3
    capacity_factor: float = math.inf
    drop_priority: str = "weight"
    ba_maximize: bool = True

    def validate(self, global_batch: int | None = None) -> None:
        if self.method not in METHODS:
            raise InvalidConfigError(f"unknown balancing method {self.method!r}")
        if self.method in ("ba", "sh") and self.strength != 0.0:
            raise InvalidConfigError(f"{self.method} carries no strength parameter")
        if self.method == "eb" and global_batch is not None and self.scope_sequences != global_batch:
            raise InvalidConfigError("expert-bias balancing runs at global scope only")
        if not (self.capacity_factor > 0):
            raise InvalidConfigError("capacity_factor must be positive (use inf for no limit)")
        if self.drop_priority not in ("weight", "position"):
            raise InvalidConfigError(f"unknown drop priority {self.drop_priority!r}")


def lbl_loss(stats: BalanceStats, num_experts: int) -> float:
    """E * sum_i f_i * P_i for one scope evaluation."""
    return num_experts * float(np.dot(stats.f, stats.P))


def scoped_lbl(stats_list: list[BalanceStats], return_f: bool = False):
    """Balancing loss over a scope made of several micro-batches.

    The selection fractions are aggregated over the whole scope (token-count
    weighted, no gradient); each micro-batch then contributes
    E * sum_i f_i(scope) * P_i(local), and contributions are averaged. With a
    single micro-batch this is exactly ``lbl_loss``.
    """
    if not stats_list:
        raise InvalidInputError("scoped_lbl needs at least one micro-batch")
    num_experts = stats_list[0].f.shape[0]
    if len(stats_list) == 1:
        loss = lbl_loss(stats_list[0], num_experts)
        return (loss, stats_list[0].f) if return_f else loss
    total_tokens = sum(s.tokens for s in stats_list)
    f_scope = sum(s.f * s.tokens for s in stats_list) / total_tokens
    loss = float(np.mean([num_experts * float(np.dot(f_scope, s.P)) for s in stats_list]))
    return (loss, f_scope) if return_f else loss


def expert_bias_update(bias: np.ndarray, f: np.ndarray, update_rate: float, num_experts: int) -> np.ndarray:
    """b_i <- b_i + rate * sign(1/E - f_i); sign(0) = 0. Returns a new array."""
    return bias + update_rate * np.sign(1.0 / num_experts - f)


def sinkhorn_normalize(logits: np.ndarray, iters: int = 50, tol: float = 1e-3) -> np.ndarray:
    """Alternate row/column normalization of exp(logits) toward balanced columns.

    Rows are normalized to sum to 1, columns to T/E. Stops once the maximum
    column-sum deviation (measured after a row pass) falls below tol * T/E.
    The result is only ever used to select experts, never as weights.
    """
    if iters < 1:
        raise InvalidInputError("sinkhorn needs at least one iteration")
    z = np.asarray(logits, dtype=np.float64)
    T, E = z.shape
    target = T / E
    m = np.exp(z - z.max(axis=1, keepdims=True))
    for _ in range(iters):
        m /= m.sum(axis=1, keepdims=True)
        dev = np.abs(m.sum(axis=0) - target).max()
        if not np.isfinite(dev):
            raise NumericError("sinkhorn produced a non-finite intermediate")
        if dev < tol * target:
            return m
        m *= target / m.sum(axis=0, keepdims=True)
    m /= m.sum(axis=1, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise NumericError("sinkhorn produced a non-finite intermediate")
    return m


def balanced_assignment(
    scores: np.ndarray,
    k: int = 1,
    epsilon_scaling: float = 4.0,
    maximize: bool = True,
    max_bids_per_round: int | None = None,
) -> np.ndarray:
    """Assign each token k experts with exactly T/E tokens per expert per round.

    Runs k sequential auction rounds; a token never receives the same expert
    twice. Each round maximizes (or minimizes, see ``maximize``) the total
    selected score via an epsilon-scaling auction, exact for the score matrix
    after fixed-point scaling. Returns (T, k) expert indices in round order.
    """
    scores = np.asarray(scores, dtype=np.float64)
    T, E = scores.shape
    if T % E != 0:
        raise InvalidInputError(f"expert count {E} must divide token count {T}")
    if not 1 <= k <= E:
        raise InvalidInputError(f"k={k} out of range for {E} experts")
    work = scores if maximize else -scores
    # fixed-point benefits; the extra (T+1) factor makes a unit epsilon exact
    scale = np.abs(work).max()
    denom = scale if scale > 0 else 1.0
    benefit = np.round(work / denom * (1 << 40)).astype(np.int64) * (T + 1)
    if epsilon_scaling <= 1:
        raise InvalidInputError("epsilon_scaling must exceed 1")

    out = np.empty((T, k), dtype=np.int64)
    banned = np.zeros((T, E), dtype=bool)
    budget = max_bids_per_round or max(10_000, 500 * T)
    for rnd in range(k):
        out[:, rnd] = _auction_round(benefit, banned, epsilon_scaling, budget, rnd)
        banned[np.arange(T), out[:, rnd]] = True
    return out


_VERY_NEG = np.int64(-(1 << 62))


def _auction_round(benefit: np.ndarray, banned: np.ndarray, theta: float, budget: int, rnd: int) -> np.ndarray:
    T, E = benefit.shape
    cap = T // E
    values = benefit.copy()
    values[banned] = _VERY_NEG
    top = int(values.max()) if T else 0
    eps = max(1, abs(top) // 4)
    prices = np.zeros(E, dtype=np.int64)
    assign = np.full(T, -1, dtype=np.int64)
    bids_left = budget

    while True:
        # bins[e] holds (net bid value, token) pairs currently winning expert e
        bins: list[list[tuple[int, int]]] = [[] for _ in range(E)]
        assign.fill(-1)
        queue = deque(range(T))
        while queue:
            if bids_left <= 0:
                raise SolverError(f"auction exceeded its bid budget in round {rnd}", round_index=rnd)
            bids_left -= 1
            i = queue.popleft()
            net = values[i] - prices
            best = int(net.argmax())
            if values[i, best] == _VERY_NEG:
                raise SolverError(f"token {i} has no admissible expert in round {rnd}", round_index=rnd)
            best_v = net[best]
            net[best] = _VERY_NEG
            second_v = net.max()
            if second_v == _VERY_NEG:
                second_v = best_v  # single admissible expert
            bid = int(prices[best] + best_v - second_v + eps)
            bucket = bins[best]
            if len(bucket) < cap:
                bucket.append((bid, i))
                assign[i] = best
                if len(bucket) == cap:
                    prices[best] = min(b for b, _ in bucket)
            else:
                low = min(range(cap), key=lambda j: (bucket[j][0], -bucket[j][1]))
                if bid > bucket[low][0]:
                    _, evicted = bucket[low]
                    bucket[low] = (bid, i)
                    assign[i] = best
                    assign[evicted] = -1
                    queue.append(evicted)
                    prices[best] = min(b for b, _ in bucket)
                else:
                    # cannot happen while prices track bucket minima; requeue defensively
                    queue.append(i)
        if eps == 1:
            return assign
        eps = max(1, int(eps / theta))
