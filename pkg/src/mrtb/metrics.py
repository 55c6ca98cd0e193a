"""Routing purity, expert utilization, validation loss and rank correlations.

Purity and utilization are always evaluated over one full global batch. The
accumulator keeps integer selection counts so that incremental evaluation over
micro-batches is bit-identical to evaluating the concatenated batch.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import InvalidConfigError, InvalidInputError


@dataclass
class MetricsRecord:
    step: int
    utilization: list[float]            # one entry per MoE layer
    purity: list[float | None]          # None when the batch held no T_D tokens
    drop_fraction: list[float]
    validation_loss: float | None = None


class MetricsAccumulator:
    """Selection counters for one global batch and one MoE layer.

    Dropped slots never reach an expert and are excluded. Purity counts only
    domain-specific tokens; utilization counts all of them.
    """

    def __init__(self, num_experts: int, num_domains: int):
        self.E = num_experts
        self.D = num_domains
        self.counts = np.zeros(num_experts, dtype=np.int64)
        self.domain_counts = np.zeros((num_experts, num_domains), dtype=np.int64)
        self.dropped = 0
        self.total_slots = 0

    def update(self, decision) -> None:
        sel = decision.selected
        kept = ~decision.dropped
        self.total_slots += sel.size
        self.dropped += int(decision.dropped.sum())
        self.counts += np.bincount(sel[kept], minlength=self.E)
        td = kept & decision.in_td[:, None]
        if td.any():
            rows = sel[td]
            doms = np.broadcast_to(decision.token_domain[:, None], sel.shape)[td]
            np.add.at(self.domain_counts, (rows, doms), 1)

    def utilization(self) -> float:
        total = int(self.counts.sum())
        if total == 0:
            raise InvalidInputError("no routed tokens in batch")
        f = self.counts / total
        return float(np.minimum(f, 1.0 / self.E).sum())

    def purity(self) -> float | None:
        per_expert_td = self.domain_counts.sum(axis=1)
        if per_expert_td.sum() == 0:
            return None
        # unused experts contribute the neutral value 1/D rather than 1.0
        ratios = np.full(self.E, 1.0 / self.D)
        used = per_expert_td > 0
        ratios[used] = self.domain_counts[used].max(axis=1) / per_expert_td[used]
        return float(ratios.mean())

    def drop_fraction(self) -> float:
        return self.dropped / self.total_slots if self.total_slots else 0.0


def expert_utilization(decisions, num_experts: int) -> float:
    """Sum_i min(f_i, 1/E) over kept expert-selections of a full global batch."""
    acc = MetricsAccumulator(num_experts, 1)
    for dec in decisions:
        acc.update(_with_default_td(dec))
    return acc.utilization()

def routing_purity(decisions, num_experts: int, num_domains: int) -> float | None:
    """Mean over experts of the dominant-domain fraction among their T_D tokens.

    Returns None when the batch contains no domain-specific tokens (the metric
    is undefined there, which is distinct from zero).
    """
    acc = MetricsAccumulator(num_experts, num_domains)
    for dec in decisions:
        acc.update(dec)
    return acc.purity()


def _with_default_td(dec):
    if dec.in_td is None:
        raise InvalidInputError("decision lacks token metadata")
    return dec


def validation_loss(model, sequences, batch_sequences: int = 16) -> float:
    """Token-mean next-token cross entropy over held-out sequences.

    No balancing loss is included. Routing follows the model's inference
    behaviour (learned top-k plus any reference mask and capacity limit).
    """
    if not sequences:
        raise InvalidConfigError("empty held-out set")
    total, count = 0.0, 0
    for i in range(0, len(sequences), batch_sequences):
        chunk = sequences[i : i + batch_sequences]
        tokens = np.stack([s.tokens for s in chunk])
        domains = np.array([s.domain for s in chunk], dtype=np.int32)
        loss_sum, n = model.eval_loss_sum(tokens, domains)
        total += loss_sum
        count += n
    return total / count


def rank_correlation(x, y) -> tuple[float, float]:
    """Spearman rho (average ranks for ties) and Kendall tau-b.

    Constant inputs make both coefficients undefined; NaNs signal that.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 3:
        raise InvalidInputError("rank_correlation expects two equal-length lists of at least 3")
    if np.all(x == x[0]) or np.all(y == y[0]):
        return float("nan"), float("nan")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rho = stats.spearmanr(x, y).statistic
        tau = stats.kendalltau(x, y, variant="b").statistic
    return float(rho), float(tau)
