"""Per-token domain classifier and the domain-specific/generic token split.

The classifier is a feed-forward net over single token embeddings (no
cross-token context, which would make the task trivial). Mean correct-class
confidence over held-out occurrences then splits token types into a
domain-specific set and a generic set, either at a fixed threshold or at an
occurrence-weighted quantile matching a requested split ratio.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .datagen import Corpus, GENERIC
from .errors import InvalidConfigError, InvalidInputError, TrainingError
from .numerics import rng_for, softmax

log = logging.getLogger(__name__)

Docs = list[tuple[int, np.ndarray]]


def _as_documents(data) -> Docs:
    if isinstance(data, Corpus):
        return data.documents
    return [(s.domain, s.tokens) for s in data]


@dataclass
class TokenClassifier:
    params: dict[str, np.ndarray]
    vocab_size: int
    num_domains: int
    trained: bool = False
    held_out_accuracy: float = 0.0
    holdout_counts: np.ndarray | None = None   # (V, D) occurrence counts per type

    def type_probs(self) -> np.ndarray:
        """Class probabilities for every token type; context-free, so one row per id."""
        p = self.params
        x = p["emb"]
        u = x @ p["w1"] + p["b1"]
        a = u * expit(u)
        return softmax(a @ p["w2"] + p["b2"], axis=1)


def train_token_classifier(
    data,
    vocab_size: int | None = None,
    num_domains: int | None = None,
    hidden: int = 32,
    ffn_hidden: int = 64,
    epochs: int = 2,
    seed: int = 0,
    lr: float = 2.4e-3,
    warmup_frac: float = 0.05,
    batch_size: int = 4096,
    holdout_frac: float = 0.1,
) -> TokenClassifier:
    """Train the domain classifier with AdamW and a linear-decay schedule."""
    docs = _as_documents(data)
    if isinstance(data, Corpus):
        vocab_size = data.vocab_size
        num_domains = data.num_domains
    if vocab_size is None or num_domains is None:
        raise InvalidInputError("vocab_size and num_domains are required for sequence input")
    if num_domains < 2:
        raise InvalidConfigError("classifier needs at least 2 domains")

    rng = rng_for(seed, "classifier")
    holdout_idx = set()
    for d in range(num_domains):
        members = [i for i, (dom, _) in enumerate(docs) if dom == d]
        if not members:
            raise InvalidConfigError(f"domain {d} has no documents")
        n_hold = max(1, round(holdout_frac * len(members)))
        if n_hold >= len(members):
            raise InvalidConfigError(f"domain {d} has too few documents for a held-out split")
        holdout_idx.update(rng.choice(members, size=n_hold, replace=False).tolist())

    train_ids = np.concatenate([t for i, (_, t) in enumerate(docs) if i not in holdout_idx])
    train_lab = np.concatenate(
        [np.full(len(t), dom, dtype=np.int64) for i, (dom, t) in enumerate(docs) if i not in holdout_idx]
    )
    holdout_counts = np.zeros((vocab_size, num_domains), dtype=np.int64)
    for i in sorted(holdout_idx):
        dom, toks = docs[i]
        holdout_counts[:, dom] += np.bincount(toks, minlength=vocab_size)

    p = {
        "emb": rng.normal(0.0, 0.02, size=(vocab_size, hidden)),
        "w1": rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden, ffn_hidden)),
        "b1": np.zeros(ffn_hidden),
        "w2": np.zeros((ffn_hidden, num_domains)),
        "b2": np.zeros(num_domains),
    }
    m = {k: np.zeros_like(v) for k, v in p.items()}
    v = {k: np.zeros_like(w) for k, w in p.items()}
    beta1, beta2, eps, wd = 0.9, 0.99, 1e-8, 0.01

    n = len(train_ids)
    steps_per_epoch = (n + batch_size - 1) // batch_size
    total = epochs * steps_per_epoch
    warmup = max(1, int(warmup_frac * total))
    t = 0
    for epoch in range(epochs):
        order = rng_for(seed, "classifier", f"epoch{epoch}").permutation(n)
        for b in range(steps_per_epoch):
            ids = train_ids[order[b * batch_size : (b + 1) * batch_size]]
            lab = train_lab[order[b * batch_size : (b + 1) * batch_size]]
            x = p["emb"][ids]
            u = x @ p["w1"] + p["b1"]
            su = expit(u)
            a = u * su
            logits = a @ p["w2"] + p["b2"]
            probs = softmax(logits, axis=1)
            loss = -np.mean(np.log(probs[np.arange(len(ids)), lab] + 1e-300))
            if not np.isfinite(loss):
                raise TrainingError("classifier loss diverged", step=t)
            dlogits = probs
            dlogits[np.arange(len(ids)), lab] -= 1.0
            dlogits /= len(ids)
            g = {
                "w2": a.T @ dlogits,
                "b2": dlogits.sum(axis=0),
            }
            da = dlogits @ p["w2"].T
            du = da * (su * (1.0 + u * (1.0 - su)))
            g["w1"] = x.T @ du
            g["b1"] = du.sum(axis=0)
            dx = du @ p["w1"].T
            g["emb"] = np.zeros_like(p["emb"])
            np.add.at(g["emb"], ids, dx)

            t += 1
            lr_t = lr * min(1.0, t / warmup) * max(0.0, 1.0 - t / total)
            for name in p:
                m[name] = beta1 * m[name] + (1 - beta1) * g[name]
                v[name] = beta2 * v[name] + (1 - beta2) * g[name] ** 2
                mh = m[name] / (1 - beta1 ** t)
                vh = v[name] / (1 - beta2 ** t)
                if p[name].ndim >= 2:
                    p[name] -= lr_t * wd * p[name]
                p[name] -= lr_t * mh / (np.sqrt(vh) + eps)

    clf = TokenClassifier(p, vocab_size, num_domains, trained=True, holdout_counts=holdout_counts)
    probs = clf.type_probs()
    pred = probs.argmax(axis=1)
    total_occ = holdout_counts.sum()
    correct = holdout_counts[np.arange(vocab_size), pred].sum()
    clf.held_out_accuracy = float(correct / total_occ)
    return clf


@dataclass
class TokenSplit:
    """Partition of the vocabulary into domain-specific and generic token types."""

    vocab_size: int
    domain_specific: dict[int, int]
    generic: set[int]
    split_ratio: float
    confidence_threshold: float
    mean_confidence: dict[int, float] = field(default_factory=dict)
    occurrences: dict[int, int] = field(default_factory=dict)
    _mask: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self._mask is None:
            self._mask = np.zeros(self.vocab_size, dtype=bool)
            self._mask[list(self.domain_specific)] = True

    def membership(self, tokens: np.ndarray) -> np.ndarray:
        return self._mask[tokens]

    def save_tsv(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("token_id\tassignment\tmean_confidence\toccurrences\n")
            for t in range(self.vocab_size):
                tag = f"D{self.domain_specific[t]}" if t in self.domain_specific else "G"
                conf = self.mean_confidence.get(t, float("nan"))
                occ = self.occurrences.get(t, 0)
                fh.write(f"{t}\t{tag}\t{conf:.6g}\t{occ}\n")

    @classmethod
    def load_tsv(cls, path: str | Path) -> "TokenSplit":
        domain_specific: dict[int, int] = {}
        generic: set[int] = set()
        confidence: dict[int, float] = {}
        occurrences: dict[int, int] = {}
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().strip().split("\t")
            if header != ["token_id", "assignment", "mean_confidence", "occurrences"]:
                raise InvalidInputError(f"{path} is not a token-split table")
            for line in fh:
                tid_s, tag, conf_s, occ_s = line.rstrip("\n").split("\t")
                tid = int(tid_s)
                if tag == "G":
                    generic.add(tid)
                else:
                    domain_specific[tid] = int(tag[1:])
                confidence[tid] = float(conf_s)
                occurrences[tid] = int(occ_s)
        vocab = max(domain_specific | generic) + 1 if (domain_specific or generic) else 0
        total = sum(occurrences.values())
        td = sum(occurrences.get(t, 0) for t in domain_specific)
        return cls(vocab, domain_specific, generic, td / total if total else 0.0,
                   float("nan"), confidence, occurrences)

    @classmethod
    def from_truth(cls, truth: np.ndarray, occ_counts: np.ndarray) -> "TokenSplit":
        """Exact split from synthetic ground truth (domain blocks vs generic block)."""
        domain_specific = {int(t): int(truth[t]) for t in np.flatnonzero(truth != GENERIC)}
        generic = {int(t) for t in np.flatnonzero(truth == GENERIC)}
        total = int(occ_counts.sum())
        td = int(occ_counts[truth != GENERIC].sum())
        return cls(len(truth), domain_specific, generic, td / total if total else 0.0,
                   float("nan"),
                   {int(t): 1.0 for t in np.flatnonzero(truth != GENERIC)},
                   {int(t): int(occ_counts[t]) for t in range(len(truth))})


def derive_token_split(
    classifier: TokenClassifier,
    data,
    threshold: float | None = None,
    target_ratio: float | None = None,
    type_weighted: bool = False,
) -> TokenSplit:
    """Split token types by mean correct-class confidence over held-out occurrences.

    Threshold mode admits majority-correct types whose confidence clears the
    threshold. Target mode picks the threshold as an occurrence-weighted
    quantile; when the requested mass exceeds what majority-correct types
    cover, lower-ranked (majority-wrong, then unevaluated) types are admitted
    so extreme ratios up to 1.0 stay reachable.
    """
    if not classifier.trained:
        raise InvalidInputError("classifier must be trained first")
    if (threshold is None) == (target_ratio is None):
        raise InvalidInputError("pass exactly one of threshold / target_ratio")
    docs = _as_documents(data)
    V, D = classifier.vocab_size, classifier.num_domains
    occ = np.zeros(V, dtype=np.int64)
    for _, toks in docs:
        occ += np.bincount(toks, minlength=V)

    hold = classifier.holdout_counts
    n_held = hold.sum(axis=1)
    probs = classifier.type_probs()
    pred = probs.argmax(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_conf = np.where(n_held > 0, (hold * probs).sum(axis=1) / np.maximum(n_held, 1), 0.0)
        majority_correct = np.where(n_held > 0, hold[np.arange(V), pred] / np.maximum(n_held, 1) > 0.5, False)

    unseen = np.flatnonzero((n_held == 0) & (occ > 0))
    if unseen.size:
        log.info("%d token types had no held-out occurrences; assigned to the generic set", unseen.size)

    weights = np.ones(V, dtype=np.float64) if type_weighted else occ.astype(np.float64)
    evaluated = n_held > 0

    if threshold is not None:
        in_td = evaluated & majority_correct & (mean_conf >= threshold)
        chosen_threshold = threshold
    else:
        # rank: majority-correct by confidence, then majority-wrong by confidence,
        # then unevaluated types; admit until the target mass is best matched
        rank_key = np.where(evaluated & majority_correct, 2.0, np.where(evaluated, 1.0, 0.0))
        order = np.lexsort((np.arange(V), -mean_conf, -rank_key))
        total_w = weights.sum()
        cum = np.cumsum(weights[order]) / total_w
        diffs = np.abs(cum - target_ratio)
        cut = int(np.argmin(diffs))
        if abs(0.0 - target_ratio) <= diffs[cut]:
            in_td = np.zeros(V, dtype=bool)
        else:
            in_td = np.zeros(V, dtype=bool)
            in_td[order[: cut + 1]] = True
        chosen_threshold = float(mean_conf[order[cut]]) if in_td.any() else float("inf")

    domain_specific = {int(t): int(pred[t]) for t in np.flatnonzero(in_td)}
    generic = {int(t) for t in np.flatnonzero(~in_td)}
    realized = float(occ[in_td].sum() / occ.sum()) if occ.sum() else 0.0
    return TokenSplit(
        V, domain_specific, generic, realized, chosen_threshold,
        {int(t): float(mean_conf[t]) for t in range(V)},
        {int(t): int(occ[t]) for t in range(V)},
    )
