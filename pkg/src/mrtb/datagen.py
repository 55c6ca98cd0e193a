"""Testbed data: synthetic domain corpora, text ingestion, packing, scope streams.

The synthetic mix gives every domain a disjoint vocabulary block plus one
shared generic block, so domain membership of each token type is known
exactly. Documents follow a seeded per-domain bigram chain with generic
tokens injected independently at a fixed rate, which leaves a learnable
next-token signal for the language model.
"""

from __future__ import annotations

import logging
import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import IngestionError, InvalidConfigError, InvalidInputError
from .numerics import rng_for

log = logging.getLogger(__name__)

UNKNOWN_TOKEN = 0
GENERIC = -1  # marker in vocab_domain_truth

_BIGRAM_SUPPORT = 8     # successors per token in the synthetic chain
_BIGRAM_ALPHA = 0.4     # Dirichlet concentration; small = peaky, learnable rows


@dataclass
class Corpus:
    vocab_size: int
    num_domains: int
    documents: list[tuple[int, np.ndarray]]
    vocab_domain_truth: np.ndarray | None = None  # per token: domain index or GENERIC

    def validate(self) -> None:
        seen = set()
        for domain, tokens in self.documents:
            if not 0 <= domain < self.num_domains:
                raise InvalidInputError(f"domain index {domain} out of range")
            if len(tokens) and (tokens.min() < 0 or tokens.max() >= self.vocab_size):
                raise InvalidInputError("token index out of range")
            seen.add(domain)
        if seen != set(range(self.num_domains)):
            raise InvalidInputError("every domain needs at least one document")


@dataclass
class PackedSequence:
    domain: int
    tokens: np.ndarray


@dataclass
class ScopeGroup:
    """S sequences whose tokens jointly feed one balancing computation."""

    tokens: np.ndarray      # (S, L) int32
    domains: np.ndarray     # (S,) int32
    micro_batches: list[np.ndarray]  # index arrays partitioning range(S)

    @property
    def num_sequences(self) -> int:
        return self.tokens.shape[0]


def generate_synthetic_mix(
    num_domains: int,
    tokens_per_domain_vocab: int,
    generic_vocab: int,
    generic_rate: float,
    doc_length: tuple[int, int],
    docs_per_domain: int,
    seed: int,
) -> Corpus:
    """Build a domain-separable corpus with exact token-level ground truth."""
    if num_domains < 2:
        raise InvalidConfigError("need at least 2 domains")
    if tokens_per_domain_vocab < 1 or generic_vocab < 1:
        raise InvalidConfigError("vocabulary blocks must be non-empty")
    if not 0.0 <= generic_rate < 1.0:
        raise InvalidConfigError("generic_rate must lie in [0, 1)")
    lo, hi = doc_length
    if lo < 2 or hi < lo:
        raise InvalidConfigError("bad document length range")

    vocab_size = num_domains * tokens_per_domain_vocab + generic_vocab
    truth = np.full(vocab_size, GENERIC, dtype=np.int32)
    for d in range(num_domains):
        truth[d * tokens_per_domain_vocab : (d + 1) * tokens_per_domain_vocab] = d
    generic_base = num_domains * tokens_per_domain_vocab

    documents: list[tuple[int, np.ndarray]] = []
    for d in range(num_domains):
        rng = rng_for(seed, "synthetic", f"domain{d}")
        support, cdf = _bigram_table(tokens_per_domain_vocab, rng)
        for _ in range(docs_per_domain):
            n = int(rng.integers(lo, hi + 1))
            doc = np.empty(n, dtype=np.int32)
            u = rng.random(n)
            is_generic = rng.random(n) < generic_rate
            generic_draw = rng.integers(0, generic_vocab, size=n)
            state = int(rng.integers(0, tokens_per_domain_vocab))
            base = d * tokens_per_domain_vocab
            for t in range(n):
                if is_generic[t]:
                    doc[t] = generic_base + generic_draw[t]
                else:
                    state = int(support[state, np.searchsorted(cdf[state], u[t])])
                    doc[t] = base + state
            documents.append((d, doc))
    return Corpus(vocab_size, num_domains, documents, truth)


def _bigram_table(block: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    s = min(_BIGRAM_SUPPORT, block)
    support = np.empty((block, s), dtype=np.int64)
    probs = np.empty((block, s))
    for row in range(block):
        support[row] = rng.choice(block, size=s, replace=False)
        probs[row] = rng.dirichlet(np.full(s, _BIGRAM_ALPHA))
    cdf = np.cumsum(probs, axis=1)
    cdf[:, -1] = 1.0
    return support, cdf


_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


def ingest_text_corpus(root: str | Path, vocab_cap: int = 8192) -> Corpus:
    """One subdirectory per domain, UTF-8 ``*.txt`` files, one document per file."""
    root = Path(root)
    domain_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if len(domain_dirs) < 2:
        raise InvalidConfigError(f"{root} holds {len(domain_dirs)} domain directories, need at least 2")

    raw_docs: list[tuple[int, list[str]]] = []
    counts: dict[str, int] = {}
    for d, directory in enumerate(domain_dirs):
        files = sorted(directory.glob("*.txt"))
        if not files:
            raise InvalidConfigError(f"domain directory {directory} has no .txt files")
        for path in files:
            try:
                text = path.read_text(encoding="utf-8")
            except OSError as exc:
                raise IngestionError(f"cannot read {path}: {exc}") from exc
            except UnicodeDecodeError as exc:
                raise IngestionError(f"cannot decode {path}: {exc}") from exc
            words = _TOKEN_RE.findall(text)
            if not words:
                raise IngestionError(f"{path} contains no tokens")
            raw_docs.append((d, words))
            for w in words:
                counts[w] = counts.get(w, 0) + 1

    # id 0 is reserved for out-of-vocabulary tokens
    ranked = sorted(counts, key=lambda w: (-counts[w], w))[: vocab_cap - 1]
    ids = {w: i + 1 for i, w in enumerate(ranked)}
    documents = [
        (d, np.array([ids.get(w, UNKNOWN_TOKEN) for w in words], dtype=np.int32))
        for d, words in raw_docs
    ]
    return Corpus(len(ids) + 1, len(domain_dirs), documents, None)


def pack_sequences(corpus: Corpus, seq_len: int) -> list[PackedSequence]:
    """Concatenate each domain's documents and chunk into length-L sequences.

    Remainder tokens are discarded so every position is a real token.
    """
    corpus.validate()
    packed: list[PackedSequence] = []
    for d in range(corpus.num_domains):
        stream = np.concatenate([t for dom, t in corpus.documents if dom == d])
        if len(stream) < seq_len:
            raise InvalidConfigError(f"domain {d} has {len(stream)} tokens, fewer than L={seq_len}")
        n = len(stream) // seq_len
        for i in range(n):
            packed.append(PackedSequence(d, stream[i * seq_len : (i + 1) * seq_len]))
    return packed


class ScopeStream:
    """Equal-mix batch stream partitioned into scope groups.

    Every global batch holds exactly B/D sequences per domain; sequence order
    is reshuffled per epoch from the seed. A fixed fraction of sequences per
    domain is held out for validation before streaming starts.
    """

    def __init__(
        self,
        sequences: list[PackedSequence],
        batch_sequences: int,
        scope_sequences: int,
        micro_batch_sequences: int = 0,
        seed: int = 0,
        val_fraction: float = 0.02,
    ):
        if not sequences:
            raise InvalidConfigError("no sequences to stream")
        num_domains = max(s.domain for s in sequences) + 1
        B, S = batch_sequences, scope_sequences
        m = micro_batch_sequences or S
        if B % S != 0:
            raise InvalidConfigError(f"scope {S} must divide batch size {B}")
        if S % m != 0:
            raise InvalidConfigError(f"micro batch {m} must divide scope {S}")
        if B % num_domains != 0:
            raise InvalidConfigError(f"batch size {B} must be a multiple of {num_domains} domains")

        self.batch_sequences = B
        self.scope_sequences = S
        self.micro_batch_sequences = m
        self.num_domains = num_domains
        self.seq_len = len(sequences[0].tokens)
        self._seed = seed

        by_domain = [[s for s in sequences if s.domain == d] for d in range(num_domains)]
        self.validation: list[PackedSequence] = []
        self._train: list[list[PackedSequence]] = []
        rng = rng_for(seed, "stream", "valsplit")
        for d, group in enumerate(by_domain):
            n_val = max(1, round(val_fraction * len(group))) if val_fraction > 0 else 0
            if len(group) - n_val < B // num_domains:
                raise InvalidConfigError(f"domain {d} has too few sequences for batch size {B}")
            picks = set(rng.choice(len(group), size=n_val, replace=False).tolist()) if n_val else set()
            self.validation.extend(group[i] for i in sorted(picks))
            self._train.append([g for i, g in enumerate(group) if i not in picks])

    def batches(self) -> Iterator[list[ScopeGroup]]:
        """Yield global batches forever, each as a list of B/S scope groups."""
        B, S, m = self.batch_sequences, self.scope_sequences, self.micro_batch_sequences
        per_domain = B // self.num_domains
        orders = [iter(()) for _ in self._train]
        rng = rng_for(self._seed, "stream", "order")
        epoch = [0] * self.num_domains
        while True:
            batch: list[PackedSequence] = []
            for d, group in enumerate(self._train):
                need = per_domain
                while need:
                    nxt = next(orders[d], None)
                    if nxt is None:
                        perm = rng_for(self._seed, "stream", f"epoch{epoch[d]}", f"domain{d}").permutation(len(group))
                        orders[d] = iter(perm.tolist())
                        epoch[d] += 1
                        continue
                    batch.append(group[nxt])
                    need -= 1
            order = rng.permutation(B)
            groups = []
            for g in range(B // S):
                idx = order[g * S : (g + 1) * S]
                tokens = np.stack([batch[i].tokens for i in idx])
                domains = np.array([batch[i].domain for i in idx], dtype=np.int32)
                micro = [np.arange(j, min(j + m, S)) for j in range(0, S, m)]
                groups.append(ScopeGroup(tokens, domains, micro))
            yield groups

    def groups(self) -> Iterator[ScopeGroup]:
        """Flat iterator over scope groups (batch boundaries dropped)."""
        for batch in self.batches():
            yield from batch


def build_scope_stream(
    sequences: list[PackedSequence],
    batch_sequences: int,
    scope_sequences: int,
    micro_batch_sequences: int = 0,
    seed: int = 0,
    val_fraction: float = 0.02,
) -> ScopeStream:
    return ScopeStream(sequences, batch_sequences, scope_sequences, micro_batch_sequences, seed, val_fraction)


# --- packed-corpus cache -----------------------------------------------------
# Layout (little endian): magic b"MRTB", version u16, vocab_size u32,
# num_domains u32, seq_len u32, has_truth u8; if has_truth: vocab_size i32
# truth entries (-1 = generic); num_sequences u32; per sequence: domain u32
# then seq_len u32 token ids.

_MAGIC = b"MRTB"
_VERSION = 1


def save_packed(
    path: str | Path,
    vocab_size: int,
    num_domains: int,
    sequences: list[PackedSequence],
    vocab_domain_truth: np.ndarray | None,
) -> None:
    if not sequences:
        raise InvalidInputError("refusing to cache an empty sequence list")
    seq_len = len(sequences[0].tokens)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<HIIIB", _VERSION, vocab_size, num_domains, seq_len,
                             1 if vocab_domain_truth is not None else 0))
        if vocab_domain_truth is not None:
            fh.write(np.asarray(vocab_domain_truth, dtype="<i4").tobytes())
        fh.write(struct.pack("<I", len(sequences)))
        for s in sequences:
            fh.write(struct.pack("<I", s.domain))
            fh.write(np.asarray(s.tokens, dtype="<u4").tobytes())


def load_packed(path: str | Path) -> tuple[int, int, list[PackedSequence], np.ndarray | None]:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise InvalidInputError(f"{path} is not a packed-corpus cache")
        version, vocab_size, num_domains, seq_len, has_truth = struct.unpack("<HIIIB", fh.read(15))
        if version != _VERSION:
            raise InvalidInputError(f"unsupported cache version {version}")
        truth = None
        if has_truth:
            truth = np.frombuffer(fh.read(4 * vocab_size), dtype="<i4").astype(np.int32)
        (n,) = struct.unpack("<I", fh.read(4))
        sequences = []
        for _ in range(n):
            (domain,) = struct.unpack("<I", fh.read(4))
            tokens = np.frombuffer(fh.read(4 * seq_len), dtype="<u4").astype(np.int32)
            sequences.append(PackedSequence(int(domain), tokens))
    return vocab_size, num_domains, sequences, truth
