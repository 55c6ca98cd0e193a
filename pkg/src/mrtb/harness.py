"""Training driver, grid sweeps, reference-router sweeps and result persistence.

Every run is deterministic given its seed and writes its step metrics
incrementally, so interrupted runs keep partial data. Completed runs are
identified by a config digest and are never retrained on re-invocation.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from multiprocessing import get_context
from pathlib import Path

import numpy as np

from . import datagen, metrics, splitter
from .config import RunConfig
from .errors import InvalidConfigError, TrainingError
from .model import AdamW, MoEModel, train_step
from .splitter import TokenSplit

log = logging.getLogger(__name__)

STEP_COLUMNS = ("step", "lm_loss", "aux_loss", "drop_frac", "layer", "utilization", "purity")
SUMMARY_COLUMNS = ("method", "scope", "strength", "capacity", "utilization", "purity",
                   "val_loss", "drop_frac", "status")
FINAL_WINDOW = 100  # summary metrics average the last this-many metric rows


def _fmt(x: float | None) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "nan"
    if isinstance(x, float) and math.isinf(x):
        return "inf"
    return f"{x:.10g}"


@dataclass
class RunRecord:
    digest: str
    status: str
    summary: dict
    wall_time: float
    failing_step: int | None = None
    out_dir: str = ""

    def save(self, path: Path) -> None:
        path.write_text(json.dumps(dataclasses.asdict(self), indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> "RunRecord":
        return cls(**json.loads(path.read_text(encoding="utf-8")))


def prepare_data(cfg: RunConfig):
    """Materialize packed sequences (generating and caching as configured).

    Returns (vocab_size, num_domains, sequences, truth_or_None).
    """
    d = cfg.data
    if d.source == "cache":
        return datagen.load_packed(d.path)
    if d.cache and Path(d.cache).exists():
        return datagen.load_packed(d.cache)
    if d.source == "synthetic":
        corpus = datagen.generate_synthetic_mix(
            d.domains, d.domain_vocab, d.generic_vocab, d.generic_rate,
            (d.doc_len_min, d.doc_len_max), d.docs_per_domain, cfg.seed,
        )
    else:
        corpus = datagen.ingest_text_corpus(d.path, d.vocab_cap)
    sequences = datagen.pack_sequences(corpus, d.seq_len)
    if d.cache:
        datagen.save_packed(d.cache, corpus.vocab_size, corpus.num_domains,
                            sequences, corpus.vocab_domain_truth)
    return corpus.vocab_size, corpus.num_domains, sequences, corpus.vocab_domain_truth


def _resolve_split(cfg: RunConfig, vocab_size: int, truth, sequences) -> TokenSplit | None:
    if cfg.split_source == "none":
        return None
    if cfg.split_source == "file":
        return TokenSplit.load_tsv(cfg.split_file)
    if truth is None:
        raise InvalidConfigError("split.source = truth requires a synthetic corpus")
    occ = np.zeros(vocab_size, dtype=np.int64)
    for s in sequences:
        occ += np.bincount(s.tokens, minlength=vocab_size)
    return TokenSplit.from_truth(truth, occ)


def run_experiment(cfg: RunConfig) -> RunRecord:
    """Train one configuration end to end; reuses a completed run on digest match."""
    cfg.validate()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    digest = cfg.digest()
    record_path = out / "record.json"
    if record_path.exists():
        old = RunRecord.load(record_path)
        if old.digest == digest and old.status == "ok":
            log.info("run %s already complete, skipping", digest)
            return old
    (out / "config.txt").write_text(cfg.dump(), encoding="utf-8")

    start = time.perf_counter()
    vocab_size, num_domains, sequences, truth = prepare_data(cfg)
    if cfg.model.vocab and cfg.model.vocab != vocab_size:
        raise InvalidConfigError(f"model.vocab {cfg.model.vocab} does not match corpus {vocab_size}")
    model_cfg = dataclasses.replace(cfg.model, vocab=vocab_size, seed=cfg.seed)
    if cfg.reference_masked and model_cfg.experts != model_cfg.top_k * num_domains:
        raise InvalidConfigError(
            f"reference routing needs E = k * D (got E={model_cfg.experts}, "
            f"k={model_cfg.top_k}, D={num_domains})")

    split = _resolve_split(cfg, vocab_size, truth, sequences)
    stream = datagen.build_scope_stream(
        sequences, cfg.data.batch_sequences, cfg.balancing.scope_sequences,
        cfg.data.micro_batch_sequences, cfg.seed, cfg.data.val_fraction,
    )
    model = MoEModel(model_cfg)
    model.eval_bal = cfg.balancing
    model.eval_split = split
    model.eval_mask = cfg.reference_masked
    opt = AdamW(model.params, cfg.opt)

    status, failing_step = "ok", None
    tail: list[tuple[list[float], list[float | None], list[float]]] = []
    steps_path = out / "steps.tsv"
    with open(steps_path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(STEP_COLUMNS) + "\n")
        batches = stream.batches()
        for step in range(cfg.steps):
            groups = next(batches)
            try:
                sm = train_step(model, groups, cfg.balancing, opt, step,
                                token_split=split, reference_mask=cfg.reference_masked,
                                num_domains=num_domains,
                                collect_metrics=step % cfg.metric_cadence == 0)
            except TrainingError as exc:
                status, failing_step = "diverged", exc.step if exc.step is not None else step
                log.warning("run diverged at step %s: %s", failing_step, exc)
                break
            if step % cfg.metric_cadence == 0:
                utils = [acc.utilization() for acc in sm.accumulators]
                purs = [acc.purity() for acc in sm.accumulators]
                for layer, (u, p, dd) in enumerate(zip(utils, purs, sm.drop_fraction)):
                    fh.write("\t".join((
                        str(step), _fmt(sm.lm_loss), _fmt(sm.aux_loss), _fmt(dd),
                        str(layer), _fmt(u), _fmt(p),
                    )) + "\n")
                fh.flush()
                tail.append((utils, purs, sm.drop_fraction))
                if len(tail) > FINAL_WINDOW:
                    tail.pop(0)

    summary: dict = {}
    if status == "ok" and tail:
        util = float(np.mean([np.mean(u) for u, _, _ in tail]))
        pur_vals = [np.mean([p for p in ps if p is not None]) for _, ps, _ in tail if any(p is not None for p in ps)]
        purity = float(np.mean(pur_vals)) if pur_vals else float("nan")
        drop = float(np.mean([np.mean(dd) for _, _, dd in tail]))
        val = metrics.validation_loss(model, stream.validation,
                                      batch_sequences=cfg.balancing.scope_sequences)
        summary = {"utilization": util, "purity": purity, "val_loss": val,
                   "drop_frac": drop, "final_lm_loss": _last_lm(steps_path)}
    record = RunRecord(digest=digest, status=status, summary=summary,
                       wall_time=time.perf_counter() - start,
                       failing_step=failing_step, out_dir=str(out))
    record.save(record_path)
    if cfg.save_snapshot and status == "ok":
        model.save_snapshot(out / "model.bin")
    return record


def _last_lm(steps_path: Path) -> float:
    last = "nan"
    with open(steps_path, encoding="utf-8") as fh:
        fh.readline()
        for line in fh:
            last = line.split("\t", 2)[1]
    return float(last)


# --- grid sweeps -----------------------------------------------------------


def expand_grid(cfg: RunConfig) -> list[tuple[str, int, float | None]]:
    """Cartesian (method, scope, strength) cells with invalid combinations pruned.

    Strength applies to the auxiliary-loss method over ``grid.strengths`` and
    to the bias method over ``grid.eb_strengths``; the assignment methods
    carry none. The bias method only runs at global scope.
    """
    g = cfg.grid
    global_scope = cfg.data.batch_sequences
    cells: list[tuple[str, int, float | None]] = []
    for method in g.methods:
        if method == "lbl":
            cells.extend((method, s, x) for s in sorted(g.scopes) for x in sorted(g.strengths))
        elif method in ("ba", "sh"):
            cells.extend((method, s, None) for s in sorted(g.scopes))
        elif method == "eb":
            if global_scope in g.scopes:
                cells.extend((method, global_scope, x) for x in sorted(g.eb_strengths))
        else:
            raise InvalidConfigError(f"unknown grid method {method!r}")
    return cells


def _cell_config(base: RunConfig, method: str, scope: int, strength: float | None,
                 cache_path: str, runs_dir: Path) -> RunConfig:
    cfg = dataclasses.replace(base)
    cfg.balancing = dataclasses.replace(
        base.balancing, method=method, scope_sequences=scope,
        strength=strength if strength is not None else 0.0,
    )
    cfg.data = dataclasses.replace(base.data, cache=cache_path)
    cfg.grid = base.grid
    cfg.out_dir = str(runs_dir / f"{method}_s{scope}_x{_fmt(strength if strength is not None else 0.0)}")
    return cfg


def _grid_worker(cfg: RunConfig):
    try:
        rec = run_experiment(cfg)
        return rec.status, rec.summary
    except Exception as exc:  # recorded, grid continues
        log.exception("grid cell failed")
        return "error", {"error": str(exc)}


def run_grid(cfg: RunConfig) -> Path:
    """Run every grid cell; returns the summary TSV path.

    Rows are appended in deterministic cell order as results arrive, so the
    file is parseable mid-run and stable across re-runs.
    """
    cells = expand_grid(cfg)
    if not cells:
        raise InvalidConfigError("grid is empty after pruning")
    out = Path(cfg.out_dir)
    runs_dir = out / "runs"
    runs_dir.mkdir(parents=True, exist_ok=True)
    cache_path = cfg.data.cache or str(out / "data.mrtb")
    prepare_data(dataclasses.replace(cfg, data=dataclasses.replace(cfg.data, cache=cache_path)))

    configs = [_cell_config(cfg, m, s, x, cache_path, runs_dir) for m, s, x in cells]
    summary_path = out / "summary.tsv"
    with open(summary_path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(SUMMARY_COLUMNS) + "\n")
        fh.flush()
        if cfg.grid.workers > 1:
            os.environ.setdefault("OMP_NUM_THREADS", "1")
            os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
            with ProcessPoolExecutor(max_workers=cfg.grid.workers,
                                     mp_context=get_context("spawn")) as pool:
                futures = [pool.submit(_grid_worker, c) for c in configs]
                results = [f.result() for f in futures]
        else:
            results = [_grid_worker(c) for c in configs]
        for (method, scope, strength), (status, summary) in zip(cells, results):
            fh.write(_summary_row(method, scope, strength, cfg.balancing.capacity_factor,
                                  status, summary))
            fh.flush()
    return summary_path


def _summary_row(method: str, scope: int, strength: float | None, capacity: float,
                 status: str, summary: dict) -> str:
    return "\t".join((
        method, str(scope), _fmt(strength) if strength is not None else "none",
        _fmt(capacity),
        _fmt(summary.get("utilization", float("nan"))),
        _fmt(summary.get("purity", float("nan"))),
        _fmt(summary.get("val_loss", float("nan"))),
        _fmt(summary.get("drop_frac", float("nan"))),
        status,
    )) + "\n"


# --- reference-router sweep ---------------------------------------------------


def run_reference_sweep(cfg: RunConfig) -> Path:
    """Train one reference-masked model per split ratio; ratio 0 is fully learned."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cache_path = cfg.data.cache or str(out / "data.mrtb")
    vocab_size, num_domains, sequences, truth = prepare_data(
        dataclasses.replace(cfg, data=dataclasses.replace(cfg.data, cache=cache_path)))

    c = cfg.classifier
    clf = splitter.train_token_classifier(
        sequences, vocab_size, num_domains, hidden=c.hidden, ffn_hidden=c.ffn_hidden,
        epochs=c.epochs, seed=cfg.seed, lr=c.lr, holdout_frac=c.holdout_frac,
    )
    log.info("token classifier held-out accuracy: %.4f", clf.held_out_accuracy)
    splits_dir = out / "splits"
    splits_dir.mkdir(exist_ok=True)

    rows = []
    for ratio in cfg.sweep_ratios:
        split_path = splits_dir / f"ratio_{ratio:.4f}.tsv"
        split = splitter.derive_token_split(clf, sequences, target_ratio=ratio)
        split.save_tsv(split_path)
        run_cfg = dataclasses.replace(cfg)
        run_cfg.data = dataclasses.replace(cfg.data, cache=cache_path)
        run_cfg.split_source = "file"
        run_cfg.split_file = str(split_path)
        run_cfg.reference_masked = True
        run_cfg.out_dir = str(out / "runs" / f"ratio_{ratio:.4f}")
        rec = run_experiment(run_cfg)
        s = rec.summary
        rows.append((ratio, s.get("val_loss", float("nan")), s.get("purity", float("nan")),
                     s.get("utilization", float("nan"))))

    sweep_path = out / "sweep.tsv"
    with open(sweep_path, "w", encoding="utf-8") as fh:
        fh.write("ratio\tval_loss\tpurity\tutilization\n")
        for ratio, val, pur, util in rows:
            fh.write(f"{_fmt(ratio)}\t{_fmt(val)}\t{_fmt(pur)}\t{_fmt(util)}\n")
    return sweep_path


# --- trade-off analysis -------------------------------------------------------


def read_summary(path: str | Path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            row = dict(zip(header, parts))
            for col in ("utilization", "purity", "val_loss", "drop_frac"):
                row[col] = float(row[col])
            rows.append(row)
    return rows


def analyze_tradeoff(summary_path: str | Path, report_path: str | Path | None = None):
    """Rank correlation between (utilization + purity)/2 and validation loss."""
    rows = [r for r in read_summary(summary_path)
            if r["status"] == "ok" and math.isfinite(r["val_loss"])]
    if len(rows) < 3:
        raise InvalidConfigError(f"need at least 3 completed runs, found {len(rows)}")
    combined = [(r["utilization"] + r["purity"]) / 2 for r in rows]
    losses = [r["val_loss"] for r in rows]
    rho, tau = metrics.rank_correlation(combined, losses)
    note = "undefined: constant metric column" if math.isnan(rho) else ""
    report = (
        "# combined metric = (utilization + purity) / 2\n"
        "metric_x\tmetric_y\tspearman\tkendall\tn\tnote\n"
        f"combined\tval_loss\t{_fmt(rho)}\t{_fmt(tau)}\t{len(rows)}\t{note}\n"
    )
    if report_path is not None:
        Path(report_path).write_text(report, encoding="utf-8")
    return rho, tau, len(rows)
