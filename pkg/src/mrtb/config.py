"""Run configuration: flat ``section.key = value`` files with a typed schema.

Unknown keys are rejected so typos fail fast. Floats accept ``2^-8`` power
notation and ``inf``. The ``preset`` key loads a named base configuration
(``desk`` or ``fidelity``) before the remaining keys apply on top.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

from .balancing import BalancingConfig
from .errors import InvalidConfigError
from .model import ModelConfig, OptimizerConfig


def parse_float(text: str) -> float:
    text = text.strip()
    if "^" in text:
        base, exp = text.split("^", 1)
        return float(base) ** float(exp)
    return float(text)


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "1"):
        return True
    if t in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_list(parser):
    def inner(text: str):
        text = text.strip()
        if not text:
            return []
        return [parser(part) for part in text.split(",")]
    return inner


_SCHEMA: dict[str, object] = {
    "preset": str,
    "data.source": str,
    "data.path": str,
    "data.cache": str,
    "data.domains": int,
    "data.domain_vocab": int,
    "data.generic_vocab": int,
    "data.generic_rate": parse_float,
    "data.doc_len_min": int,
    "data.doc_len_max": int,
    "data.docs_per_domain": int,
    "data.vocab_cap": int,
    "data.seq_len": int,
    "data.batch_sequences": int,
    "data.micro_batch_sequences": int,
    "data.val_fraction": parse_float,
    "model.vocab": int,
    "model.hidden": int,
    "model.layers": int,
    "model.attention": _parse_bool,
    "model.attention_heads": int,
    "model.experts": int,
    "model.top_k": int,
    "model.expert_hidden": int,
    "model.granularity": int,
    "model.moe_layers": _parse_list(int),
    "model.gated_experts": _parse_bool,
    "model.router_collapse_bias": parse_float,
    "opt.lr": parse_float,
    "opt.beta1": parse_float,
    "opt.beta2": parse_float,
    "opt.eps": parse_float,
    "opt.weight_decay": parse_float,
    "opt.warmup_steps": int,
    "balancing.method": str,
    "balancing.scope": int,
    "balancing.strength": parse_float,
    "balancing.capacity_factor": parse_float,
    "balancing.sinkhorn_iters": int,
    "balancing.sinkhorn_tol": parse_float,
    "balancing.drop_priority": str,
    "balancing.ba_maximize": _parse_bool,
    "split.source": str,
    "split.file": str,
    "reference.masked": _parse_bool,
    "run.steps": int,
    "run.seed": int,
    "run.out_dir": str,
    "run.metric_cadence": int,
    "run.save_snapshot": _parse_bool,
    "grid.methods": _parse_list(str),
    "grid.scopes": _parse_list(int),
    "grid.strengths": _parse_list(parse_float),
    "grid.eb_strengths": _parse_list(parse_float),
    "grid.workers": int,
    "sweep.ratios": _parse_list(parse_float),
    "classifier.hidden": int,
    "classifier.ffn_hidden": int,
    "classifier.epochs": int,
    "classifier.lr": parse_float,
    "classifier.holdout_frac": parse_float,
}

# execution details that must not change a run's identity
_DIGEST_EXCLUDE = {"run.out_dir", "grid.workers", "data.cache", "preset"}


@dataclass
class DataConfig:
    source: str = "synthetic"
    path: str = ""
    cache: str = ""
    domains: int = 4
    domain_vocab: int = 32
    generic_vocab: int = 16
    generic_rate: float = 0.3
    doc_len_min: int = 384
    doc_len_max: int = 768
    docs_per_domain: int = 400
    vocab_cap: int = 8192
    seq_len: int = 256
    batch_sequences: int = 16
    micro_batch_sequences: int = 0
    val_fraction: float = 0.02


@dataclass
class ClassifierConfig:
    hidden: int = 32
    ffn_hidden: int = 64
    epochs: int = 2
    lr: float = 2.4e-3
    holdout_frac: float = 0.1


@dataclass
class GridSpec:
    methods: list[str] = field(default_factory=lambda: ["lbl"])
    scopes: list[int] = field(default_factory=lambda: [1, 16])
    strengths: list[float] = field(default_factory=lambda: [2.0 ** -e for e in range(8, -1, -1)])
    eb_strengths: list[float] = field(default_factory=lambda: [0.01])
    workers: int = 1


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    opt: OptimizerConfig = field(default_factory=OptimizerConfig)
    balancing: BalancingConfig = field(default_factory=BalancingConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    grid: GridSpec = field(default_factory=GridSpec)
    split_source: str = "truth"
    split_file: str = ""
    reference_masked: bool = False
    sweep_ratios: list[float] = field(default_factory=lambda: [0.0, 0.32, 0.44, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0])
    steps: int = 2000
    seed: int = 7
    out_dir: str = "out"
    metric_cadence: int = 1
    save_snapshot: bool = False

    def validate(self) -> None:
        d = self.data
        if d.source not in ("synthetic", "text", "cache"):
            raise InvalidConfigError(f"unknown data source {d.source!r}")
        if d.source in ("text", "cache") and not d.path:
            raise InvalidConfigError(f"data.path required for source {d.source!r}")
        if self.split_source not in ("truth", "file", "none"):
            raise InvalidConfigError(f"unknown split source {self.split_source!r}")
        if self.split_source == "file" and not self.split_file:
            raise InvalidConfigError("split.file required when split.source = file")
        if self.reference_masked and self.split_source == "none":
            raise InvalidConfigError("reference masking needs a token split")
        if self.balancing.scope_sequences > d.batch_sequences:
            raise InvalidConfigError("balancing scope cannot exceed the global batch")
        self.balancing.validate(global_batch=d.batch_sequences)
        if self.steps < 1:
            raise InvalidConfigError("run.steps must be positive")
        if self.metric_cadence < 1:
            raise InvalidConfigError("run.metric_cadence must be positive")

    def flat_items(self) -> list[tuple[str, str]]:
        m, o, b, d, c, g = self.model, self.opt, self.balancing, self.data, self.classifier, self.grid
        moe_layers = [i for i, on in enumerate(m.moe_layer_mask) if on]
        def fmt(v):
            if isinstance(v, bool):
                return "true" if v else "false"
            if isinstance(v, float):
                return "inf" if math.isinf(v) else repr(v)
            if isinstance(v, list):
                return ",".join(fmt(x) for x in v)
            return str(v)
        pairs = {
            "data.source": d.source, "data.path": d.path, "data.cache": d.cache,
            "data.domains": d.domains, "data.domain_vocab": d.domain_vocab,
            "data.generic_vocab": d.generic_vocab, "data.generic_rate": d.generic_rate,
            "data.doc_len_min": d.doc_len_min, "data.doc_len_max": d.doc_len_max,
            "data.docs_per_domain": d.docs_per_domain, "data.vocab_cap": d.vocab_cap,
            "data.seq_len": d.seq_len, "data.batch_sequences": d.batch_sequences,
            "data.micro_batch_sequences": d.micro_batch_sequences, "data.val_fraction": d.val_fraction,
            "model.vocab": m.vocab, "model.hidden": m.hidden, "model.layers": m.layers,
            "model.attention": m.attention_enabled, "model.attention_heads": m.attention_heads,
            "model.experts": m.experts, "model.top_k": m.top_k,
            "model.expert_hidden": m.expert_intermediate, "model.granularity": m.granularity,
            "model.moe_layers": moe_layers, "model.gated_experts": m.gated_experts,
            "model.router_collapse_bias": m.router_collapse_bias,
            "opt.lr": o.lr, "opt.beta1": o.beta1, "opt.beta2": o.beta2, "opt.eps": o.eps,
            "opt.weight_decay": o.weight_decay, "opt.warmup_steps": o.warmup_steps,
            "balancing.method": b.method, "balancing.scope": b.scope_sequences,
            "balancing.strength": b.strength, "balancing.capacity_factor": b.capacity_factor,
            "balancing.sinkhorn_iters": b.sinkhorn_iters, "balancing.sinkhorn_tol": b.sinkhorn_tol,
            "balancing.drop_priority": b.drop_priority, "balancing.ba_maximize": b.ba_maximize,
            "split.source": self.split_source, "split.file": self.split_file,
            "reference.masked": self.reference_masked,
            "run.steps": self.steps, "run.seed": self.seed, "run.out_dir": self.out_dir,
            "run.metric_cadence": self.metric_cadence, "run.save_snapshot": self.save_snapshot,
            "grid.methods": g.methods, "grid.scopes": g.scopes, "grid.strengths": g.strengths,
            "grid.eb_strengths": g.eb_strengths, "grid.workers": g.workers,
            "sweep.ratios": self.sweep_ratios,
            "classifier.hidden": c.hidden, "classifier.ffn_hidden": c.ffn_hidden,
            "classifier.epochs": c.epochs, "classifier.lr": c.lr,
            "classifier.holdout_frac": c.holdout_frac,
        }
        return [(k, fmt(v)) for k, v in sorted(pairs.items())]

    def dump(self) -> str:
        return "\n".join(f"{k} = {v}" for k, v in self.flat_items()) + "\n"

    def digest(self) -> str:
        text = "\n".join(f"{k} = {v}" for k, v in self.flat_items() if k not in _DIGEST_EXCLUDE)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def fidelity_preset() -> RunConfig:
    """Named configuration mirroring the full-size single-MoE-layer recipe."""
    cfg = RunConfig()
    cfg.data = DataConfig(seq_len=8192, batch_sequences=64)
    cfg.model = ModelConfig(
        vocab=0, hidden=2048, layers=1, attention_enabled=True, attention_heads=16,
        experts=32, top_k=4, expert_intermediate=1280, granularity=4,
    )
    cfg.opt = OptimizerConfig(lr=2.44e-4, beta1=0.9, beta2=0.95, eps=1e-8,
                              weight_decay=0.1, warmup_steps=2000)
    cfg.steps = 20000
    cfg.data.domains = 8
    cfg.balancing = BalancingConfig(method="lbl", scope_sequences=64, strength=2.0 ** -9)
    return cfg


_PRESETS = {"desk": RunConfig, "fidelity": fidelity_preset}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, object]:
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in _SCHEMA:
            raise InvalidConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _SCHEMA[key](val.strip())
        except (ValueError, TypeError) as exc:
            raise InvalidConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from exc
    return values


def build_run_config(values: dict[str, object]) -> RunConfig:
    preset = values.pop("preset", "desk")
    if preset not in _PRESETS:
        raise InvalidConfigError(f"unknown preset {preset!r}")
    cfg: RunConfig = _PRESETS[preset]()

    def take(key, default):
        return values.pop(key, default)

    d = cfg.data
    cfg.data = dataclasses.replace(
        d,
        source=take("data.source", d.source), path=take("data.path", d.path),
        cache=take("data.cache", d.cache), domains=take("data.domains", d.domains),
        domain_vocab=take("data.domain_vocab", d.domain_vocab),
        generic_vocab=take("data.generic_vocab", d.generic_vocab),
        generic_rate=take("data.generic_rate", d.generic_rate),
        doc_len_min=take("data.doc_len_min", d.doc_len_min),
        doc_len_max=take("data.doc_len_max", d.doc_len_max),
        docs_per_domain=take("data.docs_per_domain", d.docs_per_domain),
        vocab_cap=take("data.vocab_cap", d.vocab_cap),
        seq_len=take("data.seq_len", d.seq_len),
        batch_sequences=take("data.batch_sequences", d.batch_sequences),
        micro_batch_sequences=take("data.micro_batch_sequences", d.micro_batch_sequences),
        val_fraction=take("data.val_fraction", d.val_fraction),
    )
    m = cfg.model
    layers = take("model.layers", m.layers)
    moe_layers = take("model.moe_layers", None)
    mask = tuple(i in set(moe_layers) for i in range(layers)) if moe_layers else ()
    cfg.model = ModelConfig(
        vocab=take("model.vocab", m.vocab), hidden=take("model.hidden", m.hidden),
        layers=layers, attention_enabled=take("model.attention", m.attention_enabled),
        attention_heads=take("model.attention_heads", m.attention_heads),
        experts=take("model.experts", m.experts), top_k=take("model.top_k", m.top_k),
        expert_intermediate=take("model.expert_hidden", m.expert_intermediate),
        granularity=take("model.granularity", m.granularity),
        moe_layer_mask=mask if mask else (m.moe_layer_mask if layers == m.layers else ()),
        gated_experts=take("model.gated_experts", m.gated_experts),
        router_collapse_bias=take("model.router_collapse_bias", m.router_collapse_bias),
        seed=0,
    )
    o = cfg.opt
    cfg.opt = dataclasses.replace(
        o, lr=take("opt.lr", o.lr), beta1=take("opt.beta1", o.beta1),
        beta2=take("opt.beta2", o.beta2), eps=take("opt.eps", o.eps),
        weight_decay=take("opt.weight_decay", o.weight_decay),
        warmup_steps=take("opt.warmup_steps", o.warmup_steps),
    )
    b = cfg.balancing
    cfg.balancing = dataclasses.replace(
        b, method=take("balancing.method", b.method),
        scope_sequences=take("balancing.scope", b.scope_sequences),
        strength=take("balancing.strength", b.strength),
        capacity_factor=take("balancing.capacity_factor", b.capacity_factor),
        sinkhorn_iters=take("balancing.sinkhorn_iters", b.sinkhorn_iters),
        sinkhorn_tol=take("balancing.sinkhorn_tol", b.sinkhorn_tol),
        drop_priority=take("balancing.drop_priority", b.drop_priority),
        ba_maximize=take("balancing.ba_maximize", b.ba_maximize),
    )
    c = cfg.classifier
    cfg.classifier = dataclasses.replace(
        c, hidden=take("classifier.hidden", c.hidden),
        ffn_hidden=take("classifier.ffn_hidden", c.ffn_hidden),
        epochs=take("classifier.epochs", c.epochs), lr=take("classifier.lr", c.lr),
        holdout_frac=take("classifier.holdout_frac", c.holdout_frac),
    )
    g = cfg.grid
    cfg.grid = GridSpec(
        methods=take("grid.methods", g.methods), scopes=take("grid.scopes", g.scopes),
        strengths=take("grid.strengths", g.strengths),
        eb_strengths=take("grid.eb_strengths", g.eb_strengths),
        workers=take("grid.workers", g.workers),
    )
    cfg.split_source = values.pop("split.source", cfg.split_source)
    cfg.split_file = values.pop("split.file", cfg.split_file)
    cfg.reference_masked = values.pop("reference.masked", cfg.reference_masked)
    cfg.sweep_ratios = values.pop("sweep.ratios", cfg.sweep_ratios)
    cfg.steps = values.pop("run.steps", cfg.steps)
    cfg.seed = values.pop("run.seed", cfg.seed)
    cfg.out_dir = values.pop("run.out_dir", cfg.out_dir)
    cfg.metric_cadence = values.pop("run.metric_cadence", cfg.metric_cadence)
    cfg.save_snapshot = values.pop("run.save_snapshot", cfg.save_snapshot)
    if values:
        raise InvalidConfigError(f"unhandled keys: {sorted(values)}")

    env_seed = os.environ.get("MRTB_SEED")
    if env_seed is not None:
        cfg.seed = int(env_seed)
    cfg.model = dataclasses.replace(cfg.model, seed=cfg.seed)
    return cfg


def load_config(path: str | Path) -> RunConfig:
    cfg = build_run_config(parse_config_text(Path(path).read_text(encoding="utf-8"), str(path)))
    cfg.validate()
    return cfg
