"""The trainable MoE language model with hand-derived gradients.

Pre-norm residual decoder: embedding, optional causal attention (RoPE),
alternating dense / mixture-of-experts feed-forward layers, LM head. Routing
supports plain top-k, expert-bias selection, Sinkhorn and balanced-assignment
selection, reference masking, and capacity-limited dispatch with token
dropping. Gradients flow through combination weights and expert outputs but
never through the discrete selection itself.

For speed the whole global batch is processed as one flattened forward and
backward pass; balancing scope only changes which contiguous token slices
feed each selection problem, capacity limit and statistics aggregation.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import balancing
from .balancing import BalanceStats, BalancingConfig
from .datagen import ScopeGroup
from .errors import InvalidConfigError, InvalidInputError, TrainingError
from .metrics import MetricsAccumulator
from .numerics import top_k_rows, rng_for

NEG_MASK = -1e30  # large-negative fill standing in for -inf in selection logits

Params = dict[str, np.ndarray]


def _default_moe_mask(layers: int) -> tuple[bool, ...]:
    if layers == 1:
        return (True,)
    return tuple(i % 2 == 1 for i in range(layers))


@dataclass
class ModelConfig:
    vocab: int = 0  # 0 means "derive from the corpus"
    hidden: int = 64
    layers: int = 1
    attention_enabled: bool = False
    attention_heads: int = 4
    experts: int = 8
    top_k: int = 2
    expert_intermediate: int = 64
    granularity: int = 1
    moe_layer_mask: tuple[bool, ...] = ()
    gated_experts: bool = True
    router_collapse_bias: float = 0.0
    rope_base: float = 10000.0
    seed: int = 0

    def __post_init__(self):
        if not self.moe_layer_mask:
            self.moe_layer_mask = _default_moe_mask(self.layers)
        else:
            self.moe_layer_mask = tuple(self.moe_layer_mask)

    def validate(self) -> None:
        if self.vocab < 2:
            raise InvalidConfigError("model vocabulary not set")
        if self.top_k > self.experts:
            raise InvalidConfigError("top_k cannot exceed the expert count")
        if len(self.moe_layer_mask) != self.layers or not any(self.moe_layer_mask):
            raise InvalidConfigError("moe_layer_mask must cover all layers and mark at least one MoE layer")
        if self.attention_enabled and self.hidden % self.attention_heads != 0:
            raise InvalidConfigError("hidden size must divide evenly across attention heads")
        if self.attention_enabled and (self.hidden // self.attention_heads) % 2 != 0:
            raise InvalidConfigError("head dimension must be even for rotary embeddings")

    def with_granularity(self, g: int) -> "ModelConfig":
        """Scale expert count and top-k by g, expert width by 1/g (params constant)."""
        if g < 1 or self.expert_intermediate % g != 0:
            raise InvalidConfigError(f"granularity {g} must divide expert width {self.expert_intermediate}")
        return dataclasses.replace(
            self,
            experts=self.experts * g,
            top_k=self.top_k * g,
            expert_intermediate=self.expert_intermediate // g,
            granularity=self.granularity * g,
        )

    @property
    def dense_intermediate(self) -> int:
        # dense layers match the active expert parameter count
        return self.top_k * self.expert_intermediate


@dataclass
class RouterState:
    weight: np.ndarray            # (d, E)
    expert_bias: np.ndarray       # (E,), participates in selection only


@dataclass
class RoutingDecision:
    logits: np.ndarray            # (T, E) raw router logits
    selected: np.ndarray          # (T, k) expert indices
    weights: np.ndarray           # (T, k) softmax over selected raw logits
    dropped: np.ndarray           # (T, k) capacity drops
    token_domain: np.ndarray      # (T,)
    in_td: np.ndarray             # (T,) domain-specific flag


@dataclass
class BatchLayout:
    """Flattened global batch: which token rows form each scope group."""

    group_slices: list[slice]                 # token rows per scope group
    micro_rows: list[list[np.ndarray]]        # per group, per micro-batch row indices

    @classmethod
    def from_groups(cls, groups: list[ScopeGroup]) -> "BatchLayout":
        slices, micro = [], []
        offset_seq = 0
        for g in groups:
            S, L = g.tokens.shape
            start = offset_seq * L
            slices.append(slice(start, start + S * L))
            micro.append([
                (start + (mb[:, None] * L + np.arange(L)[None, :]).reshape(-1))
                for mb in g.micro_batches
            ])
            offset_seq += S
        return cls(slices, micro)


def apply_reference_mask(logits: np.ndarray, in_td: np.ndarray, domains: np.ndarray, k: int) -> np.ndarray:
    """Mask domain-specific tokens to their domain's k experts before top-k.

    Expert i serves domain floor(i/k); generic tokens pass through unchanged.
    """
    E = logits.shape[1]
    if E % k != 0:
        raise InvalidConfigError(f"expert count {E} must be divisible by top_k {k}")
    masked = logits.copy()
    rows = np.flatnonzero(in_td)
    if rows.size:
        groups = np.arange(E) // k
        allowed = groups[None, :] == domains[rows, None]
        masked[rows] = np.where(allowed, masked[rows], NEG_MASK)
    return masked


def route(
    router: RouterState,
    hidden: np.ndarray,
    k: int,
    mode: str,
    *,
    in_td: np.ndarray | None = None,
    domains: np.ndarray | None = None,
    reference_mask: bool = False,
    sinkhorn_iters: int = 50,
    sinkhorn_tol: float = 1e-3,
    ba_maximize: bool = True,
    group_slices: list[slice] | None = None,
) -> RoutingDecision:
    """Compute routing logits and select k experts per token.

    Selection depends on the mode (and any reference mask); combination
    weights are always a softmax over the raw logits at the selected slots.
    Sinkhorn and balanced assignment solve one problem per scope-group slice.
    """
    if mode not in ("plain", "expert_bias", "sinkhorn", "balanced_assignment"):
        raise InvalidInputError(f"unknown routing mode {mode!r}")
    T = hidden.shape[0]
    z = hidden @ router.weight
    if not np.all(np.isfinite(z)):
        raise TrainingError("router produced non-finite logits")
    if in_td is None:
        in_td = np.zeros(T, dtype=bool)
    if domains is None:
        domains = np.zeros(T, dtype=np.int32)
    zm = apply_reference_mask(z, in_td, domains, k) if reference_mask else z
    slices = group_slices or [slice(0, T)]
    if mode == "plain":
        sel = top_k_rows(zm, k)
    elif mode == "expert_bias":
        sel = top_k_rows(zm + router.expert_bias[None, :], k)
    elif mode == "sinkhorn":
        sel = np.empty((T, k), dtype=np.int64)
        for sl in slices:
            sel[sl] = top_k_rows(balancing.sinkhorn_normalize(zm[sl], sinkhorn_iters, sinkhorn_tol), k)
    else:
        if reference_mask:
            raise InvalidConfigError("balanced assignment does not compose with reference masking")
        sel = np.empty((T, k), dtype=np.int64)
        for sl in slices:
            sel[sl] = balancing.balanced_assignment(zm[sl], k, maximize=ba_maximize)
    zk = np.take_along_axis(z, sel, axis=1)
    w = np.exp(zk - zk.max(axis=1, keepdims=True))
    w /= w.sum(axis=1, keepdims=True)
    return RoutingDecision(
        logits=z,
        selected=sel,
        weights=w,
        dropped=np.zeros((T, k), dtype=bool),
        token_domain=domains,
        in_td=in_td,
    )


def apply_capacity(
    decision: RoutingDecision,
    capacity_factor: float,
    local_tokens: int,
    num_experts: int,
    k: int,
    priority: str = "weight",
    group_slices: list[slice] | None = None,
) -> RoutingDecision:
    """Set drop flags for slots beyond ceil(c * k * T_local / E) per expert.

    The limit applies within each local group (scope-group slice). Lowest
    routing weight is dropped first (ties keep the earlier token);
    ``priority="position"`` keeps earlier tokens instead. Surviving weights
    are not renormalized.
    """
    if math.isinf(capacity_factor):
        return decision
    if capacity_factor <= 0:
        raise InvalidInputError("capacity factor must be positive")
    slices = group_slices or [slice(0, decision.selected.shape[0])]
    cap = math.ceil(capacity_factor * k * local_tokens / num_experts)
    for sl in slices:
        sel = decision.selected[sl]
        w = decision.weights[sl]
        T_sl = sel.shape[0]
        flat_sel = sel.reshape(-1)
        flat_w = w.reshape(-1)
        tok = np.repeat(np.arange(T_sl), sel.shape[1])
        slot = np.tile(np.arange(sel.shape[1]), T_sl)
        dropped = decision.dropped[sl].reshape(-1)
        for e in range(num_experts):
            idx = np.flatnonzero(flat_sel == e)
            if idx.size <= cap:
                continue
            if priority == "weight":
                order = np.lexsort((slot[idx], tok[idx], -flat_w[idx]))
            else:
                order = np.lexsort((slot[idx], tok[idx]))
            dropped[idx[order[cap:]]] = True
        decision.dropped[sl] = dropped.reshape(sel.shape)
    return decision


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # value-stable without branching: exp overflow saturates to 0 exactly
    with np.errstate(over="ignore"):
        t = np.exp(np.negative(x))
    t += 1.0
    np.reciprocal(t, out=t)
    return t


def _silu(x: np.ndarray) -> np.ndarray:
    return x * _sigmoid(x)


def _silu_grad(x: np.ndarray, s: np.ndarray | None = None) -> np.ndarray:
    if s is None:
        s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def init_params(cfg: ModelConfig) -> tuple[Params, list[np.ndarray]]:
    """Seeded parameter init; returns (params, per-MoE-layer expert biases)."""
    cfg.validate()
    d, V = cfg.hidden, cfg.vocab
    rng = rng_for(cfg.seed, "model_init")
    p: Params = {"emb": rng.normal(0.0, 0.02, size=(V, d))}
    for l in range(cfg.layers):
        if cfg.attention_enabled:
            p[f"l{l}.g_attn"] = np.ones(d)
            for name in ("wq", "wk", "wv", "wo"):
                p[f"l{l}.{name}"] = rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, d))
        p[f"l{l}.g_ffn"] = np.ones(d)
        if cfg.moe_layer_mask[l]:
            E, h = cfg.experts, cfg.expert_intermediate
            p[f"l{l}.router"] = rng.normal(0.0, 0.02, size=(d, E))
            if cfg.gated_experts:
                p[f"l{l}.we_gate"] = rng.normal(0.0, 1.0 / math.sqrt(d), size=(E, d, h))
            p[f"l{l}.we_up"] = rng.normal(0.0, 1.0 / math.sqrt(d), size=(E, d, h))
            p[f"l{l}.we_down"] = rng.normal(0.0, 1.0 / math.sqrt(h), size=(E, h, d))
        else:
            h = cfg.dense_intermediate
            if cfg.gated_experts:
                p[f"l{l}.w_gate"] = rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, h))
            p[f"l{l}.w_up"] = rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, h))
            p[f"l{l}.w_down"] = rng.normal(0.0, 1.0 / math.sqrt(h), size=(h, d))
    p["g_final"] = np.ones(d)
    p["lm_head"] = np.zeros((d, V))
    biases = []
    for l in range(cfg.layers):
        if cfg.moe_layer_mask[l]:
            b = np.zeros(cfg.experts)
            if cfg.router_collapse_bias:
                b[: cfg.top_k] = cfg.router_collapse_bias
            biases.append(b)
    return p, biases


def _rmsnorm_fwd(x: np.ndarray, g: np.ndarray, eps: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    ms = np.einsum("...j,...j->...", x, x) / x.shape[-1]
    r = 1.0 / np.sqrt(ms + eps)
    r = r[..., None]
    return x * r * g, r


def _rmsnorm_bwd(dy: np.ndarray, x: np.ndarray, g: np.ndarray, r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = x.shape[-1]
    dg = np.einsum("...j,...j->j", dy * r, x)
    dyg = dy * g
    dot = np.einsum("...j,...j->...", dyg, x)[..., None]
    dx = r * dyg - x * (r ** 3 / d) * dot
    return dx, dg


class MoEModel:
    """Owns parameters, expert biases and the step logic for one run."""

    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        self.params, self.eb_bias = init_params(cfg)
        self._rope_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        # inference-time routing context, set once by the training driver
        self.eval_bal = BalancingConfig(method="lbl", strength=0.0)
        self.eval_split = None
        self.eval_mask = False

    # -- routing state ---------------------------------------------------

    def router_state(self, layer: int) -> RouterState:
        moe_index = sum(self.cfg.moe_layer_mask[:layer])
        return RouterState(self.params[f"l{layer}.router"], self.eb_bias[moe_index])

    def moe_layers(self) -> list[int]:
        return [l for l in range(self.cfg.layers) if self.cfg.moe_layer_mask[l]]

    # -- attention ---------------------------------------------------------

    def _rope(self, L: int) -> tuple[np.ndarray, np.ndarray]:
        if L not in self._rope_cache:
            hd = self.cfg.hidden // self.cfg.attention_heads
            inv = self.cfg.rope_base ** (-np.arange(0, hd, 2) / hd)
            ang = np.arange(L)[:, None] * inv[None, :]
            self._rope_cache[L] = (np.cos(ang), np.sin(ang))
        return self._rope_cache[L]

    def _attention_fwd(self, x: np.ndarray, layer: int, S: int, L: int, cache: dict | None):
        cfg = self.cfg
        H = cfg.attention_heads
        hd = cfg.hidden // H
        p = self.params
        q = (x @ p[f"l{layer}.wq"]).reshape(S, L, H, hd).transpose(0, 2, 1, 3)
        kk = (x @ p[f"l{layer}.wk"]).reshape(S, L, H, hd).transpose(0, 2, 1, 3)
        v = (x @ p[f"l{layer}.wv"]).reshape(S, L, H, hd).transpose(0, 2, 1, 3)
        cos, sin = self._rope(L)
        qr, kr = _rope_apply(q, cos, sin), _rope_apply(kk, cos, sin)
        scores = np.einsum("shld,shmd->shlm", qr, kr, optimize=True) / math.sqrt(hd)
        scores += np.triu(np.full((L, L), NEG_MASK), k=1)
        a = np.exp(scores - scores.max(axis=-1, keepdims=True))
        a /= a.sum(axis=-1, keepdims=True)
        ctx = np.einsum("shlm,shmd->shld", a, v, optimize=True)
        flat = ctx.transpose(0, 2, 1, 3).reshape(S * L, cfg.hidden)
        out = flat @ p[f"l{layer}.wo"]
        if cache is not None:
            cache[f"l{layer}.attn"] = (qr, kr, v, a, flat)
        return out

    def _attention_bwd(self, dout: np.ndarray, x: np.ndarray, layer: int, S: int, L: int,
                       cache: dict, grads: Params) -> np.ndarray:
        cfg = self.cfg
        H = cfg.attention_heads
        hd = cfg.hidden // H
        p = self.params
        qr, kr, v, a, flat = cache[f"l{layer}.attn"]
        grads[f"l{layer}.wo"] += flat.T @ dout
        dctx = (dout @ p[f"l{layer}.wo"].T).reshape(S, L, H, hd).transpose(0, 2, 1, 3)
        da = np.einsum("shld,shmd->shlm", dctx, v, optimize=True)
        ds = a * (da - (a * da).sum(axis=-1, keepdims=True))
        scale = 1.0 / math.sqrt(hd)
        dqr = np.einsum("shlm,shmd->shld", ds, kr, optimize=True) * scale
        dkr = np.einsum("shlm,shld->shmd", ds, qr, optimize=True) * scale
        dv = np.einsum("shlm,shld->shmd", a, dctx, optimize=True)
        cos, sin = self._rope(L)
        dq = _rope_apply(dqr, cos, -sin)
        dk = _rope_apply(dkr, cos, -sin)
        dx = np.zeros_like(x)
        for name, dh in (("wq", dq), ("wk", dk), ("wv", dv)):
            dflat = dh.transpose(0, 2, 1, 3).reshape(S * L, cfg.hidden)
            grads[f"l{layer}.{name}"] += x.T @ dflat
            dx += dflat @ p[f"l{layer}.{name}"].T
        return dx

    # -- mixture layer -------------------------------------------------------

    def _moe_fwd(self, f_in: np.ndarray, layer: int, bal: BalancingConfig,
                 domains_tok: np.ndarray, in_td: np.ndarray, reference_mask: bool,
                 layout: BatchLayout, local_tokens: int, train: bool, cache: dict | None):
        """Route, apply capacity, and run experts over slot-sorted token blocks.

        All T*k slots (dropped ones included) are gathered in expert order so
        each expert sees one contiguous block; dropped slots carry zero weight
        and therefore contribute nothing to the output or the gradients.
        """
        cfg = self.cfg
        E, k = cfg.experts, cfg.top_k
        mode = {"lbl": "plain", "eb": "expert_bias", "sh": "sinkhorn", "ba": "balanced_assignment"}[bal.method]
        dec = route(
            self.router_state(layer), f_in, k, mode,
            in_td=in_td, domains=domains_tok, reference_mask=reference_mask,
            sinkhorn_iters=bal.sinkhorn_iters, sinkhorn_tol=bal.sinkhorn_tol,
            ba_maximize=bal.ba_maximize, group_slices=layout.group_slices,
        )
        apply_capacity(dec, bal.capacity_factor, local_tokens, E, k, bal.drop_priority,
                       layout.group_slices)
        T = f_in.shape[0]
        p = self.params
        order = np.argsort(dec.selected.reshape(-1), kind="stable")
        offsets = np.concatenate(([0], np.cumsum(np.bincount(
            dec.selected.reshape(-1), minlength=E))))
        tok_of_slot = order // k
        w_eff = (dec.weights * ~dec.dropped).reshape(-1)[order]
        x_s = f_in[tok_of_slot]
        h = cfg.expert_intermediate
        u = np.empty((T * k, h))
        v = np.empty((T * k, h)) if cfg.gated_experts else None
        o = np.empty((T * k, cfg.hidden))
        gate_name = f"l{layer}.we_gate" if cfg.gated_experts else f"l{layer}.we_up"
        for e in range(E):
            sl = slice(offsets[e], offsets[e + 1])
            if sl.start == sl.stop:
                continue
            u[sl] = x_s[sl] @ p[gate_name][e]
            if v is not None:
                v[sl] = x_s[sl] @ p[f"l{layer}.we_up"][e]
        su = _sigmoid(u)
        a = u * su * v if v is not None else u * su
        for e in range(E):
            sl = slice(offsets[e], offsets[e + 1])
            if sl.start == sl.stop:
                continue
            o[sl] = a[sl] @ p[f"l{layer}.we_down"][e]
        contrib = np.empty((T * k, cfg.hidden))
        contrib[order] = o * w_eff[:, None]
        y = contrib.reshape(T, k, cfg.hidden).sum(axis=1)
        if cache is not None:
            cache[f"l{layer}.moe"] = (f_in, dec, (order, offsets, tok_of_slot, w_eff, x_s, u, su, v, a, o)
                                      if train else None)
        return y, dec

    def _moe_bwd(self, dy: np.ndarray, layer: int, aux_dz: np.ndarray | None,
                 cache: dict, grads: Params) -> np.ndarray:
        cfg = self.cfg
        E, k = cfg.experts, cfg.top_k
        f_in, dec, sort_cache = cache[f"l{layer}.moe"]
        order, offsets, tok_of_slot, w_eff, x_s, u, su, v, a, o = sort_cache
        p = self.params
        T = f_in.shape[0]
        dmix = dy[tok_of_slot]
        kept_s = w_eff != 0
        dw_s = np.einsum("ij,ij->i", dmix, o) * kept_s
        do = w_eff[:, None] * dmix
        da = np.empty_like(a)
        for e in range(E):
            sl = slice(offsets[e], offsets[e + 1])
            if sl.start == sl.stop:
                continue
            grads[f"l{layer}.we_down"][e] += a[sl].T @ do[sl]
            da[sl] = do[sl] @ p[f"l{layer}.we_down"][e].T
        if cfg.gated_experts:
            du = da * v * _silu_grad(u, su)
            dv = da * (u * su)
        else:
            du = da * _silu_grad(u, su)
            dv = None
        gate_name = f"l{layer}.we_gate" if cfg.gated_experts else f"l{layer}.we_up"
        dx_s = np.empty_like(x_s)
        for e in range(E):
            sl = slice(offsets[e], offsets[e + 1])
            if sl.start == sl.stop:
                continue
            grads[gate_name][e] += x_s[sl].T @ du[sl]
            dx_s[sl] = du[sl] @ p[gate_name][e].T
            if dv is not None:
                grads[f"l{layer}.we_up"][e] += x_s[sl].T @ dv[sl]
                dx_s[sl] += dv[sl] @ p[f"l{layer}.we_up"][e].T
        scatter = np.empty((T * k, cfg.hidden))
        scatter[order] = dx_s
        dx = scatter.reshape(T, k, cfg.hidden).sum(axis=1)
        dw_flat = np.zeros(T * k)
        dw_flat[order] = dw_s
        dw = dw_flat.reshape(T, k)
        # combination weights: softmax over the selected raw logits
        w = dec.weights
        dzk = w * (dw - (w * dw).sum(axis=1, keepdims=True))
        dz = np.zeros_like(dec.logits)
        np.put_along_axis(dz, dec.selected, dzk, axis=1)
        if aux_dz is not None:
            dz += aux_dz
        grads[f"l{layer}.router"] += f_in.T @ dz
        dx += dz @ p[f"l{layer}.router"].T
        return dx

    def _dense_fwd(self, f_in: np.ndarray, layer: int, train: bool, cache: dict | None) -> np.ndarray:
        p = self.params
        if self.cfg.gated_experts:
            u = f_in @ p[f"l{layer}.w_gate"]
            v = f_in @ p[f"l{layer}.w_up"]
        else:
            u = f_in @ p[f"l{layer}.w_up"]
            v = None
        su = _sigmoid(u)
        a = u * su * v if v is not None else u * su
        y = a @ p[f"l{layer}.w_down"]
        if cache is not None:
            cache[f"l{layer}.dense"] = (f_in, u, su, v, a)
        return y

    def _dense_bwd(self, dy: np.ndarray, layer: int, cache: dict, grads: Params) -> np.ndarray:
        p = self.params
        f_in, u, su, v, a = cache[f"l{layer}.dense"]
        grads[f"l{layer}.w_down"] += a.T @ dy
        da = dy @ p[f"l{layer}.w_down"].T
        if self.cfg.gated_experts:
            du = da * v * _silu_grad(u, su)
            dv = da * (u * su)
            grads[f"l{layer}.w_gate"] += f_in.T @ du
            grads[f"l{layer}.w_up"] += f_in.T @ dv
            return du @ p[f"l{layer}.w_gate"].T + dv @ p[f"l{layer}.w_up"].T
        du = da * _silu_grad(u, su)
        grads[f"l{layer}.w_up"] += f_in.T @ du
        return du @ p[f"l{layer}.w_up"].T

    # -- full passes ---------------------------------------------------------

    def forward_batch(self, tokens2d: np.ndarray, domains: np.ndarray, bal: BalancingConfig,
                      token_split=None, reference_mask: bool = False,
                      layout: BatchLayout | None = None, train: bool = True):
        """Flattened forward over (N, L) sequences; scores all but final positions."""
        cfg = self.cfg
        S, L = tokens2d.shape
        if layout is None:
            layout = BatchLayout([slice(0, S * L)], [[np.arange(S * L)]])
        local_tokens = layout.group_slices[0].stop - layout.group_slices[0].start
        flat_tokens = tokens2d.reshape(-1)
        domains_tok = np.repeat(domains, L)
        in_td = token_split.membership(flat_tokens) if token_split is not None else np.zeros(S * L, dtype=bool)
        cache: dict = {"shape": (S, L), "tokens": flat_tokens}
        h = self.params["emb"][flat_tokens]
        decisions: list[RoutingDecision] = []
        for l in range(cfg.layers):
            if cfg.attention_enabled:
                a_in, r = _rmsnorm_fwd(h, self.params[f"l{l}.g_attn"])
                cache[f"l{l}.attn_norm"] = (h, r)
                h = h + self._attention_fwd(a_in, l, S, L, cache if train else None)
                cache[f"l{l}.attn_in"] = a_in
            f_norm, r = _rmsnorm_fwd(h, self.params[f"l{l}.g_ffn"])
            cache[f"l{l}.ffn_norm"] = (h, r)
            if cfg.moe_layer_mask[l]:
                y, dec = self._moe_fwd(f_norm, l, bal, domains_tok, in_td, reference_mask,
                                       layout, local_tokens, train, cache)
                decisions.append(dec)
            else:
                y = self._dense_fwd(f_norm, l, train, cache)
            h = h + y
            # a non-finite entry poisons the sum, so this is a one-pass check
            if not math.isfinite(float(h.sum())):
                raise TrainingError(f"non-finite activation after layer {l}", name=f"layer{l}")
        hn, r = _rmsnorm_fwd(h, self.params["g_final"])
        cache["final_norm"] = (h, r)
        scored = (np.arange(S * L) % L) < (L - 1)
        logits = hn[scored] @ self.params["lm_head"]
        targets = tokens2d[:, 1:].reshape(-1)
        cache["hn"] = hn
        cache["scored"] = scored
        cache["layout"] = layout
        return logits, targets, decisions, cache

    def forward(self, group: ScopeGroup, bal: BalancingConfig, token_split=None,
                reference_mask: bool = False, train: bool = True):
        """Forward one scope group (the group is its own balancing locality)."""
        layout = BatchLayout.from_groups([group])
        return self.forward_batch(group.tokens, group.domains, bal, token_split,
                                  reference_mask, layout, train)

    def backward(self, dlogits: np.ndarray, cache: dict,
                 aux_dz_by_layer: dict[int, np.ndarray], grads: Params) -> None:
        cfg = self.cfg
        S, L = cache["shape"]
        hn, scored = cache["hn"], cache["scored"]
        grads["lm_head"] += hn[scored].T @ dlogits
        dhn = np.zeros_like(hn)
        dhn[scored] = dlogits @ self.params["lm_head"].T
        h, r = cache["final_norm"]
        dh, dg = _rmsnorm_bwd(dhn, h, self.params["g_final"], r)
        grads["g_final"] += dg
        for l in reversed(range(cfg.layers)):
            if cfg.moe_layer_mask[l]:
                dffn = self._moe_bwd(dh, l, aux_dz_by_layer.get(l), cache, grads)
            else:
                dffn = self._dense_bwd(dh, l, cache, grads)
            x_pre, r = cache[f"l{l}.ffn_norm"]
            dx, dg = _rmsnorm_bwd(dffn, x_pre, self.params[f"l{l}.g_ffn"], r)
            grads[f"l{l}.g_ffn"] += dg
            dh = dh + dx
            if cfg.attention_enabled:
                a_in = cache[f"l{l}.attn_in"]
                dattn_in = self._attention_bwd(dh, a_in, l, S, L, cache, grads)
                x_pre, r = cache[f"l{l}.attn_norm"]
                dx, dg = _rmsnorm_bwd(dattn_in, x_pre, self.params[f"l{l}.g_attn"], r)
                grads[f"l{l}.g_attn"] += dg
                dh = dh + dx
        np.add.at(grads["emb"], cache["tokens"], dh)

    def batch_loss_and_grads(self, tokens2d: np.ndarray, domains: np.ndarray,
                             bal: BalancingConfig, token_split, reference_mask: bool,
                             layout: BatchLayout, grads: Params,
                             accs: list[MetricsAccumulator] | None):
        """One full global batch: CE over scored positions plus scoped balancing loss.

        Returns (lm_loss, aux_loss, per-layer drop fractions, per-layer
        selection counts).
        """
        logits, targets, decisions, cache = self.forward_batch(
            tokens2d, domains, bal, token_split, reference_mask, layout, train=True)
        ce_sum, dlogits = _ce_sum(logits, targets)
        if not np.isfinite(ce_sum):
            raise TrainingError("non-finite language-model loss")
        n_scored = logits.shape[0]
        dlogits /= n_scored

        # auxiliary loss: sum over MoE layers, mean over scope groups
        aux_value = 0.0
        aux_dz: dict[int, np.ndarray] = {}
        if bal.method == "lbl" and bal.strength != 0.0:
            for idx, l in enumerate(self.moe_layers()):
                aux_value_l, dz = _scoped_lbl_grad(decisions[idx], layout, self.cfg, reference_mask)
                aux_value += aux_value_l
                aux_dz[l] = dz * bal.strength
        self.backward(dlogits, cache, aux_dz, grads)

        if accs is not None:
            for acc, dec in zip(accs, decisions):
                acc.update(dec)
        drop = [float(d.dropped.mean()) for d in decisions]
        sel_counts = [np.bincount(d.selected.reshape(-1), minlength=self.cfg.experts)
                      for d in decisions]
        return ce_sum / n_scored, aux_value, drop, sel_counts

    def eval_loss_sum(self, tokens: np.ndarray, domains: np.ndarray) -> tuple[float, int]:
        """Sum of next-token CE over scored positions, inference routing.

        Inference keeps the learned top-k selection (plus expert bias and any
        reference mask) and the configured capacity limit; Sinkhorn and
        balanced assignment are training-time devices and are not applied.
        """
        bal = self.eval_bal
        eval_bal = dataclasses.replace(bal, method="eb" if bal.method == "eb" else "lbl",
                                       strength=0.0)
        logits, targets, _, _ = self.forward_batch(
            tokens, domains, eval_bal, self.eval_split, self.eval_mask, train=False)
        ce, _ = _ce_sum(logits, targets, need_grad=False)
        return ce, int(logits.shape[0])

    # -- persistence -------------------------------------------------------

    def save_snapshot(self, path) -> None:
        save_snapshot(path, self.cfg, self.params, self.eb_bias)

    @classmethod
    def load_snapshot(cls, path) -> "MoEModel":
        cfg, params, biases = load_snapshot(path)
        model = cls.__new__(cls)
        model.cfg = cfg
        model.params = params
        model.eb_bias = biases
        model._rope_cache = {}
        model.eval_bal = BalancingConfig(method="lbl", strength=0.0)
        model.eval_split = None
        model.eval_mask = False
        return model


def _rope_apply(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    # x (S, H, L, hd); cos/sin (L, hd/2)
    xe, xo = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos
    return out


def _ce_sum(logits: np.ndarray, targets: np.ndarray, need_grad: bool = True):
    rows = np.arange(logits.shape[0])
    m = logits.max(axis=1)
    at_target = logits[rows, targets] - m
    ex = np.exp(logits - m[:, None])
    denom = ex.sum(axis=1)
    loss = float(np.sum(np.log(denom) - at_target))
    if not need_grad:
        return loss, None
    ex /= denom[:, None]
    ex[rows, targets] -= 1.0
    return loss, ex


def _scoped_lbl_grad(dec: RoutingDecision, layout: BatchLayout, cfg: ModelConfig,
                     reference_mask: bool):
    """Scope-aggregated LBL (mean over groups) and its router-logit gradient.

    Within each scope group, f aggregates over the group's micro-batches with
    no gradient; each micro-batch contributes E * sum_i f_i(scope) *
    P_i(local) through its own softmax probabilities.
    """
    E, k = cfg.experts, cfg.top_k
    zm = dec.logits
    if reference_mask:
        zm = apply_reference_mask(dec.logits, dec.in_td, dec.token_domain, k)
    s = np.exp(zm - zm.max(axis=1, keepdims=True))
    s /= s.sum(axis=1, keepdims=True)

    n_groups = len(layout.group_slices)
    dz = np.zeros_like(s)
    total = 0.0
    for g, sl in enumerate(layout.group_slices):
        stats: list[BalanceStats] = []
        for rows in layout.micro_rows[g]:
            counts = np.bincount(dec.selected[rows].reshape(-1), minlength=E)
            stats.append(BalanceStats(counts / (k * rows.size), s[rows].mean(axis=0), rows.size))
        loss, f_scope = balancing.scoped_lbl(stats, return_f=True)
        total += loss
        n_mb = len(stats)
        for rows in layout.micro_rows[g]:
            sl_s = s[rows]
            ds = np.broadcast_to(E * f_scope / (n_groups * n_mb * rows.size), sl_s.shape)
            dz[rows] = sl_s * (ds - (sl_s * ds).sum(axis=1, keepdims=True))
    return total / n_groups, dz


# --- optimizer -----------------------------------------------------------


@dataclass
class OptimizerConfig:
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    warmup_steps: int = 100
    decay: str = "none"   # "none" (ramp then constant) or "linear" (to zero)
    total_steps: int = 0  # required for linear decay


class AdamW:
    def __init__(self, params: Params, cfg: OptimizerConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def lr_at(self, step: int) -> float:
        c = self.cfg
        lr = c.lr * min(1.0, (step + 1) / max(1, c.warmup_steps))
        if c.decay == "linear" and c.total_steps:
            lr *= max(0.0, 1.0 - step / c.total_steps)
        return lr

    def step(self, params: Params, grads: Params, step: int) -> None:
        c = self.cfg
        self.t += 1
        lr = self.lr_at(step)
        b1c = 1.0 - c.beta1 ** self.t
        b2c = 1.0 - c.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient for {name}", name=name)
            m = self.m[name]
            v = self.v[name]
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            if p.ndim >= 2 and c.weight_decay:
                p -= lr * c.weight_decay * p
            p -= lr * (m / b1c) / (np.sqrt(v / b2c) + c.eps)


@dataclass
class StepMetrics:
    lm_loss: float
    aux_loss: float
    drop_fraction: list[float]
    accumulators: list[MetricsAccumulator]


def train_step(model: MoEModel, scope_groups: list[ScopeGroup], bal: BalancingConfig,
               opt: AdamW, step: int, token_split=None, reference_mask: bool = False,
               num_domains: int = 1, collect_metrics: bool = True) -> StepMetrics:
    """One optimizer step over a full global batch of scope groups."""
    cfg = model.cfg
    grads: Params = {k: np.zeros_like(v) for k, v in model.params.items()}
    layout = BatchLayout.from_groups(scope_groups)
    tokens2d = np.concatenate([g.tokens for g in scope_groups])
    domains = np.concatenate([g.domains for g in scope_groups])
    accs = [MetricsAccumulator(cfg.experts, num_domains) for _ in model.moe_layers()] if collect_metrics else None

    try:
        lm_loss, aux, drop, sel_counts = model.batch_loss_and_grads(
            tokens2d, domains, bal, token_split, reference_mask, layout, grads, accs)
    except TrainingError as exc:
        if exc.step is None:
            exc.step = step
        raise

    opt.step(model.params, grads, step)

    if bal.method == "eb":
        for i, counts in enumerate(sel_counts):
            f = counts / counts.sum()
            model.eb_bias[i] = balancing.expert_bias_update(model.eb_bias[i], f, bal.strength, cfg.experts)

    return StepMetrics(lm_loss=lm_loss, aux_loss=aux, drop_fraction=drop,
                       accumulators=accs or [])


# --- gradient-check hook ------------------------------------------------------


def model_loss_fn(cfg: ModelConfig, tokens2d: np.ndarray, domains: np.ndarray,
                  bal: BalancingConfig, token_split=None, reference_mask: bool = False,
                  layout: BatchLayout | None = None):
    """Deterministic (params -> loss, grads) closure for finite-difference checks.

    Loss is mean CE plus strength * scoped LBL, exactly as one training step
    sees it.
    """
    model = MoEModel(cfg)
    if layout is None:
        layout = BatchLayout.from_groups(
            [ScopeGroup(tokens2d, domains, [np.arange(tokens2d.shape[0])])])

    def fn(params: Params):
        model.params = params
        grads = {k: np.zeros_like(v) for k, v in params.items()}
        lm, aux, _, _ = model.batch_loss_and_grads(
            tokens2d, domains, bal, token_split, reference_mask, layout, grads, None)
        return lm + bal.strength * aux, grads

    return model, fn


# --- snapshot io -----------------------------------------------------------
# Layout (little endian): magic b"MRSN", version u16, config json (u32 length
# + utf-8 bytes), bias count u16 then each bias (u32 length + f64 data),
# param count u32 then per param: name (u16 length + utf-8), ndim u8,
# dims u32 each, f64 data.

_SNAP_MAGIC = b"MRSN"
_SNAP_VERSION = 1


def save_snapshot(path, cfg: ModelConfig, params: Params, biases: list[np.ndarray]) -> None:
    blob = json.dumps(dataclasses.asdict(cfg)).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_SNAP_MAGIC)
        fh.write(struct.pack("<HI", _SNAP_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<H", len(biases)))
        for b in biases:
            fh.write(struct.pack("<I", b.size))
            fh.write(np.asarray(b, dtype="<f8").tobytes())
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            nb = name.encode("utf-8")
            arr = params[name]
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.asarray(arr, dtype="<f8").tobytes())


def load_snapshot(path) -> tuple[ModelConfig, Params, list[np.ndarray]]:
    with open(path, "rb") as fh:
        if fh.read(4) != _SNAP_MAGIC:
            raise InvalidInputError(f"{path} is not a model snapshot")
        version, blob_len = struct.unpack("<HI", fh.read(6))
        if version != _SNAP_VERSION:
            raise InvalidInputError(f"unsupported snapshot version {version}")
        raw = json.loads(fh.read(blob_len).decode("utf-8"))
        raw["moe_layer_mask"] = tuple(raw["moe_layer_mask"])
        cfg = ModelConfig(**raw)
        (nb,) = struct.unpack("<H", fh.read(2))
        biases = []
        for _ in range(nb):
            (size,) = struct.unpack("<I", fh.read(4))
            biases.append(np.frombuffer(fh.read(8 * size), dtype="<f8").copy())
        (np_count,) = struct.unpack("<I", fh.read(4))
        params: Params = {}
        for _ in range(np_count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            dims = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            n = int(np.prod(dims)) if dims else 1
            params[name] = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(dims).copy()
    return cfg, params, biases
