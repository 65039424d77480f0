"""Capacity growth by expert replication.

The operator takes an E-expert model to an mE-expert model: every source
expert keeps one untouched copy, extra copies pass through a configurable
initialization heuristic, router columns travel with their expert, and the
extra copies' selection biases get small uniform noise so replicas do not tie
forever. Non-expert parameters are copied bit-for-bit. Replica slots sit
immediately after their source, so score ties still resolve to sources.

Also here: the zero-extension lift used to reason about capacity growth
(extra experts that are provably inert), utility-guided replica allocation,
and conversion of a dense checkpoint into a fresh-router MoE.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, InvalidStateError
from .model import DenseBlock, Model, MoEBlock, OptState
from .numerics import Rng, gram_schmidt

# stands in for -inf on the selection path; far below any reachable score
NEG_LOGIT = -1e9

EXPERT_KINDS = ("copy", "noise", "scaled", "interpolate", "drop", "orthogonal", "shuffle_cols", "random")
ROUTER_KINDS = ("copy", "noise", "interpolate", "temperature", "adversarial", "bias_only")
STRATEGIES = ("uniform", "grad_norm", "saliency", "weight_norm", "curvature", "manual")


@dataclass
class HeuristicSpec:
    """How extra expert copies and their router columns are initialized."""

    expert_kind: str = "copy"
    router_kind: str = "copy"
    params: dict = field(default_factory=dict)

    def validate(self) -> "HeuristicSpec":
        if self.expert_kind not in EXPERT_KINDS:
            raise InvalidInputError(f"unknown expert heuristic {self.expert_kind!r}")
        if self.router_kind not in ROUTER_KINDS:
            raise InvalidInputError(f"unknown router heuristic {self.router_kind!r}")
        p = self.params
        if not 0.0 <= p.get("alpha", 0.5) <= 1.0:
            raise InvalidInputError("alpha must be in [0, 1]")
        if not 0.0 < p.get("drop", 0.5) < 1.0:
            raise InvalidInputError("drop must be in (0, 1)")
        if not p.get("temp", 2.0) > 0.0:
            raise InvalidInputError("temp must be > 0")
        if not 0.0 <= p.get("beta", 1.0) <= 1.0:
            raise InvalidInputError("beta must be in [0, 1]")
        if p.get("lam", 0.01) < 0.0:
            raise InvalidInputError("lam must be >= 0")
        if not p.get("s", 0.95) > 0.0:
            raise InvalidInputError("s must be > 0")
        if p.get("init", "xavier") not in ("xavier", "kaiming", "normal"):
            raise InvalidInputError("init must be xavier, kaiming, or normal")
        return self


@dataclass
class ReplicationPlan:
    """Replica counts per source expert, one tuple per moe block index.
    Counts include the source's own slot, so each tuple sums to m * E."""

    m: int
    counts: dict[int, tuple[int, ...]]
    strategy: str = "uniform"

    def validate_for(self, model: Model) -> "ReplicationPlan":
        if self.m < 2:
            raise InvalidInputError("replication factor m must be >= 2")
        if self.strategy not in STRATEGIES:
            raise InvalidInputError(f"unknown strategy {self.strategy!r}")
        moe_ids = [bi for bi, _ in model.moe_blocks()]
        if sorted(self.counts) != moe_ids:
            raise InvalidInputError("plan must cover exactly the moe blocks")
        E = model.config.experts
        for bi, row in self.counts.items():
            if len(row) != E:
                raise InvalidInputError(f"block {bi}: plan needs one count per expert")
            if any(r < 1 for r in row):
                raise InvalidInputError(f"block {bi}: every expert keeps at least one slot")
            if sum(row) != self.m * E:
                raise InvalidInputError(f"block {bi}: counts must sum to m*E = {self.m * E}")
        return self


@dataclass
class UtilityScores:
    which: str
    per_layer: dict[int, np.ndarray]


def allocate_uniform(model: Model, m: int) -> ReplicationPlan:
    """Every expert gets m slots in every moe layer."""
    if m < 2:
        raise InvalidInputError("replication factor m must be >= 2")
    counts = {bi: (m,) * blk.experts for bi, blk in model.moe_blocks()}
    return ReplicationPlan(m=m, counts=counts, strategy="uniform")


def _expert_sq_norms(block: MoEBlock, arrs: tuple[np.ndarray, np.ndarray]) -> np.ndarray:
    w1, w2 = arrs
    return np.array(
        [float((w1[e] ** 2).sum() + (w2[e] ** 2).sum()) for e in range(block.experts)]
    )


def utility_scores(model: Model, grads: dict[str, np.ndarray], opt: OptState | None, which: str) -> UtilityScores:
    """Per-layer, per-expert usefulness scores from a gradient accumulated at
    the growth step. An expert that served no token scores zero under the
    gradient-based rules.

    grad_norm   ||g_e||^2
    saliency    ||w_e|| * ||g_e||
    weight_norm ||w_e||^2
    curvature   ||g_e||^2 / H_e, H_e = sum of the optimizer's second-moment
                entries over the expert (floored at 1e-12); needs an optimizer
                that has recorded at least one step.
    """
    if which not in ("grad_norm", "saliency", "weight_norm", "curvature"):
        raise InvalidInputError(f"unknown utility score {which!r}")
    if which == "curvature":
        if opt is None or opt.t < 1:
            raise InvalidStateError("curvature scoring needs optimizer state with t >= 1")
    per_layer: dict[int, np.ndarray] = {}
    for bi, blk in model.moe_blocks():
        g_sq = _expert_sq_norms(blk, (grads[f"b{bi}.w1"], grads[f"b{bi}.w2"]))
        if which == "grad_norm":
            scores = g_sq
        elif which == "weight_norm":
            scores = _expert_sq_norms(blk, (blk.w1, blk.w2))
        elif which == "saliency":
            w_sq = _expert_sq_norms(blk, (blk.w1, blk.w2))
            scores = np.sqrt(w_sq) * np.sqrt(g_sq)
        else:
            v1, v2 = opt.v[f"b{bi}.w1"], opt.v[f"b{bi}.w2"]
            h = np.array(
                [float(v1[e].sum() + v2[e].sum()) for e in range(blk.experts)]
            )
            scores = g_sq / np.maximum(h, 1e-12)
        per_layer[bi] = scores
    return UtilityScores(which=which, per_layer=per_layer)


def allocate_utility(model: Model, scores: UtilityScores, m: int) -> ReplicationPlan:
    """Greedy allocation with diminishing returns: every expert keeps one
    slot, then each of the (m-1)E extra slots goes to the expert maximizing
    score/r_e at its current count. Ties go to the lower expert id."""
    if m < 2:
        raise InvalidInputError("replication factor m must be >= 2")
    counts: dict[int, tuple[int, ...]] = {}
    for bi, blk in model.moe_blocks():
        raw = np.asarray(scores.per_layer[bi], dtype=np.float64)
        if raw.shape != (blk.experts,):
            raise InvalidInputError(f"block {bi}: need one score per expert")
        if (raw < 0).any():
            raise InvalidInputError("utility scores must be >= 0")
        r = np.ones(blk.experts, dtype=np.int64)
        effective = raw.copy()
        for _ in range((m - 1) * blk.experts):
            e = int(np.argmax(effective))  # first max = lowest id on ties
            r[e] += 1
            effective[e] = raw[e] / r[e]
        counts[bi] = tuple(int(x) for x in r)
    return ReplicationPlan(m=m, counts=counts, strategy=scores.which)


def _rms(w: np.ndarray) -> float:
    return float(np.sqrt((w * w).mean()))


def _fresh(shape: tuple[int, int], kind: str, sigma: float, rng: Rng) -> np.ndarray:
    nin, nout = shape
    if kind == "xavier":
        s = math.sqrt(2.0 / (nin + nout))
    elif kind == "kaiming":
        s = math.sqrt(2.0 / nin)
    else:
        s = sigma
    return rng.normal(0.0, s, size=nin * nout).reshape(shape)


def heuristic_expert_init(w: np.ndarray, spec: HeuristicSpec, rng: Rng, neighbor: np.ndarray | None = None) -> np.ndarray:
    """Produce one replica weight matrix from a source matrix."""
    p = spec.params
    kind = spec.expert_kind
    if kind == "copy":
        return w.copy()
    if kind == "noise":
        lam = p.get("lam", 0.01)
        return w + rng.normal(0.0, lam * _rms(w), size=w.size).reshape(w.shape)
    if kind == "scaled":
        return p.get("s", 0.95) * w
    if kind == "interpolate":
        if neighbor is None:
            raise InvalidInputError("interpolate needs the cyclic neighbor's weights")
        a = p.get("alpha", 0.5)
        return a * w + (1.0 - a) * neighbor
    if kind == "drop":
        out = w.copy()
        ncols = math.ceil(p.get("drop", 0.5) * w.shape[1])
        cols = rng.permutation(w.shape[1])[:ncols]
        fresh = _fresh(w.shape, p.get("init", "xavier"), p.get("sigma", 0.05), rng)
        out[:, cols] = fresh[:, cols]
        return out
    if kind == "orthogonal":
        # a copied row always lies in the span of the original rows, so the
        # residual degenerates and each row comes back as a seeded unit vector
        basis = [w[i] for i in range(w.shape[0])]
        out = np.empty_like(w)
        for i in range(w.shape[0]):
            out[i] = gram_schmidt(w[i], basis, rng, eps=p.get("eps", 1e-6))
        return out
    if kind == "shuffle_cols":
        return w[:, rng.permutation(w.shape[1])]
    if kind == "random":
        return _fresh(w.shape, "kaiming", 0.0, rng)
    raise InvalidInputError(f"unknown expert heuristic {kind!r}")


def heuristic_router_init(col: np.ndarray, spec: HeuristicSpec, rng: Rng, neighbor: np.ndarray | None = None) -> np.ndarray:
    """Produce one replica router column from a source column."""
    p = spec.params
    kind = spec.router_kind
    if kind in ("copy", "bias_only"):
        return col.copy()
    if kind == "noise":
        return col + rng.normal(0.0, p.get("sigma_r", 0.01), size=col.size)
    if kind == "interpolate":
        if neighbor is None:
            raise InvalidInputError("interpolate needs the cyclic neighbor's column")
        a = p.get("alpha", 0.5)
        return a * col + (1.0 - a) * neighbor
    if kind == "temperature":
        return col / p.get("temp", 2.0)
    if kind == "adversarial":
        return (1.0 - 2.0 * p.get("beta", 1.0)) * col
    raise InvalidInputError(f"unknown router heuristic {kind!r}")


def _slot_layout(counts: tuple[int, ...]):
    """Grouped layout: source e's slots are contiguous, source copy first.
    Returns (sources per slot, first-copy flags, groups per source)."""
    sources: list[int] = []
    firsts: list[bool] = []
    groups: list[list[int]] = []
    for e, r in enumerate(counts):
        slots = list(range(len(sources), len(sources) + r))
        groups.append(slots)
        sources.extend([e] * r)
        firsts.extend([True] + [False] * (r - 1))
    return sources, firsts, groups


def upcycle(model: Model, plan: ReplicationPlan, spec: HeuristicSpec, rng: Rng, delta: float = 1e-2) -> Model:
    """Grow an E-expert model to a (plan.m * E)-expert model.

    Draw order is fixed (layers in order, slots in order; per extra slot: w1,
    w2, router column, bias noise) so the result is a pure function of
    (model, plan, spec, rng seed, delta). The new model records its replica
    groups and a private slot map for optimizer-state expansion.
    """
    if model.kind != "moe":
        raise InvalidInputError("upcycle needs a moe model")
    spec.validate()
    plan.validate_for(model)
    if delta < 0:
        raise InvalidInputError("delta must be >= 0")
    cfg = model.config
    new_cfg = cfg.replace(experts=plan.m * cfg.experts)
    blocks = []
    groups_by_block: dict[int, list[list[int]]] = {}
    slot_maps: dict[int, list[tuple[int, str]]] = {}
    for bi, blk in enumerate(model.blocks):
        if not isinstance(blk, MoEBlock):
            blocks.append(DenseBlock(blk.gain.copy(), blk.w1.copy(), blk.w2.copy()))
            continue
        counts = plan.counts[bi]
        sources, firsts, groups = _slot_layout(counts)
        n_slots = len(sources)
        d, fe = blk.w1.shape[1], blk.w1.shape[2]
        w1 = np.empty((n_slots, d, fe))
        w2 = np.empty((n_slots, fe, d))
        router = np.empty((d, n_slots))
        bias = np.empty(n_slots)
        E = blk.experts
        for slot, (src, first) in enumerate(zip(sources, firsts)):
            if first:
                w1[slot] = blk.w1[src]
                w2[slot] = blk.w2[src]
                router[:, slot] = blk.router[:, src]
                bias[slot] = blk.select_bias[src]
            else:
                nb = (src + 1) % E
                w1[slot] = heuristic_expert_init(blk.w1[src], spec, rng, neighbor=blk.w1[nb])
                w2[slot] = heuristic_expert_init(blk.w2[src], spec, rng, neighbor=blk.w2[nb])
                router[:, slot] = heuristic_router_init(blk.router[:, src], spec, rng, neighbor=blk.router[:, nb])
                bias[slot] = blk.select_bias[src] + rng.uniform(-delta, delta)
        blocks.append(MoEBlock(blk.gain.copy(), router, bias, w1, w2))
        groups_by_block[bi] = groups
        slot_maps[bi] = [(src, "copy") for src in sources]
    out = Model(new_cfg, "moe", model.emb_prev.copy(), model.emb_cur.copy(), blocks, model.w_out.copy())
    out.replica_groups = groups_by_block
    out._slot_maps = slot_maps
    return out


def canonical_lift(model: Model, m: int) -> Model:
    """Zero-extension to m*E experts: every source keeps its slot group, the
    extra slots get all-zero expert weights, a zero router column, and a
    selection bias of -1e9 (the -inf sentinel), so they are never selected,
    contribute nothing to any mixture, and receive exactly zero gradient."""
    if model.kind != "moe":
        raise InvalidInputError("canonical_lift needs a moe model")
    if m < 2:
        raise InvalidInputError("replication factor m must be >= 2")
    cfg = model.config
    new_cfg = cfg.replace(experts=m * cfg.experts)
    blocks = []
    groups_by_block: dict[int, list[list[int]]] = {}
    slot_maps: dict[int, list[tuple[int, str]]] = {}
    for bi, blk in enumerate(model.blocks):
        if not isinstance(blk, MoEBlock):
            blocks.append(DenseBlock(blk.gain.copy(), blk.w1.copy(), blk.w2.copy()))
            continue
        counts = (m,) * blk.experts
        sources, firsts, groups = _slot_layout(counts)
        n_slots = len(sources)
        d, fe = blk.w1.shape[1], blk.w1.shape[2]
        w1 = np.zeros((n_slots, d, fe))
        w2 = np.zeros((n_slots, fe, d))
        router = np.zeros((d, n_slots))
        bias = np.full(n_slots, NEG_LOGIT)
        for slot, (src, first) in enumerate(zip(sources, firsts)):
            if first:
                w1[slot] = blk.w1[src]
                w2[slot] = blk.w2[src]
                router[:, slot] = blk.router[:, src]
                bias[slot] = blk.select_bias[src]
        blocks.append(MoEBlock(blk.gain.copy(), router, bias, w1, w2))
        groups_by_block[bi] = groups
        slot_maps[bi] = [(src, "copy" if first else "zero") for src, first in zip(sources, firsts)]
    out = Model(new_cfg, "moe", model.emb_prev.copy(), model.emb_cur.copy(), blocks, model.w_out.copy())
    out.replica_groups = groups_by_block
    out._slot_maps = slot_maps
    return out


def sparse_upcycle(dense_model: Model, experts: int, top_k: int, rng: Rng) -> Model:
    """Convert a dense-source checkpoint into an MoE: each converted block's
    FFN is replicated into every expert, router weights are fresh Kaiming
    draws, selection biases start at zero."""
    if dense_model.kind != "dense_source":
        raise InvalidInputError("sparse_upcycle needs a dense_source model")
    cfg = dense_model.config
    new_cfg = cfg.replace(experts=experts, top_k=top_k)
    d = cfg.dim
    blocks = []
    groups_by_block: dict[int, list[list[int]]] = {}
    slot_maps: dict[int, list[tuple[int, str]]] = {}
    for bi, blk in enumerate(dense_model.blocks):
        if cfg.moe_layout[bi] != "moe":
            blocks.append(DenseBlock(blk.gain.copy(), blk.w1.copy(), blk.w2.copy()))
            continue
        if blk.w1.shape[1] != cfg.expert_dim:
            raise InvalidInputError(
                f"block {bi}: dense width {blk.w1.shape[1]} != expert width {cfg.expert_dim}"
            )
        w1 = np.repeat(blk.w1[None, :, :], experts, axis=0)
        w2 = np.repeat(blk.w2[None, :, :], experts, axis=0)
        router = rng.normal(0.0, math.sqrt(2.0 / d), size=d * experts).reshape(d, experts)
        blocks.append(MoEBlock(blk.gain.copy(), router, np.zeros(experts), w1, w2))
        groups_by_block[bi] = [list(range(experts))]  # all experts share one source
        slot_maps[bi] = [(0, "copy")] * experts
    out = Model(new_cfg, "moe", dense_model.emb_prev.copy(), dense_model.emb_cur.copy(), blocks, dense_model.w_out.copy())
    out.replica_groups = groups_by_block
    out._slot_maps = slot_maps
    return out


def expand_opt_state(opt: OptState, new_model: Model) -> OptState:
    """Carry Adam moments through a growth operator: replicated slots inherit
    their source's moments (so symmetric replicas keep taking symmetric
    steps), zero-extended or fresh-initialized slots start from zero moments.
    The step counter continues."""
    maps = getattr(new_model, "_slot_maps", None)
    if maps is None:
        raise InvalidStateError("model does not carry a slot map; run a growth operator first")
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for name, p in new_model.named_params():
        bi = int(name.split(".")[0][1:]) if name.startswith("b") and "." in name else None
        if bi not in maps or not name.endswith((".w1", ".w2", ".router")):
            new_m[name] = opt.m[name].copy()
            new_v[name] = opt.v[name].copy()
            continue
        for store, src_store in ((new_m, opt.m), (new_v, opt.v)):
            old = src_store.get(name)
            if name.endswith(".router"):
                out = np.zeros_like(p)
                if old is not None:  # absent when the source block was dense
                    for slot, (src, policy) in enumerate(maps[bi]):
                        if policy == "copy":
                            out[:, slot] = old[:, src]
            elif old.ndim == 2:
                # dense-source ffn moments replicate into every expert slot
                out = np.repeat(old[None], p.shape[0], axis=0)
            else:
                out = np.zeros_like(p)
                for slot, (src, policy) in enumerate(maps[bi]):
                    if policy == "copy":
                        out[slot] = old[src]
            store[name] = out
    return OptState(m=new_m, v=new_v, t=opt.t, beta1=opt.beta1, beta2=opt.beta2, eps=opt.eps)
