"""Experiment harness: synthetic data, the three-way protocol, sweeps.

The protocol compares, under one seed and one matched token budget of T
steps: a small fixed model (E experts), a two-phase run (E experts for tau
steps, then grown to mE and continued), and a big fixed model (mE experts).
All arms consume identical batches at identical steps: the data stream is a
pure function of (data seed, step), and every arm switches from the pretrain
split to the continuation split at tau.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace as dc_replace

import numpy as np

from .errors import DegenerateGapError, InvalidInputError
from .model import (
    Model,
    ModelConfig,
    MoEBlock,
    OptState,
    Schedule,
    eval_loss,
    forward,
    init_model,
    init_opt,
    train_steps,
)
from .numerics import Rng, derive_seed, spearman
from .upcycle import (
    HeuristicSpec,
    ReplicationPlan,
    allocate_uniform,
    allocate_utility,
    expand_opt_state,
    sparse_upcycle,
    upcycle,
    utility_scores,
)


# ---------------------------------------------------------------------------
# data


@dataclass
class DataSpec:
    vocab: int = 32
    markov_order: int = 2
    corpus_len: int = 300_000
    pretrain_frac: float = 0.40
    cpt_frac: float = 0.40
    sharpness: float = 2.0
    seed: int = 1

    def validate(self) -> "DataSpec":
        if self.vocab < 2:
            raise InvalidInputError("data vocab must be >= 2")
        if not 1 <= self.markov_order <= 3:
            raise InvalidInputError("markov_order must be in [1, 3]")
        if self.corpus_len < 64:
            raise InvalidInputError("corpus_len too small")
        if min(self.pretrain_frac, self.cpt_frac) <= 0 or self.pretrain_frac + self.cpt_frac >= 1:
            raise InvalidInputError("split fractions must be positive and leave room for eval")
        if self.sharpness <= 0:
            raise InvalidInputError("sharpness must be > 0")
        return self


@dataclass
class Corpus:
    spec: DataSpec
    tokens: np.ndarray
    pretrain: tuple[int, int]
    cpt: tuple[int, int]
    holdout: tuple[int, int]
    transitions: np.ndarray  # (vocab^order, vocab) conditional rows

    def split(self, name: str) -> tuple[int, int]:
        if name not in ("pretrain", "cpt", "holdout"):
            raise InvalidInputError(f"unknown split {name!r}")
        return getattr(self, name)

    def mean_row_entropy(self) -> float:
        p = self.transitions
        return float(-(p * np.log(np.maximum(p, 1e-300))).sum(axis=1).mean())


def gen_data(spec: DataSpec) -> Corpus:
    """Sample a fixed-order Markov corpus and carve contiguous disjoint
    pretrain / continuation / holdout spans.

    The transition table is drawn once from the seed: each conditional row is
    a vector of exponential draws raised to `sharpness`, normalized. The
    chain then runs sequentially with inverse-CDF sampling.
    """
    spec.validate()
    rng = Rng(spec.seed)
    V = spec.vocab
    n_ctx = V**spec.markov_order
    u = rng.uniform(size=n_ctx * V)
    rows = (-np.log(1.0 - u)).reshape(n_ctx, V) ** spec.sharpness
    rows /= rows.sum(axis=1, keepdims=True)
    cdf = rows.cumsum(axis=1)
    cdf[:, -1] = 1.0

    tokens = np.empty(spec.corpus_len, dtype=np.int64)
    for i in range(spec.markov_order):
        tokens[i] = rng.integers(0, V)
    draws = rng.uniform(size=spec.corpus_len)
    ctx = 0
    for i in range(spec.markov_order):
        ctx = ctx * V + int(tokens[i])
    mod = n_ctx
    for i in range(spec.markov_order, spec.corpus_len):
        t = int(np.searchsorted(cdf[ctx], draws[i], side="right"))
        t = min(t, V - 1)
        tokens[i] = t
        ctx = (ctx * V + t) % mod
    a = int(spec.corpus_len * spec.pretrain_frac)
    b = a + int(spec.corpus_len * spec.cpt_frac)
    return Corpus(
        spec=spec,
        tokens=tokens,
        pretrain=(0, a),
        cpt=(a, b),
        holdout=(b, spec.corpus_len),
        transitions=rows,
    )


def _gather_windows(tokens: np.ndarray, starts: np.ndarray, width: int) -> np.ndarray:
    return tokens[starts[:, None] + np.arange(width)[None, :]]


def sample_batch(corpus: Corpus, split: str, seq_len: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Batch of windows for a given global step; a pure function of
    (seed, step), identical for every protocol arm."""
    lo, hi = corpus.split(split)
    width = seq_len + 2
    if hi - lo < width:
        raise InvalidInputError(f"split {split!r} shorter than one window")
    r = Rng(derive_seed(seed, 1_000_003 + step))
    starts = r.integers(lo, hi - width + 1, size=batch_size)
    return _gather_windows(corpus.tokens, np.asarray(starts), width)


def fixed_batch(corpus: Corpus, split: str, seq_len: int, batch_size: int) -> np.ndarray:
    """The same deterministic window set every step (non-stochastic mode)."""
    lo, hi = corpus.split(split)
    width = seq_len + 2
    n_fit = (hi - lo) // width
    if n_fit < 1:
        raise InvalidInputError(f"split {split!r} shorter than one window")
    starts = lo + width * (np.arange(min(batch_size, n_fit), dtype=np.int64) % n_fit)
    return _gather_windows(corpus.tokens, starts, width)


def holdout_windows(corpus: Corpus, seq_len: int, count: int) -> np.ndarray:
    """Fixed non-overlapping evaluation windows from the holdout span."""
    lo, hi = corpus.holdout
    width = seq_len + 2
    n_fit = (hi - lo) // width
    if n_fit < 1:
        raise InvalidInputError("holdout split shorter than one window")
    starts = lo + width * np.arange(min(count, n_fit), dtype=np.int64)
    return _gather_windows(corpus.tokens, starts, width)


# ---------------------------------------------------------------------------
# cost model


@dataclass
class CostSpec:
    """Wall-clock model: either explicit per-step seconds for the two sizes,
    or an affine per-parameter model a + b * total_params."""

    s_small: float | None = 2.2
    s_big: float | None = 4.2
    affine_base: float | None = None
    affine_per_param: float | None = None

    def resolve(self, params_small: int | None = None, params_big: int | None = None) -> tuple[float, float]:
        if self.s_small is not None and self.s_big is not None:
            return float(self.s_small), float(self.s_big)
        if self.affine_base is None or self.affine_per_param is None:
            raise InvalidInputError("cost spec needs s_small/s_big or an affine model")
        if params_small is None or params_big is None:
            raise InvalidInputError("affine cost model needs parameter counts")
        return (
            self.affine_base + self.affine_per_param * params_small,
            self.affine_base + self.affine_per_param * params_big,
        )


@dataclass
class CostReport:
    c_fixed: float  # big model for all T steps
    c_up: float  # small for tau, big for the rest
    saving: float
    saving_fraction: float
    c_up_sunk: float  # counting only post-growth steps
    sunk_reduction: float


def cost(spec: CostSpec, tau: int, total_steps: int, params_small: int | None = None, params_big: int | None = None) -> CostReport:
    if not 0 <= tau <= total_steps:
        raise InvalidInputError("tau must lie in [0, total_steps]")
    s_small, s_big = spec.resolve(params_small, params_big)
    c_fixed = total_steps * s_big
    c_up = tau * s_small + (total_steps - tau) * s_big
    saving = tau * (s_big - s_small)
    c_up_sunk = (total_steps - tau) * s_big
    return CostReport(
        c_fixed=c_fixed,
        c_up=c_up,
        saving=saving,
        saving_fraction=saving / c_fixed,
        c_up_sunk=c_up_sunk,
        sunk_reduction=(tau * s_big) / c_fixed,
    )


def efficiency(loss_fixed_small: float, loss_up: float, loss_fixed_big: float) -> float:
    """Fraction of the small-to-big quality gap recovered by growing mid-run:
    (L_small - L_up) / (L_small - L_big)."""
    den = loss_fixed_small - loss_fixed_big
    if den == 0.0:
        raise DegenerateGapError("fixed-size losses are equal; efficiency undefined")
    return (loss_fixed_small - loss_up) / den


# ---------------------------------------------------------------------------
# experiment config


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataSpec = field(default_factory=DataSpec)
    cost: CostSpec = field(default_factory=CostSpec)
    heuristic: HeuristicSpec = field(default_factory=HeuristicSpec)
    seed: int = 0
    total_steps: int = 6000
    cpt_fraction: float | None = None  # when set, total_steps = tau * (1 + f)
    tau: int = 3000
    m: int = 2
    strategy: str = "uniform"
    delta: float = 1e-2
    u_balance: float = 1e-2
    batch_size: int = 16
    peak_lr: float = 3e-3
    warmup_steps: int = 300
    decay_fraction: float = 0.10
    eval_every: int = 500
    probe_every: int = 250
    eval_window_count: int = 1024
    utility_batches: int = 8
    anneal_phase1: bool = False
    full_batch: bool = False

    def resolved_total(self) -> int:
        if self.cpt_fraction is not None:
            if self.cpt_fraction <= 0:
                raise InvalidInputError("cpt_fraction must be > 0")
            return self.tau + int(round(self.cpt_fraction * self.tau))
        return self.total_steps

    def schedule(self) -> Schedule:
        return Schedule(
            total_steps=self.resolved_total(),
            warmup_steps=self.warmup_steps,
            peak_lr=self.peak_lr,
            decay_fraction=self.decay_fraction,
        )

    def validate(self) -> "ExperimentConfig":
        self.model.validate()
        self.data.validate()
        self.heuristic.validate()
        if self.data.vocab != self.model.vocab:
            raise InvalidInputError("data vocab must match model vocab")
        total = self.resolved_total()
        if not 1 <= self.tau < total:
            raise InvalidInputError("tau must lie in [1, total_steps)")
        if self.m < 2:
            raise InvalidInputError("growth factor m must be >= 2")
        if self.strategy not in ("uniform", "grad_norm", "saliency", "weight_norm", "curvature"):
            raise InvalidInputError(f"unknown strategy {self.strategy!r}")
        if self.delta < 0 or self.u_balance < 0:
            raise InvalidInputError("delta and u_balance must be >= 0")
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be >= 1")
        self.schedule()  # validates warmup/decay against total
        return self

    # derived seed streams; the root seed covers model init
    def model_seed(self) -> int:
        return derive_seed(self.seed, 0)

    def data_seed(self) -> int:
        return derive_seed(self.seed, 1)

    def operator_seed(self) -> int:
        return derive_seed(self.seed, 2)

    def utility_seed(self) -> int:
        return derive_seed(self.seed, 3)

    def reference_seed(self) -> int:
        return derive_seed(self.seed, 4)

    def make_corpus(self) -> Corpus:
        return gen_data(dc_replace(self.data, seed=self.data_seed()))

    def stream(self, corpus: Corpus):
        """Step -> batch function shared by every arm."""
        L = self.model.seq_len
        if self.full_batch:
            pre = fixed_batch(corpus, "pretrain", L, self.batch_size)
            cpt = fixed_batch(corpus, "cpt", L, self.batch_size)
            return lambda t: pre if t < self.tau else cpt
        seed = self.data_seed()

        def _stream(t: int) -> np.ndarray:
            split = "pretrain" if t < self.tau else "cpt"
            return sample_batch(corpus, split, L, self.batch_size, seed, t)

        return _stream


# ---------------------------------------------------------------------------
# runs


@dataclass
class RunMetrics:
    arm: str
    seed: int
    train_loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    load_ratio: list = field(default_factory=list)
    eval_points: list = field(default_factory=list)  # (step, holdout loss)
    divergence: list = field(default_factory=list)  # (step, mean replica L2 gap)
    load_l1: list = field(default_factory=list)  # (step, mean replica load gap)
    loss_before_tau: float | None = None
    init_loss_tau: float | None = None
    terminal_eval: float = math.nan
    tokens: int = 0

    def eval_at(self, step: int) -> float:
        for s, v in self.eval_points:
            if s == step:
                return v
        raise InvalidInputError(f"no eval recorded at step {step}")

    def min_eval(self) -> float:
        return min(v for _, v in self.eval_points)


def _extend(metrics: RunMetrics, stats) -> None:
    metrics.train_loss.extend(stats.losses)
    metrics.lr.extend(stats.lrs)
    metrics.load_ratio.extend(stats.load_ratios)
    metrics.tokens += stats.tokens


def _boundaries(cfg: ExperimentConfig, t0: int, t1: int, probes: bool) -> list[int]:
    pts = {t1}
    for s in range(t0 + 1, t1 + 1):
        if s % cfg.eval_every == 0:
            pts.add(s)
        if probes and s % cfg.probe_every == 0:
            pts.add(s)
    if cfg.tau > t0:
        pts.add(min(cfg.tau, t1))
    return sorted(p for p in pts if t0 < p <= t1)


def symmetry_trace(model: Model, probe_windows: np.ndarray | None = None) -> dict:
    """Replica-group symmetry probe.

    param_div: mean pairwise L2 distance between slots of the same replica
    group, over expert weights, router column, and selection bias.
    load_l1: mean pairwise |load_a - load_b| on a probe batch (None without
    probe windows). Models without replica bookkeeping return zeros.
    """
    groups = model.replica_groups or {}
    dists = []
    loads_per_block: dict[int, np.ndarray] = {}
    if probe_windows is not None:
        _, cache = forward(model, probe_windows)
        loads_per_block = cache["loads"]
    gaps = []
    for bi, blk in model.moe_blocks():
        for grp in groups.get(bi, []):
            for i in range(len(grp)):
                for j in range(i + 1, len(grp)):
                    a, b = grp[i], grp[j]
                    sq = (
                        ((blk.w1[a] - blk.w1[b]) ** 2).sum()
                        + ((blk.w2[a] - blk.w2[b]) ** 2).sum()
                        + ((blk.router[:, a] - blk.router[:, b]) ** 2).sum()
                        + (blk.select_bias[a] - blk.select_bias[b]) ** 2
                    )
                    dists.append(np.sqrt(sq))
                    if bi in loads_per_block:
                        counts = loads_per_block[bi]
                        gaps.append(abs(float(counts[a]) - float(counts[b])))
    out = {"param_div": float(np.mean(dists)) if dists else 0.0}
    out["load_l1"] = (float(np.mean(gaps)) if gaps else 0.0) if probe_windows is not None else None
    return out


def _train_span(cfg, model, opt, stream, schedule, metrics, t0, t1, probes, probe_win):
    for b in _boundaries(cfg, t0, t1, probes):
        stats = train_steps(model, opt, stream, schedule, t0, b, u_balance=cfg.u_balance)
        _extend(metrics, stats)
        t0 = b
        if b % cfg.eval_every == 0 or b == t1:
            metrics.eval_points.append((b, eval_loss(model, probe_win)))
        if probes and (b % cfg.probe_every == 0 or b == t1):
            trace = symmetry_trace(model, probe_win)
            metrics.divergence.append((b, trace["param_div"]))
            metrics.load_l1.append((b, trace["load_l1"]))


@dataclass
class Phase1:
    model: Model
    opt: OptState
    metrics: RunMetrics
    loss_before_tau: float


def pretrain_phase(cfg: ExperimentConfig, corpus: Corpus | None = None) -> Phase1:
    """Steps [0, tau) at the small size; shared by the two-phase arm and any
    strategy/budget variants with an identical prefix (the caller is
    responsible for only reusing it when tau sits on the lr plateau)."""
    cfg.validate()
    if corpus is None:
        corpus = cfg.make_corpus()
    schedule = Schedule(cfg.tau, cfg.warmup_steps, cfg.peak_lr, cfg.decay_fraction) if cfg.anneal_phase1 else cfg.schedule()
    model = init_model(cfg.model, Rng(cfg.model_seed()))
    opt = init_opt(model)
    metrics = RunMetrics(arm="phase1", seed=cfg.seed)
    ev = holdout_windows(corpus, cfg.model.seq_len, cfg.eval_window_count)
    _train_span(cfg, model, opt, cfg.stream(corpus), schedule, metrics, 0, cfg.tau, False, ev)
    loss_before = eval_loss(model, ev)
    metrics.loss_before_tau = loss_before
    return Phase1(model=model, opt=opt, metrics=metrics, loss_before_tau=loss_before)


def accumulate_utility_grad(cfg: ExperimentConfig, corpus: Corpus, model: Model) -> dict[str, np.ndarray]:
    """Mean gradient over the utility batches, drawn from the continuation
    split on the utility seed stream (independent of the training stream)."""
    from .model import backward as model_backward

    L = cfg.model.seq_len
    acc: dict[str, np.ndarray] | None = None
    useed = cfg.utility_seed()
    for k in range(cfg.utility_batches):
        batch = sample_batch(corpus, "cpt", L, cfg.batch_size, useed, k)
        _, cache = forward(model, batch)
        g = model_backward(model, cache)
        if acc is None:
            acc = g
        else:
            for name in acc:
                acc[name] += g[name]
    assert acc is not None
    for name in acc:
        acc[name] /= cfg.utility_batches
    return acc


def _utility_plan(cfg: ExperimentConfig, corpus: Corpus, model: Model, opt: OptState) -> ReplicationPlan:
    """Score experts on an accumulated gradient and allocate greedily."""
    acc = accumulate_utility_grad(cfg, corpus, model)
    scores = utility_scores(model, acc, opt, cfg.strategy)
    return allocate_utility(model, scores, cfg.m)


def run_two_phase(
    cfg: ExperimentConfig,
    corpus: Corpus | None = None,
    phase1: Phase1 | None = None,
    plan: ReplicationPlan | None = None,
) -> tuple[Model, RunMetrics, ReplicationPlan]:
    """The growth arm: small for tau steps, operator, big until T."""
    cfg.validate()
    if corpus is None:
        corpus = cfg.make_corpus()
    if phase1 is None:
        phase1 = pretrain_phase(cfg, corpus)
    model = phase1.model.copy()
    opt = phase1.opt
    metrics = RunMetrics(arm="upcycled", seed=cfg.seed)
    metrics.train_loss = list(phase1.metrics.train_loss)
    metrics.lr = list(phase1.metrics.lr)
    metrics.load_ratio = list(phase1.metrics.load_ratio)
    metrics.eval_points = list(phase1.metrics.eval_points)
    metrics.tokens = phase1.metrics.tokens
    metrics.loss_before_tau = phase1.loss_before_tau

    if plan is None:
        if cfg.strategy == "uniform":
            plan = allocate_uniform(model, cfg.m)
        else:
            plan = _utility_plan(cfg, corpus, model, opt)
    grown = upcycle(model, plan, cfg.heuristic, Rng(cfg.operator_seed()), delta=cfg.delta)
    opt2 = expand_opt_state(opt, grown)

    ev = holdout_windows(corpus, cfg.model.seq_len, cfg.eval_window_count)
    metrics.init_loss_tau = eval_loss(grown, ev)
    metrics.eval_points.append((cfg.tau, metrics.init_loss_tau))

    total = cfg.resolved_total()
    _train_span(cfg, grown, opt2, cfg.stream(corpus), cfg.schedule(), metrics, cfg.tau, total, True, ev)
    metrics.terminal_eval = metrics.eval_at(total)
    return grown, metrics, plan


def run_fixed(
    cfg: ExperimentConfig,
    experts: int,
    corpus: Corpus | None = None,
    arm: str | None = None,
    phase1: Phase1 | None = None,
) -> tuple[Model, RunMetrics]:
    """A fixed-size arm for the full budget, same batches as the growth arm.
    When experts matches the small size, a phase-1 result may be resumed."""
    cfg.validate()
    if corpus is None:
        corpus = cfg.make_corpus()
    mcfg = cfg.model.replace(experts=experts)
    arm = arm or ("fixed_small" if experts == cfg.model.experts else "fixed_big")
    metrics = RunMetrics(arm=arm, seed=cfg.seed)
    ev = holdout_windows(corpus, cfg.model.seq_len, cfg.eval_window_count)
    if phase1 is not None:
        if experts != cfg.model.experts:
            raise InvalidInputError("phase-1 resume only fits the small size")
        model = phase1.model.copy()
        opt = OptState(
            m={k: v.copy() for k, v in phase1.opt.m.items()},
            v={k: v.copy() for k, v in phase1.opt.v.items()},
            t=phase1.opt.t,
            beta1=phase1.opt.beta1,
            beta2=phase1.opt.beta2,
            eps=phase1.opt.eps,
        )
        metrics.train_loss = list(phase1.metrics.train_loss)
        metrics.lr = list(phase1.metrics.lr)
        metrics.load_ratio = list(phase1.metrics.load_ratio)
        metrics.eval_points = list(phase1.metrics.eval_points)
        metrics.tokens = phase1.metrics.tokens
        t0 = cfg.tau
    else:
        model = init_model(mcfg, Rng(cfg.model_seed()))
        opt = init_opt(model)
        t0 = 0
    total = cfg.resolved_total()
    _train_span(cfg, model, opt, cfg.stream(corpus), cfg.schedule(), metrics, t0, total, False, ev)
    metrics.terminal_eval = metrics.eval_at(total)
    return model, metrics


def run_sparse_arm(cfg: ExperimentConfig, corpus: Corpus | None = None, experts: int | None = None) -> tuple[Model, RunMetrics]:
    """Dense-to-MoE baseline: a dense source (expert-width FFN in the moe
    slots) for tau steps, converted with a fresh router, then continued."""
    cfg.validate()
    if corpus is None:
        corpus = cfg.make_corpus()
    if experts is None:
        experts = cfg.model.experts
    metrics = RunMetrics(arm="sparse_upcycled", seed=cfg.seed)
    model = init_model(cfg.model, Rng(cfg.model_seed()), dense_source=True)
    opt = init_opt(model)
    ev = holdout_windows(corpus, cfg.model.seq_len, cfg.eval_window_count)
    _train_span(cfg, model, opt, cfg.stream(corpus), cfg.schedule(), metrics, 0, cfg.tau, False, ev)
    metrics.loss_before_tau = eval_loss(model, ev)
    grown = sparse_upcycle(model, experts, cfg.model.top_k, Rng(cfg.operator_seed()))
    opt2 = expand_opt_state(opt, grown)
    metrics.init_loss_tau = eval_loss(grown, ev)
    metrics.eval_points.append((cfg.tau, metrics.init_loss_tau))
    total = cfg.resolved_total()
    _train_span(cfg, grown, opt2, cfg.stream(corpus), cfg.schedule(), metrics, cfg.tau, total, True, ev)
    metrics.terminal_eval = metrics.eval_at(total)
    return grown, metrics


# ---------------------------------------------------------------------------
# three-way comparison and reports


def _new_slot_distance_sq(up_model: Model, ref_model: Model) -> float:
    """Squared parameter distance over the grown model's replica (non-first)
    slots against the same slot indices of a reference model. The index
    correspondence to an independently trained reference is arbitrary; the
    caller must label the number accordingly."""
    total = 0.0
    groups = up_model.replica_groups or {}
    for bi, blk in up_model.moe_blocks():
        ref = ref_model.blocks[bi]
        for grp in groups.get(bi, []):
            for slot in grp[1:]:
                total += float(((blk.w1[slot] - ref.w1[slot]) ** 2).sum())
                total += float(((blk.w2[slot] - ref.w2[slot]) ** 2).sum())
                total += float(((blk.router[:, slot] - ref.router[:, slot]) ** 2).sum())
    return total


@dataclass
class ThreeWayResult:
    cfg: ExperimentConfig
    small: RunMetrics
    up: RunMetrics
    big: RunMetrics
    eta: float
    cost_report: CostReport
    bound_report: dict
    plan: ReplicationPlan


def three_way(cfg: ExperimentConfig, corpus: Corpus | None = None, phase1: Phase1 | None = None) -> ThreeWayResult:
    """Run all three arms and assemble efficiency, cost, and gap-bound
    numbers. Token budgets are matched by construction and asserted."""
    from .bound import BoundInputs, bound as bound_fn, term1, term2

    cfg.validate()
    if corpus is None:
        corpus = cfg.make_corpus()
    if phase1 is None:
        phase1 = pretrain_phase(cfg, corpus)
    up_model_final, up_metrics, plan = run_two_phase(cfg, corpus, phase1)
    # the small arm may only resume phase 1 when phase 1 ran the shared schedule
    resume = None if cfg.anneal_phase1 else phase1
    small_model, small_metrics = run_fixed(cfg, cfg.model.experts, corpus, phase1=resume)
    big_model, big_metrics = run_fixed(cfg, cfg.m * cfg.model.experts, corpus)
    assert small_metrics.tokens == up_metrics.tokens == big_metrics.tokens

    eta = efficiency(small_metrics.terminal_eval, up_metrics.terminal_eval, big_metrics.terminal_eval)
    params_small = small_model.total_params()
    params_big = big_model.total_params()
    cost_rep = cost(cfg.cost, cfg.tau, cfg.resolved_total(), params_small, params_big)

    # distances for the gap decomposition: the grown model at tau versus the
    # big arm's terminal parameters, and a random big init versus the same
    up_at_tau = upcycle(phase1.model, plan, cfg.heuristic, Rng(cfg.operator_seed()), delta=cfg.delta)
    rand_big = init_model(cfg.model.replace(experts=cfg.m * cfg.model.experts), Rng(cfg.reference_seed()))
    rand_big.replica_groups = up_at_tau.replica_groups
    dist_up = _new_slot_distance_sq(up_at_tau, big_model)
    dist_rand = _new_slot_distance_sq(rand_big, big_model)
    inputs = BoundInputs(
        schedule=cfg.schedule(),
        tau=cfg.tau,
        lstar_small=small_metrics.min_eval(),
        lstar_big=big_metrics.min_eval(),
        dist_up_sq=dist_up,
        dist_rand_sq=dist_rand,
    )
    measured_gap = bound_fn(inputs)
    from .bound import weighted_avg_loss

    sched = cfg.schedule()
    gap_observed = weighted_avg_loss(up_metrics.train_loss, sched) - weighted_avg_loss(big_metrics.train_loss, sched)
    bound_report = {
        "term1": term1(inputs),
        "term2": term2(inputs),
        "bound": measured_gap,
        "observed_weighted_gap": gap_observed,
        "warm_init_gap": (up_metrics.init_loss_tau or math.nan) - (up_metrics.loss_before_tau or math.nan),
        "lstar_source": "within-run min eval",
        "dist_up_sq": dist_up,
        "dist_rand_sq": dist_rand,
    }
    return ThreeWayResult(
        cfg=cfg,
        small=small_metrics,
        up=up_metrics,
        big=big_metrics,
        eta=eta,
        cost_report=cost_rep,
        bound_report=bound_report,
        plan=plan,
    )


# ---------------------------------------------------------------------------
# sweeps and summary statistics


SWEEP_AXES = ("tau", "cpt_fraction", "strategy", "heuristic", "activation_ratio")


def _cfg_for(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    if axis == "tau":
        return dc_replace(cfg, tau=int(value))
    if axis == "cpt_fraction":
        return dc_replace(cfg, cpt_fraction=float(value))
    if axis == "strategy":
        return dc_replace(cfg, strategy=str(value))
    if axis == "heuristic":
        return dc_replace(cfg, heuristic=parse_heuristic(value) if isinstance(value, str) else value)
    if axis == "activation_ratio":
        k = max(1, int(round(float(value) * cfg.model.experts)))
        return dc_replace(cfg, model=cfg.model.replace(top_k=k))
    raise InvalidInputError(f"unknown sweep axis {axis!r}")


def parse_heuristic(text: str) -> HeuristicSpec:
    """Parse 'kind', 'kind(param=value,...)', or 'expert|router' pairs like
    'noise(lam=0.05)|temperature(temp=2.0)'."""

    def one(part: str):
        part = part.strip()
        if "(" in part:
            if not part.endswith(")"):
                raise InvalidInputError(f"malformed heuristic {part!r}")
            name, argstr = part[:-1].split("(", 1)
            params = {}
            for piece in filter(None, (p.strip() for p in argstr.split(","))):
                if "=" not in piece:
                    raise InvalidInputError(f"malformed heuristic parameter {piece!r}")
                k, v = piece.split("=", 1)
                params[k.strip()] = float(v) if k.strip() != "init" else v.strip()
            return name.strip(), params
        return part, {}

    parts = text.split("|")
    ek, ep = one(parts[0])
    rk, rp = one(parts[1]) if len(parts) > 1 else ("copy", {})
    ep.update(rp)
    return HeuristicSpec(expert_kind=ek, router_kind=rk, params=ep).validate()


@dataclass
class SweepRow:
    axis: str
    value: object
    seed: int
    eta: float
    terminal_small: float
    terminal_up: float
    terminal_big: float
    init_loss_tau: float
    loss_before_tau: float
    terminal_sparse: float | None = None


def sweep(cfg: ExperimentConfig, axis: str, values, seeds) -> list[SweepRow]:
    """Three-way protocol across one axis and several seeds. Fixed arms and
    phase-1 prefixes are shared where they are bitwise-identical."""
    if axis not in SWEEP_AXES:
        raise InvalidInputError(f"unknown sweep axis {axis!r}")
    rows: list[SweepRow] = []
    for seed in seeds:
        fixed_cache: dict = {}
        phase1_cache: dict = {}
        for value in values:
            c = _cfg_for(dc_replace(cfg, seed=seed), axis, value).validate()
            corpus_key = "corpus"
            if corpus_key not in fixed_cache:
                fixed_cache[corpus_key] = c.make_corpus()
            corpus = fixed_cache[corpus_key]
            total = c.resolved_total()
            sched = c.schedule()
            on_plateau = c.tau <= total - sched.decay_steps and not c.anneal_phase1
            p1_key = (c.tau, c.model.top_k)
            if on_plateau and p1_key in phase1_cache:
                phase1 = phase1_cache[p1_key]
            else:
                phase1 = pretrain_phase(c, corpus)
                if on_plateau:
                    phase1_cache[p1_key] = phase1
            res = three_way_cached(c, corpus, phase1, fixed_cache)
            row = SweepRow(
                axis=axis,
                value=value,
                seed=seed,
                eta=res.eta,
                terminal_small=res.small.terminal_eval,
                terminal_up=res.up.terminal_eval,
                terminal_big=res.big.terminal_eval,
                init_loss_tau=res.up.init_loss_tau,
                loss_before_tau=res.up.loss_before_tau,
            )
            if axis == "activation_ratio":
                _, sparse_metrics = run_sparse_arm(c, corpus, experts=c.m * c.model.experts)
                row.terminal_sparse = sparse_metrics.terminal_eval
            rows.append(row)
    return rows


def three_way_cached(cfg: ExperimentConfig, corpus: Corpus, phase1: Phase1, cache: dict) -> ThreeWayResult:
    """three_way with fixed-arm reuse: the fixed arms do not depend on the
    growth strategy or heuristic, so they are keyed by what they do see."""
    key_small = ("fixed", cfg.model.experts, cfg.model.top_k, cfg.resolved_total())
    key_big = ("fixed", cfg.m * cfg.model.experts, cfg.model.top_k, cfg.resolved_total())
    if key_small not in cache:
        resume = None if cfg.anneal_phase1 else phase1
        cache[key_small] = run_fixed(cfg, cfg.model.experts, corpus, phase1=resume)
    if key_big not in cache:
        cache[key_big] = run_fixed(cfg, cfg.m * cfg.model.experts, corpus)
    small_model, small_metrics = cache[key_small]
    big_model, big_metrics = cache[key_big]
    _, up_metrics, plan = run_two_phase(cfg, corpus, phase1)
    eta = efficiency(small_metrics.terminal_eval, up_metrics.terminal_eval, big_metrics.terminal_eval)
    cost_rep = cost(cfg.cost, cfg.tau, cfg.resolved_total(), small_model.total_params(), big_model.total_params())
    return ThreeWayResult(
        cfg=cfg,
        small=small_metrics,
        up=up_metrics,
        big=big_metrics,
        eta=eta,
        cost_report=cost_rep,
        bound_report={},
        plan=plan,
    )


def continue_phase(
    cfg: ExperimentConfig,
    model: Model,
    opt: OptState,
    corpus: Corpus | None = None,
    t0: int | None = None,
    arm: str = "upcycled",
    probes: bool = True,
) -> RunMetrics:
    """Resume training from an arbitrary step to the end of the budget, e.g.
    after loading a grown checkpoint."""
    cfg.validate()
    if corpus is None:
        corpus = cfg.make_corpus()
    if t0 is None:
        t0 = cfg.tau
    metrics = RunMetrics(arm=arm, seed=cfg.seed)
    ev = holdout_windows(corpus, cfg.model.seq_len, cfg.eval_window_count)
    total = cfg.resolved_total()
    _train_span(cfg, model, opt, cfg.stream(corpus), cfg.schedule(), metrics, t0, total, probes, ev)
    metrics.terminal_eval = metrics.eval_at(total)
    return metrics


# ---------------------------------------------------------------------------
# config (de)serialization for the command line and checkpoints


def config_to_dict(cfg: ExperimentConfig) -> dict:
    d = cfg.__dict__.copy()
    d["model"] = cfg.model.to_dict()
    d["data"] = cfg.data.__dict__.copy()
    d["cost"] = cfg.cost.__dict__.copy()
    d["heuristic"] = {
        "expert_kind": cfg.heuristic.expert_kind,
        "router_kind": cfg.heuristic.router_kind,
        "params": dict(cfg.heuristic.params),
    }
    return d


def config_from_dict(d: dict) -> ExperimentConfig:
    d = dict(d)
    try:
        model = ModelConfig.from_dict(d.pop("model", {}))
        data = DataSpec(**d.pop("data", {}))
        cost_spec = CostSpec(**d.pop("cost", {}))
        heuristic = HeuristicSpec(**d.pop("heuristic", {}))
        cfg = ExperimentConfig(model=model, data=data, cost=cost_spec, heuristic=heuristic, **d)
    except TypeError as e:
        raise InvalidInputError(f"bad config: {e}") from e
    return cfg.validate()


def init_terminal_correlation(runs) -> float:
    """Rank correlation between post-growth starting loss and terminal loss
    across growth arms. Accepts RunMetrics or bare (init, terminal) pairs;
    needs at least 5 runs for the rank statistic to mean anything."""
    pairs = [
        (r.init_loss_tau, r.terminal_eval) if isinstance(r, RunMetrics) else (r[0], r[1])
        for r in runs
    ]
    if len(pairs) < 5:
        raise InvalidInputError("need at least 5 runs to correlate")
    init = [p[0] for p in pairs]
    term = [p[1] for p in pairs]
    return spearman(init, term)


def sign_test_p(diffs) -> float:
    """One-sided sign test: p-value for the hypothesis that positive
    differences are no more likely than negative ones (ties dropped)."""
    pos = sum(1 for d in diffs if d > 0)
    n = sum(1 for d in diffs if d != 0)
    if n == 0:
        return 1.0
    return sum(math.comb(n, i) for i in range(pos, n + 1)) / 2.0**n
