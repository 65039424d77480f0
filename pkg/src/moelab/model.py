"""FFN-only residual language model with optional mixture-of-experts blocks.

The stack is: token-pair embedding -> B x (RMS-norm -> FFN -> residual add)
-> output projection -> softmax cross-entropy, predicting the next token at
every position. Each position embeds its (previous, current) token pair, so a
training window carries seq_len + 2 tokens and yields seq_len predictions.

All arithmetic is float64 and the backward pass is written out by hand:
top-K expert selection is treated as a constant during differentiation, the
gate softmax is differentiated, and the selection bias takes no gradient at
all (it is balancing state, updated by sign steps outside the optimizer).

Bitwise-reproducibility constraints honored throughout:
- router scores are computed column-by-column, so a model whose router has
  extra columns produces bit-identical scores for the shared columns;
- expert inputs are row-gathers, which numpy matmuls reduce identically
  whether the rows arrive as a subset or the full batch;
- ties in top-K selection break toward the lower expert slot.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import InvalidInputError, NumericError

RMS_EPS = 1e-8

# init scales, chosen so an untrained model scores ~ln(vocab): the residual
# stream stays O(1) per coordinate and output logits start with std ~0.3
EMB_SIGMA = 0.5
W2_SCALE = 0.3
OUT_SIGMA = 0.05


@dataclass
class ModelConfig:
    vocab: int = 32
    dim: int = 32
    ffn_dim: int = 64
    expert_dim: int = 32
    blocks: int = 6
    moe_layout: tuple[str, ...] = ("dense", "moe", "dense", "moe", "dense", "moe")
    experts: int = 8
    top_k: int = 2
    seq_len: int = 32

    def validate(self) -> "ModelConfig":
        if self.vocab < 1:
            raise InvalidInputError("vocab must be >= 1")
        for name in ("dim", "ffn_dim", "expert_dim", "blocks", "seq_len"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be >= 1")
        if len(self.moe_layout) != self.blocks:
            raise InvalidInputError("moe_layout length must equal blocks")
        for kind in self.moe_layout:
            if kind not in ("dense", "moe"):
                raise InvalidInputError(f"unknown block kind {kind!r}")
        if self.experts < 1:
            raise InvalidInputError("experts must be >= 1")
        if not 1 <= self.top_k <= self.experts:
            raise InvalidInputError("top_k must be in [1, experts]")
        return self

    def replace(self, **kw) -> "ModelConfig":
        d = self.__dict__.copy()
        d.update(kw)
        return ModelConfig(**d).validate()

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["moe_layout"] = list(self.moe_layout)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "moe_layout" in d:
            d["moe_layout"] = tuple(d["moe_layout"])
        return cls(**d).validate()


@dataclass
class Schedule:
    """Warmup-stable-decay learning-rate schedule.

    lr ramps linearly 0 -> peak over warmup_steps, holds at peak, then decays
    linearly to 0 over the final decay_fraction of total_steps. lr_at(0) is 0
    by construction (a zero-lr Adam step leaves parameters untouched).
    """

    total_steps: int
    warmup_steps: int
    peak_lr: float
    decay_fraction: float = 0.10

    def __post_init__(self):
        if self.total_steps < 1:
            raise InvalidInputError("total_steps must be >= 1")
        if self.warmup_steps < 0:
            raise InvalidInputError("warmup_steps must be >= 0")
        if not self.peak_lr > 0:
            raise InvalidInputError("peak_lr must be > 0")
        if not 0.0 <= self.decay_fraction <= 1.0:
            raise InvalidInputError("decay_fraction must be in [0, 1]")
        if self.warmup_steps + self.decay_steps > self.total_steps:
            raise InvalidInputError("warmup plus decay exceeds total_steps")

    @property
    def decay_steps(self) -> int:
        return int(round(self.decay_fraction * self.total_steps))

    def lr_at(self, t: int) -> float:
        if not 0 <= t < self.total_steps:
            raise InvalidInputError(f"step {t} outside [0, {self.total_steps})")
        if t < self.warmup_steps:
            return self.peak_lr * t / self.warmup_steps
        decay_start = self.total_steps - self.decay_steps
        if t >= decay_start:
            return self.peak_lr * (self.total_steps - t) / self.decay_steps
        return self.peak_lr


class DenseBlock:
    def __init__(self, gain: np.ndarray, w1: np.ndarray, w2: np.ndarray):
        self.gain = gain
        self.w1 = w1
        self.w2 = w2


class MoEBlock:
    def __init__(
        self,
        gain: np.ndarray,
        router: np.ndarray,
        select_bias: np.ndarray,
        w1: np.ndarray,
        w2: np.ndarray,
    ):
        self.gain = gain
        self.router = router  # (dim, experts)
        self.select_bias = select_bias  # (experts,), selection-only state
        self.w1 = w1  # (experts, dim, expert_dim)
        self.w2 = w2  # (experts, expert_dim, dim)

    @property
    def experts(self) -> int:
        return self.router.shape[1]


class Model:
    """Parameter container. kind is 'moe' for the standard layout or
    'dense_source' for the all-dense twin used as a conversion source."""

    def __init__(self, config: ModelConfig, kind: str, emb_prev, emb_cur, blocks, w_out):
        self.config = config
        self.kind = kind
        self.emb_prev = emb_prev
        self.emb_cur = emb_cur
        self.blocks = blocks
        self.w_out = w_out
        # slot groups per moe block index, set by the upcycling operator:
        # groups[i] lists the slot ids descended from source expert i
        self.replica_groups: dict[int, list[list[int]]] | None = None

    def named_params(self):
        """Trainable tensors in fixed order. select_bias is deliberately
        absent: it takes no gradient and is not optimized."""
        yield "emb_prev", self.emb_prev
        yield "emb_cur", self.emb_cur
        for i, blk in enumerate(self.blocks):
            yield f"b{i}.gain", blk.gain
            if isinstance(blk, MoEBlock):
                yield f"b{i}.router", blk.router
                yield f"b{i}.w1", blk.w1
                yield f"b{i}.w2", blk.w2
            else:
                yield f"b{i}.w1", blk.w1
                yield f"b{i}.w2", blk.w2
        yield "w_out", self.w_out

    def param(self, name: str) -> np.ndarray:
        for n, p in self.named_params():
            if n == name:
                return p
        raise InvalidInputError(f"no parameter named {name!r}")

    def set_param(self, name: str, value: np.ndarray) -> None:
        if name == "emb_prev":
            self.emb_prev = value
        elif name == "emb_cur":
            self.emb_cur = value
        elif name == "w_out":
            self.w_out = value
        else:
            idx, attr = name.split(".", 1)
            setattr(self.blocks[int(idx[1:])], attr, value)

    def moe_blocks(self):
        return [(i, b) for i, b in enumerate(self.blocks) if isinstance(b, MoEBlock)]

    def copy(self) -> "Model":
        blocks = []
        for blk in self.blocks:
            if isinstance(blk, MoEBlock):
                blocks.append(
                    MoEBlock(
                        blk.gain.copy(),
                        blk.router.copy(),
                        blk.select_bias.copy(),
                        blk.w1.copy(),
                        blk.w2.copy(),
                    )
                )
            else:
                blocks.append(DenseBlock(blk.gain.copy(), blk.w1.copy(), blk.w2.copy()))
        m = Model(self.config, self.kind, self.emb_prev.copy(), self.emb_cur.copy(), blocks, self.w_out.copy())
        if self.replica_groups is not None:
            m.replica_groups = {k: [list(g) for g in v] for k, v in self.replica_groups.items()}
        return m

    def total_params(self) -> int:
        return sum(p.size for _, p in self.named_params())


def init_model(cfg: ModelConfig, rng, dense_source: bool = False) -> Model:
    """Fresh model. Draw order is fixed and part of the determinism contract:
    emb_prev, emb_cur, then per block (router, experts in slot order, or
    w1/w2), then w_out. Gains start at one, selection biases at zero."""
    cfg.validate()
    d, V = cfg.dim, cfg.vocab
    emb_prev = rng.normal(0.0, EMB_SIGMA, size=V * d).reshape(V, d)
    emb_cur = rng.normal(0.0, EMB_SIGMA, size=V * d).reshape(V, d)
    blocks = []
    for kind in cfg.moe_layout:
        gain = np.ones(d)
        if kind == "moe" and not dense_source:
            fe = cfg.expert_dim
            router = rng.normal(0.0, 1.0 / np.sqrt(d), size=d * cfg.experts).reshape(d, cfg.experts)
            w1 = np.empty((cfg.experts, d, fe))
            w2 = np.empty((cfg.experts, fe, d))
            for e in range(cfg.experts):
                w1[e] = rng.normal(0.0, np.sqrt(2.0 / d), size=d * fe).reshape(d, fe)
                w2[e] = rng.normal(0.0, W2_SCALE / np.sqrt(fe), size=fe * d).reshape(fe, d)
            blocks.append(MoEBlock(gain, router, np.zeros(cfg.experts), w1, w2))
        else:
            # a dense_source model replaces its moe slots with dense blocks of
            # expert width, so conversion back to experts is shape-exact
            f = cfg.expert_dim if (kind == "moe" and dense_source) else cfg.ffn_dim
            w1 = rng.normal(0.0, np.sqrt(2.0 / d), size=d * f).reshape(d, f)
            w2 = rng.normal(0.0, W2_SCALE / np.sqrt(f), size=f * d).reshape(f, d)
            blocks.append(DenseBlock(gain, w1, w2))
    w_out = rng.normal(0.0, OUT_SIGMA, size=d * V).reshape(d, V)
    return Model(cfg, "dense_source" if dense_source else "moe", emb_prev, emb_cur, blocks, w_out)


def route_topk(raw: np.ndarray, select_bias: np.ndarray, k: int):
    """Select top-k experts per row by raw score + selection bias; gates are a
    softmax over the selected RAW scores only (the bias steers selection but
    never the mixture weights). Score ties break to the lower slot id.

    Returns (idx (N,k) int64, gates (N,k) float64).
    """
    n, experts = raw.shape
    if not 1 <= k <= experts:
        raise InvalidInputError("k must be in [1, experts]")
    sel = raw + select_bias[None, :]
    # stable argsort of the negated scores puts equal scores in slot order
    idx = np.argsort(-sel, axis=1, kind="stable")[:, :k]
    chosen = np.take_along_axis(raw, idx, axis=1)
    m = chosen.max(axis=1, keepdims=True)
    ex = np.exp(chosen - m)
    gates = ex / ex.sum(axis=1, keepdims=True)
    return idx, gates


def balance_update(block: MoEBlock, token_counts: np.ndarray, u: float) -> np.ndarray:
    """Nudge selection biases toward even load: underloaded experts move up by
    u, overloaded move down by u, exactly-average loads stay put."""
    counts = np.asarray(token_counts, dtype=np.float64)
    if counts.shape != (block.experts,):
        raise InvalidInputError("token_counts must have one entry per expert")
    block.select_bias += u * np.sign(counts.mean() - counts)
    return block.select_bias


def _rmsnorm_fwd(x: np.ndarray, gain: np.ndarray):
    r = np.sqrt((x * x).mean(axis=1, keepdims=True) + RMS_EPS)
    return (x / r) * gain[None, :], r


def _rmsnorm_bwd(dn, x, r, gain):
    w = dn * gain[None, :]
    dgain = (dn * (x / r)).sum(axis=0)
    dim = x.shape[1]
    dx = w / r - x * ((w * x).sum(axis=1, keepdims=True) / (dim * r**3))
    return dx, dgain


def forward(model: Model, windows: np.ndarray, want_cache: bool = True):
    """Run the model over integer windows (batch, seq_len + 2).

    Returns (loss, cache); cache is None when want_cache is False. The cache
    also carries per-moe-layer token counts under cache['loads'].
    """
    cfg = model.config
    windows = np.asarray(windows)
    if windows.ndim != 2 or windows.shape[0] < 1:
        raise InvalidInputError("windows must be a non-empty 2-d integer array")
    if windows.shape[1] != cfg.seq_len + 2:
        raise InvalidInputError(f"window length must be seq_len + 2 = {cfg.seq_len + 2}")
    if not np.issubdtype(windows.dtype, np.integer):
        raise InvalidInputError("windows must be integers")
    if windows.min() < 0 or windows.max() >= cfg.vocab:
        raise InvalidInputError("token id outside [0, vocab)")

    L = cfg.seq_len
    prev = windows[:, 0:L].ravel()
    cur = windows[:, 1 : L + 1].ravel()
    tgt = windows[:, 2 : L + 2].ravel()
    h = model.emb_prev[prev] + model.emb_cur[cur]

    cache: dict = {"prev": prev, "cur": cur, "tgt": tgt, "blocks": [], "loads": {}}
    for bi, blk in enumerate(model.blocks):
        x_in = h
        normed, r = _rmsnorm_fwd(x_in, blk.gain)
        if isinstance(blk, MoEBlock):
            E = blk.experts
            raw = np.empty((normed.shape[0], E))
            for e in range(E):
                # column-wise matvec: bitwise stable under router widening
                raw[:, e] = normed @ np.ascontiguousarray(blk.router[:, e])
            idx, gates = route_topk(raw, blk.select_bias, cfg.top_k)
            out = np.zeros_like(normed)
            per_expert = []
            for e in range(E):
                rows, slot = np.nonzero(idx == e)
                if rows.size == 0:
                    per_expert.append(None)
                    continue
                xe = normed[rows]
                he = np.maximum(xe @ blk.w1[e], 0.0)
                oe = he @ blk.w2[e]
                out[rows] += gates[rows, slot][:, None] * oe
                per_expert.append((rows, slot, he, oe))
            cache["loads"][bi] = np.bincount(idx.ravel(), minlength=E).astype(np.int64)
            blk_cache = {"x": x_in, "r": r, "normed": normed, "idx": idx, "gates": gates, "per_expert": per_expert}
        else:
            pre = normed @ blk.w1
            act = np.maximum(pre, 0.0)
            out = act @ blk.w2
            blk_cache = {"x": x_in, "r": r, "normed": normed, "act": act}
        h = x_in + out
        if want_cache:
            cache["blocks"].append(blk_cache)

    logits = h @ model.w_out
    zmax = logits.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(logits - zmax).sum(axis=1))
    n = tgt.size
    loss = float((lse - logits[np.arange(n), tgt]).mean())
    if not np.isfinite(loss):
        raise NumericError("non-finite training loss")
    if not want_cache:
        return loss, None
    cache["h_final"] = h
    cache["logits"] = logits
    cache["lse"] = lse
    return loss, cache


def backward(model: Model, cache: dict) -> dict[str, np.ndarray]:
    """Exact gradients of the mean cross-entropy for every trainable tensor.

    Expert selection is piecewise constant so it contributes nothing; the
    gate softmax is differentiated; select_bias has gradient zero by
    definition and gets no entry. Experts that served no token keep zero
    gradient blocks.
    """
    cfg = model.config
    tgt = cache["tgt"]
    n = tgt.size
    logits, lse = cache["logits"], cache["lse"]
    p = np.exp(logits - lse[:, None])
    p[np.arange(n), tgt] -= 1.0
    dlogits = p / n

    grads = {name: np.zeros_like(param) for name, param in model.named_params()}
    grads["w_out"] += cache["h_final"].T @ dlogits
    dh = dlogits @ model.w_out.T

    for bi in range(len(model.blocks) - 1, -1, -1):
        blk = model.blocks[bi]
        bc = cache["blocks"][bi]
        dout = dh  # gradient wrt the block's ffn output (residual branch)
        if isinstance(blk, MoEBlock):
            idx, gates = bc["idx"], bc["gates"]
            dnormed = np.zeros_like(bc["normed"])
            dgate = np.zeros_like(gates)
            for e in range(blk.experts):
                entry = bc["per_expert"][e]
                if entry is None:
                    continue
                rows, slot, he, oe = entry
                dgate[rows, slot] = np.einsum("nd,nd->n", dout[rows], oe)
                g_out = gates[rows, slot][:, None] * dout[rows]
                grads[f"b{bi}.w2"][e] += he.T @ g_out
                da = g_out @ blk.w2[e].T
                dpre = da * (he > 0.0)
                grads[f"b{bi}.w1"][e] += bc["normed"][rows].T @ dpre
                dnormed[rows] += dpre @ blk.w1[e].T
            # softmax backward over the selected raw scores
            dot = (gates * dgate).sum(axis=1, keepdims=True)
            draw_sel = gates * (dgate - dot)
            for e in range(blk.experts):
                entry = bc["per_expert"][e]
                if entry is None:
                    continue
                rows, slot, _, _ = entry
                ds = draw_sel[rows, slot]
                grads[f"b{bi}.router"][:, e] += bc["normed"][rows].T @ ds
                dnormed[rows] += ds[:, None] * blk.router[:, e][None, :]
        else:
            act = bc["act"]
            grads[f"b{bi}.w2"] += act.T @ dout
            da = dout @ blk.w2.T
            dpre = da * (act > 0.0)
            grads[f"b{bi}.w1"] += bc["normed"].T @ dpre
            dnormed = dpre @ blk.w1.T
        dx, dgain = _rmsnorm_bwd(dnormed, bc["x"], bc["r"], blk.gain)
        grads[f"b{bi}.gain"] += dgain
        dh = dh + dx  # residual pass-through plus the norm path

    np.add.at(grads["emb_prev"], cache["prev"], dh)
    np.add.at(grads["emb_cur"], cache["cur"], dh)
    return grads


def eval_loss(model: Model, windows: np.ndarray) -> float:
    """Mean next-token loss over a fixed window set, no caching."""
    loss, _ = forward(model, windows, want_cache=False)
    return loss


@dataclass
class OptState:
    """Adam state. v doubles as the diagonal curvature source for
    curvature-normalized utility scoring."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8


def init_opt(model: Model, beta1: float = 0.9, beta2: float = 0.95, eps: float = 1e-8) -> OptState:
    m = {name: np.zeros_like(p) for name, p in model.named_params()}
    v = {name: np.zeros_like(p) for name, p in model.named_params()}
    return OptState(m=m, v=v, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(model: Model, grads: dict[str, np.ndarray], opt: OptState, lr: float) -> None:
    """Bias-corrected Adam. lr=0 still updates moments but leaves parameters
    bit-identical."""
    opt.t += 1
    c1 = 1.0 - opt.beta1**opt.t
    c2 = 1.0 - opt.beta2**opt.t
    for name, p in model.named_params():
        g = grads[name]
        m = opt.m[name]
        v = opt.v[name]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)


@dataclass
class TrainStats:
    losses: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    load_ratios: list = field(default_factory=list)
    loads_total: dict = field(default_factory=dict)  # block idx -> summed counts
    tokens: int = 0


def load_ratio(loads: dict[int, np.ndarray]) -> float:
    """Max over moe layers of max/min expert load, with empty experts floored
    at one token to keep the ratio finite."""
    worst = 1.0
    for counts in loads.values():
        worst = max(worst, counts.max() / max(counts.min(), 1))
    return float(worst)


def train_steps(
    model: Model,
    opt: OptState,
    stream: Callable[[int], np.ndarray],
    schedule: Schedule,
    t0: int,
    t1: int,
    u_balance: float = 1e-3,
    on_step: Callable[[int, Model], None] | None = None,
) -> TrainStats:
    """Train for global steps [t0, t1): forward, backward, Adam at lr_at(t),
    then the balance update from this batch's expert loads."""
    if not 0 <= t0 <= t1 <= schedule.total_steps:
        raise InvalidInputError("step range outside the schedule")
    stats = TrainStats()
    for t in range(t0, t1):
        batch = stream(t)
        loss, cache = forward(model, batch)
        grads = backward(model, cache)
        lr = schedule.lr_at(t)
        adam_step(model, grads, opt, lr)
        if u_balance != 0.0:
            for bi, blk in model.moe_blocks():
                balance_update(blk, cache["loads"][bi], u_balance)
        stats.losses.append(loss)
        stats.lrs.append(lr)
        stats.load_ratios.append(load_ratio(cache["loads"]))
        for bi, counts in cache["loads"].items():
            if bi in stats.loads_total:
                stats.loads_total[bi] += counts
            else:
                stats.loads_total[bi] = counts.copy()
        stats.tokens += batch.shape[0] * model.config.seq_len
        if on_step is not None:
            on_step(t, model)
    return stats


def flops_per_token(model: Model) -> dict[str, int]:
    """Matmul FLOP count per token (2 per multiply-add), split into the active
    compute path and the routing-score term. Router scoring scales with the
    expert count and is excluded from 'active' so the figure is invariant
    under expert replication at fixed top-k; norm/residual/embedding-add costs
    are omitted (shape-independent of expert count anyway).
    """
    cfg = model.config
    d = cfg.dim
    active = 2 * d * cfg.vocab  # output projection
    router = 0
    expert_params = 0
    active_params = model.emb_prev.size + model.emb_cur.size + model.w_out.size
    for blk in model.blocks:
        active_params += blk.gain.size
        if isinstance(blk, MoEBlock):
            fe = blk.w1.shape[2]
            active += cfg.top_k * (2 * d * fe + 2 * fe * d)
            router += 2 * d * blk.experts
            expert_params += blk.w1.size + blk.w2.size
            active_params += cfg.top_k * (blk.w1[0].size + blk.w2[0].size)
        else:
            f = blk.w1.shape[1]
            active += 2 * d * f + 2 * f * d
            active_params += blk.w1.size + blk.w2.size
    return {
        "active": active,
        "router": router,
        "total_params": model.total_params(),
        "active_params": active_params,
        "expert_params": expert_params,
    }
