"""Shared test helpers.

Gradient checks compare the analytic backward pass (which treats top-k
selection and relu masks as locally constant) against central differences.
That comparison is only meaningful at interior points: if any token's k-th
and (k+1)-th selection scores, or any relu preactivation, sit within the
finite-difference step of a boundary, the difference quotient straddles a
kink. margin_ok() measures those margins so tests can scan deterministically
for a seed whose evaluation point is safely interior.
"""

import numpy as np

from moelab import Rng, forward
from moelab.model import MoEBlock


def _min_margins(model, windows) -> tuple[float, float]:
    _, cache = forward(model, windows)
    sel_margin = np.inf
    act_margin = np.inf
    for bi, blk in enumerate(model.blocks):
        bc = cache["blocks"][bi]
        normed = bc["normed"]
        if isinstance(blk, MoEBlock):
            raw = np.empty((normed.shape[0], blk.experts))
            for e in range(blk.experts):
                raw[:, e] = normed @ np.ascontiguousarray(blk.router[:, e])
            sel = raw + blk.select_bias[None, :]
            k = model.config.top_k
            if blk.experts > k:
                part = -np.sort(-sel, axis=1)
                sel_margin = min(sel_margin, float((part[:, k - 1] - part[:, k]).min()))
            for e in range(blk.experts):
                entry = bc["per_expert"][e]
                if entry is None:
                    continue
                rows = entry[0]
                pre = normed[rows] @ blk.w1[e]
                act_margin = min(act_margin, float(np.abs(pre).min()))
        else:
            pre = normed @ blk.w1
            act_margin = min(act_margin, float(np.abs(pre).min()))
    return sel_margin, act_margin


def margin_ok(model, windows, floor: float = 1e-3) -> bool:
    sel, act = _min_margins(model, windows)
    return sel > floor and act > floor


def windows_for(cfg, batch: int, seed: int) -> np.ndarray:
    return Rng(seed).integers(0, cfg.vocab, size=batch * (cfg.seq_len + 2)).reshape(batch, cfg.seq_len + 2)


def interior_batch(cfg, model_factory, batch: int, base_seed: int, tries: int = 200):
    """Deterministically scan data seeds until the evaluation point is
    interior; returns (model, windows). The scan itself is reproducible."""
    model = model_factory()
    for k in range(tries):
        w = windows_for(cfg, batch, base_seed + 7919 * k)
        if margin_ok(model, w):
            return model, w
    raise AssertionError("no interior evaluation point found; widen the scan")
