"""Command line for the training lab.

Every subcommand takes --config (JSON file), repeated --set dotted.key=value
overrides, --seed, and --out (output directory). Exit codes: 0 on success,
1 on invalid configuration or usage, 2 on numeric failure (non-finite loss,
degenerate efficiency denominator).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys

import numpy as np

from .bound import BoundInputs, bound as bound_fn, lr_sum, term1, term2
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import FormatError, InvalidInputError, InvalidStateError, NumericError
from .harness import (
    ExperimentConfig,
    SWEEP_AXES,
    config_from_dict,
    config_to_dict,
    continue_phase,
    pretrain_phase,
    run_fixed,
    run_sparse_arm,
    run_two_phase,
    sweep as run_sweep,
    three_way,
)
from .model import flops_per_token
from .numerics import Rng
from .upcycle import allocate_uniform, expand_opt_state, upcycle as upcycle_op, utility_scores


def _deep_merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def _parse_set(item: str) -> tuple[list[str], object]:
    if "=" not in item:
        raise InvalidInputError(f"--set expects key=value, got {item!r}")
    key, text = item.split("=", 1)
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text  # bare strings are fine unquoted
    return key.split("."), value


def _assign(d: dict, path: list[str], value) -> None:
    cur = d
    for part in path[:-1]:
        nxt = cur.get(part)
        if not isinstance(nxt, dict):
            nxt = {}
            cur[part] = nxt
        cur = nxt
    cur[path[-1]] = value


def build_config(args) -> ExperimentConfig:
    d = config_to_dict(ExperimentConfig())
    if args.config:
        with open(args.config) as f:
            try:
                user = json.load(f)
            except json.JSONDecodeError as e:
                raise InvalidInputError(f"config file is not valid JSON: {e}") from e
        if not isinstance(user, dict):
            raise InvalidInputError("config file must hold a JSON object")
        d = _deep_merge(d, user)
    for item in args.set or []:
        path, value = _parse_set(item)
        _assign(d, path, value)
    if args.seed is not None:
        d["seed"] = args.seed
    return config_from_dict(d)


def _outdir(args) -> str:
    os.makedirs(args.out, exist_ok=True)
    return args.out


def write_metrics_csv(path: str, runs, tau: int) -> None:
    """One row per training step per arm; evaluation and probe values land on
    the row whose step count they were measured at, other cells stay empty."""
    cols = ["step", "phase", "arm", "seed", "train_loss", "eval_loss", "lr", "max_load_ratio", "replica_divergence"]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for metrics in runs:
            evals = {s: v for s, v in metrics.eval_points}
            divs = {s: v for s, v in metrics.divergence}
            for i, loss in enumerate(metrics.train_loss):
                step = i + 1
                w.writerow(
                    [
                        step,
                        "pretrain" if step <= tau else "cpt",
                        metrics.arm,
                        metrics.seed,
                        f"{loss:.10g}",
                        f"{evals[step]:.10g}" if step in evals else "",
                        f"{metrics.lr[i]:.10g}",
                        f"{metrics.load_ratio[i]:.6g}",
                        f"{divs[step]:.10g}" if step in divs else "",
                    ]
                )


def _report(res) -> dict:
    return {
        "eta": res.eta,
        "tau": res.cfg.tau,
        "total_steps": res.cfg.resolved_total(),
        "terminal": {
            "fixed_small": res.small.terminal_eval,
            "upcycled": res.up.terminal_eval,
            "fixed_big": res.big.terminal_eval,
        },
        "warm_init": {
            "loss_before_tau": res.up.loss_before_tau,
            "init_loss_tau": res.up.init_loss_tau,
            "gap": res.bound_report.get("warm_init_gap"),
        },
        "cost": dataclasses.asdict(res.cost_report),
        "bound": res.bound_report,
        "plan": {str(k): list(v) for k, v in res.plan.counts.items()},
        "strategy": res.cfg.strategy,
    }


def _save_run_ckpt(path: str, model, opt, cfg: ExperimentConfig, step: int, phase: str) -> None:
    save_checkpoint(
        path,
        model,
        opt,
        step=step,
        extra={"phase": phase, "experiment": config_to_dict(cfg)},
    )


def _cfg_from_ckpt(header: dict, args) -> ExperimentConfig:
    d = header.get("extra", {}).get("experiment")
    if d is None:
        raise InvalidInputError("checkpoint carries no experiment config; pass --config")
    if args.config:
        with open(args.config) as f:
            d = _deep_merge(d, json.load(f))
    for item in args.set or []:
        path, value = _parse_set(item)
        _assign(d, path, value)
    if args.seed is not None:
        d["seed"] = args.seed
    return config_from_dict(d)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    cfg = build_config(args)
    out = _outdir(args)
    corpus = cfg.make_corpus()
    np.savez(
        os.path.join(out, "corpus.npz"),
        tokens=corpus.tokens,
        transitions=corpus.transitions,
        bounds=np.array([*corpus.pretrain, *corpus.cpt, *corpus.holdout]),
    )
    print(
        json.dumps(
            {
                "corpus_len": int(corpus.tokens.size),
                "vocab": corpus.spec.vocab,
                "order": corpus.spec.markov_order,
                "mean_row_entropy": corpus.mean_row_entropy(),
                "splits": {"pretrain": corpus.pretrain, "cpt": corpus.cpt, "holdout": corpus.holdout},
            }
        )
    )
    return 0


def cmd_pretrain(args) -> int:
    cfg = build_config(args)
    out = _outdir(args)
    corpus = cfg.make_corpus()
    phase1 = pretrain_phase(cfg, corpus)
    _save_run_ckpt(os.path.join(out, "ckpt_tau.bin"), phase1.model, phase1.opt, cfg, cfg.tau, "pretrain")
    write_metrics_csv(os.path.join(out, "metrics.csv"), [phase1.metrics], cfg.tau)
    print(json.dumps({"step": cfg.tau, "eval_loss": phase1.loss_before_tau}))
    return 0


def cmd_upcycle(args) -> int:
    model, opt, header = load_checkpoint(args.ckpt)
    cfg = _cfg_from_ckpt(header, args)
    out = _outdir(args)
    if opt is None:
        raise InvalidInputError("checkpoint has no optimizer state")
    if cfg.strategy == "uniform":
        plan = allocate_uniform(model, cfg.m)
    else:
        from .harness import _utility_plan

        plan = _utility_plan(cfg, cfg.make_corpus(), model, opt)
    grown = upcycle_op(model, plan, cfg.heuristic, Rng(cfg.operator_seed()), delta=cfg.delta)
    opt2 = expand_opt_state(opt, grown)
    _save_run_ckpt(os.path.join(out, "ckpt_upcycled.bin"), grown, opt2, cfg, int(header["step"]), "upcycled")
    print(
        json.dumps(
            {
                "experts": grown.config.experts,
                "plan": {str(k): list(v) for k, v in plan.counts.items()},
                "strategy": cfg.strategy,
                "flops": flops_per_token(grown),
            }
        )
    )
    return 0


def cmd_cpt(args) -> int:
    model, opt, header = load_checkpoint(args.ckpt)
    cfg = _cfg_from_ckpt(header, args)
    out = _outdir(args)
    if opt is None:
        raise InvalidInputError("checkpoint has no optimizer state")
    corpus = cfg.make_corpus()
    t0 = int(header["step"])
    metrics = continue_phase(cfg, model, opt, corpus, t0=t0, arm="upcycled")
    total = cfg.resolved_total()
    _save_run_ckpt(os.path.join(out, "ckpt_final.bin"), model, opt, cfg, total, "cpt")
    write_metrics_csv(os.path.join(out, "metrics.csv"), [metrics], cfg.tau)
    print(json.dumps({"step": total, "terminal_eval": metrics.terminal_eval}))
    return 0


def cmd_baseline(args) -> int:
    cfg = build_config(args)
    out = _outdir(args)
    experts = args.experts if args.experts is not None else cfg.model.experts
    corpus = cfg.make_corpus()
    model, metrics = run_fixed(cfg, experts, corpus)
    opt_note = {"step": cfg.resolved_total(), "experts": experts, "terminal_eval": metrics.terminal_eval}
    save_checkpoint(os.path.join(out, "ckpt_final.bin"), model, None, step=cfg.resolved_total(), extra={"phase": metrics.arm, "experiment": config_to_dict(cfg)})
    write_metrics_csv(os.path.join(out, "metrics.csv"), [metrics], cfg.tau)
    print(json.dumps(opt_note))
    return 0


def cmd_compare(args) -> int:
    cfg = build_config(args)
    out = _outdir(args)
    res = three_way(cfg)
    write_metrics_csv(os.path.join(out, "metrics.csv"), [res.small, res.up, res.big], cfg.tau)
    report = _report(res)
    with open(os.path.join(out, "report.json"), "w") as f:
        json.dump(report, f, indent=2)
    print(json.dumps({"eta": res.eta, "terminal": report["terminal"]}))
    return 0


def cmd_sweep(args) -> int:
    cfg = build_config(args)
    out = _outdir(args)
    values: list = []
    for piece in args.values.split(","):
        piece = piece.strip()
        if args.axis in ("strategy", "heuristic"):
            values.append(piece)
        elif args.axis == "tau":
            values.append(int(piece))
        else:
            values.append(float(piece))
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = run_sweep(cfg, args.axis, values, seeds)
    path = os.path.join(out, "sweep.csv")
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(
            ["axis", "value", "seed", "eta", "terminal_small", "terminal_up", "terminal_big", "init_loss_tau", "loss_before_tau", "terminal_sparse"]
        )
        for r in rows:
            w.writerow(
                [r.axis, r.value, r.seed, f"{r.eta:.10g}", f"{r.terminal_small:.10g}", f"{r.terminal_up:.10g}", f"{r.terminal_big:.10g}", f"{r.init_loss_tau:.10g}", f"{r.loss_before_tau:.10g}", "" if r.terminal_sparse is None else f"{r.terminal_sparse:.10g}"]
            )
    by_value: dict = {}
    for r in rows:
        by_value.setdefault(str(r.value), []).append(r.eta)
    summary = {str(v): {"mean_eta": float(np.mean(es)), "std_eta": float(np.std(es)), "n": len(es)} for v, es in by_value.items()}
    with open(os.path.join(out, "sweep_summary.json"), "w") as f:
        json.dump({"axis": args.axis, "values": summary}, f, indent=2)
    print(json.dumps({"axis": args.axis, "rows": len(rows), "summary": summary}))
    return 0


def cmd_bound(args) -> int:
    cfg = build_config(args)
    sched = cfg.schedule()
    inputs = BoundInputs(
        schedule=sched,
        tau=cfg.tau,
        lstar_small=args.lstar_small,
        lstar_big=args.lstar_big,
        dist_up_sq=args.dist_up_sq,
        dist_rand_sq=args.dist_rand_sq,
    )
    report = {
        "term1": term1(inputs),
        "term2": term2(inputs),
        "bound": bound_fn(inputs),
        "lr_sum_pre_tau": lr_sum(sched, 0, cfg.tau),
        "lr_sum_total": lr_sum(sched, 0, sched.total_steps),
    }
    out = _outdir(args)
    with open(os.path.join(out, "bound.json"), "w") as f:
        json.dump(report, f, indent=2)
    print(json.dumps(report))
    return 0


def cmd_utility(args) -> int:
    model, opt, header = load_checkpoint(args.ckpt)
    cfg = _cfg_from_ckpt(header, args)
    out = _outdir(args)
    if cfg.strategy == "uniform":
        plan = allocate_uniform(model, cfg.m)
        scores_json = None
    else:
        if opt is None:
            raise InvalidInputError("checkpoint has no optimizer state")
        from .harness import accumulate_utility_grad
        from .upcycle import allocate_utility

        acc = accumulate_utility_grad(cfg, cfg.make_corpus(), model)
        sc = utility_scores(model, acc, opt, cfg.strategy)
        plan = allocate_utility(model, sc, cfg.m)
        scores_json = {str(k): [float(x) for x in v] for k, v in sc.per_layer.items()}
    payload = {
        "strategy": cfg.strategy,
        "plan": {str(k): list(v) for k, v in plan.counts.items()},
        "scores": scores_json,
    }
    with open(os.path.join(out, "plan.json"), "w") as f:
        json.dump(payload, f, indent=2)
    print(json.dumps(payload))
    return 0


# ---------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override, repeatable")
    common.add_argument("--seed", type=int, help="root seed override")
    common.add_argument("--out", default="moelab_out", help="output directory")

    p = argparse.ArgumentParser(prog="moelab", description="mixture-of-experts capacity-growth lab")
    sub = p.add_subparsers(dest="cmd", required=True)

    sub.add_parser("gen-data", parents=[common], help="sample a corpus and write it out").set_defaults(fn=cmd_gen_data)
    sub.add_parser("pretrain", parents=[common], help="train the small model to tau and checkpoint").set_defaults(fn=cmd_pretrain)

    up = sub.add_parser("upcycle", parents=[common], help="grow a pretrained checkpoint")
    up.add_argument("--ckpt", required=True)
    up.set_defaults(fn=cmd_upcycle)

    cpt = sub.add_parser("cpt", parents=[common], help="continue training a grown checkpoint to the end")
    cpt.add_argument("--ckpt", required=True)
    cpt.set_defaults(fn=cmd_cpt)

    base = sub.add_parser("baseline", parents=[common], help="fixed-size run over the full budget")
    base.add_argument("--experts", type=int, help="expert count (default: config's small size)")
    base.set_defaults(fn=cmd_baseline)

    sub.add_parser("compare", parents=[common], help="run all three arms and report efficiency").set_defaults(fn=cmd_compare)

    sw = sub.add_parser("sweep", parents=[common], help="three-way protocol across one axis")
    sw.add_argument("--axis", required=True, choices=SWEEP_AXES)
    sw.add_argument("--values", required=True, help="comma-separated axis values")
    sw.add_argument("--seeds", default="0", help="comma-separated seeds")
    sw.set_defaults(fn=cmd_sweep)

    bd = sub.add_parser("bound", parents=[common], help="evaluate the quality-gap decomposition")
    bd.add_argument("--lstar-small", type=float, required=True)
    bd.add_argument("--lstar-big", type=float, required=True)
    bd.add_argument("--dist-up-sq", type=float, required=True)
    bd.add_argument("--dist-rand-sq", type=float, required=True)
    bd.set_defaults(fn=cmd_bound)

    ut = sub.add_parser("utility", parents=[common], help="score experts and print a replication plan")
    ut.add_argument("--ckpt", required=True)
    ut.set_defaults(fn=cmd_utility)
    return p


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as e:
        # argparse wants exit code 2 for usage errors; that slot is reserved
        # for numeric failures here, so usage problems map to 1
        return 0 if e.code == 0 else 1
    try:
        return args.fn(args)
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 2
    except (InvalidInputError, InvalidStateError, FormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
