"""Tests for checkpoint persistence (bit-exact round trips, format policing)
and the command-line pipeline."""

import csv
import json
import math
import os
import struct

import numpy as np
import pytest

from moelab import (
    DataSpec,
    ExperimentConfig,
    HeuristicSpec,
    ModelConfig,
    Rng,
    RunMetrics,
    Schedule,
    allocate_uniform,
    config_from_dict,
    config_to_dict,
    init_model,
    init_opt,
    load_checkpoint,
    run_two_phase,
    save_checkpoint,
    train_steps,
    upcycle,
)
from moelab.checkpoint import MAGIC
from moelab.cli import main, write_metrics_csv
from moelab.errors import FormatError

MINI_MODEL = ModelConfig(
    vocab=8, dim=8, ffn_dim=8, expert_dim=8, blocks=2, moe_layout=("dense", "moe"), experts=4, top_k=2, seq_len=8
)
MINI_DATA = DataSpec(vocab=8, markov_order=1, corpus_len=4000)


def _windows(batch: int, seed: int = 0) -> np.ndarray:
    return Rng(seed).integers(0, 8, size=batch * 10).reshape(batch, 10)


def _trained(steps: int = 8):
    model = init_model(MINI_MODEL, Rng(3))
    opt = init_opt(model)
    sched = Schedule(total_steps=steps, warmup_steps=2, peak_lr=1e-3, decay_fraction=0.25)
    train_steps(model, opt, lambda t: _windows(4, 50 + t), sched, 0, steps)
    return model, opt


def _mini_config_dict() -> dict:
    cfg = ExperimentConfig(
        model=MINI_MODEL,
        data=MINI_DATA,
        tau=30,
        cpt_fraction=1.0,
        warmup_steps=5,
        eval_every=20,
        probe_every=15,
        batch_size=4,
        eval_window_count=8,
    )
    return config_to_dict(cfg)


def _rewrite_header(path: str, mutate) -> None:
    with open(path, "rb") as f:
        raw = f.read()
    base = len(MAGIC) + 4
    (hlen,) = struct.unpack("<Q", raw[base : base + 8])
    header = json.loads(raw[base + 8 : base + 8 + hlen].decode())
    mutate(header)
    blob = json.dumps(header).encode()
    with open(path, "wb") as f:
        f.write(raw[:base])
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(raw[base + 8 + hlen :])


class TestRoundTrip:
    def test_model_opt_step_bitwise(self, tmp_path):
        model, opt = _trained()
        path = str(tmp_path / "a.bin")
        save_checkpoint(path, model, opt, step=8, extra={"note": "x"})
        m2, o2, header = load_checkpoint(path)
        assert header["step"] == 8 and header["extra"] == {"note": "x"}
        assert m2.kind == "moe" and m2.config == model.config
        for (na, pa), (_, pb) in zip(model.named_params(), m2.named_params()):
            assert (pa == pb).all(), na
        assert (m2.blocks[1].select_bias == model.blocks[1].select_bias).all()
        assert o2.t == opt.t and o2.beta1 == opt.beta1 and o2.beta2 == opt.beta2 and o2.eps == opt.eps
        for name in opt.m:
            assert (o2.m[name] == opt.m[name]).all()
            assert (o2.v[name] == opt.v[name]).all()

    def test_without_optimizer(self, tmp_path):
        model, _ = _trained()
        path = str(tmp_path / "b.bin")
        save_checkpoint(path, model)
        m2, o2, header = load_checkpoint(path)
        assert o2 is None and header["opt"] is None
        assert (m2.w_out == model.w_out).all()

    def test_replica_groups_survive(self, tmp_path):
        model, opt = _trained()
        up = upcycle(model, allocate_uniform(model, 2), HeuristicSpec(), Rng(1))
        path = str(tmp_path / "c.bin")
        save_checkpoint(path, up, None)
        m2, _, _ = load_checkpoint(path)
        assert m2.replica_groups == {1: [[0, 1], [2, 3], [4, 5], [6, 7]]}

    def test_dense_source_kind(self, tmp_path):
        model = init_model(MINI_MODEL, Rng(4), dense_source=True)
        path = str(tmp_path / "d.bin")
        save_checkpoint(path, model)
        m2, _, _ = load_checkpoint(path)
        assert m2.kind == "dense_source"
        assert m2.blocks[1].w1.shape == (8, 8)
        assert (m2.blocks[1].w1 == model.blocks[1].w1).all()

    def test_growth_commutes_with_persistence(self, tmp_path):
        model, opt = _trained()
        plan = allocate_uniform(model, 2)
        spec = HeuristicSpec()

        saved_src = str(tmp_path / "src.bin")
        save_checkpoint(saved_src, model, opt)
        loaded, _, _ = load_checkpoint(saved_src)
        grown_after_load = upcycle(loaded, plan, spec, Rng(42))

        grown_first = upcycle(model, plan, spec, Rng(42))
        saved_up = str(tmp_path / "up.bin")
        save_checkpoint(saved_up, grown_first, None)
        loaded_up, _, _ = load_checkpoint(saved_up)

        for (na, pa), (_, pb) in zip(grown_after_load.named_params(), loaded_up.named_params()):
            assert (pa == pb).all(), na
        assert (grown_after_load.blocks[1].select_bias == loaded_up.blocks[1].select_bias).all()

    def test_training_resumes_bitwise(self, tmp_path):
        stream = lambda t: _windows(4, 90 + t)
        sched = Schedule(total_steps=20, warmup_steps=2, peak_lr=1e-3, decay_fraction=0.2)

        straight = init_model(MINI_MODEL, Rng(6))
        opt_a = init_opt(straight)
        train_steps(straight, opt_a, stream, sched, 0, 20)

        half = init_model(MINI_MODEL, Rng(6))
        opt_b = init_opt(half)
        train_steps(half, opt_b, stream, sched, 0, 10)
        path = str(tmp_path / "mid.bin")
        save_checkpoint(path, half, opt_b, step=10)
        resumed, opt_c, header = load_checkpoint(path)
        train_steps(resumed, opt_c, stream, sched, header["step"], 20)

        for (na, pa), (_, pb) in zip(straight.named_params(), resumed.named_params()):
            assert (pa == pb).all(), na
        assert (straight.blocks[1].select_bias == resumed.blocks[1].select_bias).all()


class TestFormatPolicing:
    def _saved(self, tmp_path, with_opt: bool = True) -> str:
        model, opt = _trained()
        path = str(tmp_path / "x.bin")
        save_checkpoint(path, model, opt if with_opt else None)
        return path

    def test_bad_magic(self, tmp_path):
        path = self._saved(tmp_path)
        raw = bytearray(open(path, "rb").read())
        raw[0] ^= 0xFF
        open(path, "wb").write(bytes(raw))
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_bad_version(self, tmp_path):
        path = self._saved(tmp_path)
        raw = bytearray(open(path, "rb").read())
        raw[len(MAGIC) : len(MAGIC) + 4] = struct.pack("<I", 99)
        open(path, "wb").write(bytes(raw))
        with pytest.raises(FormatError):
            load_checkpoint(path)

    @pytest.mark.parametrize("keep", [3, 9, 40, 900])
    def test_truncation(self, tmp_path, keep):
        path = self._saved(tmp_path)
        raw = open(path, "rb").read()
        assert keep < len(raw)
        open(path, "wb").write(raw[:keep])
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_trailing_bytes(self, tmp_path):
        path = self._saved(tmp_path)
        with open(path, "ab") as f:
            f.write(b"\x00")
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_corrupt_header_json(self, tmp_path):
        path = self._saved(tmp_path)
        raw = bytearray(open(path, "rb").read())
        base = len(MAGIC) + 4 + 8
        raw[base : base + 2] = b"{{"
        open(path, "wb").write(bytes(raw))
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_shape_mismatch(self, tmp_path):
        path = self._saved(tmp_path, with_opt=False)

        def reshape(header):
            for entry in header["tensors"]:
                if entry[0] == "emb_prev":
                    entry[1] = [4, 16]  # same element count, wrong shape
        _rewrite_header(path, reshape)
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_unknown_kind(self, tmp_path):
        path = self._saved(tmp_path, with_opt=False)

        def rekind(header):
            header["kind"] = "quantum"
        _rewrite_header(path, rekind)
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_missing_tensor(self, tmp_path):
        path = self._saved(tmp_path, with_opt=False)
        raw = open(path, "rb").read()

        def drop_last(header):
            dropped = header["tensors"].pop()
            header["_dropped"] = int(np.prod(dropped[1]))
        # removing the manifest entry leaves its payload as trailing bytes
        _rewrite_header(path, drop_last)
        with pytest.raises(FormatError):
            load_checkpoint(path)


class TestMetricsCsv:
    def test_layout_and_cell_placement(self, tmp_path):
        m = RunMetrics(
            arm="upcycled",
            seed=7,
            train_loss=[3.0, 2.9, 2.8],
            lr=[0.1, 0.2, 0.3],
            load_ratio=[1.0, 1.1, 1.2],
            eval_points=[(2, 2.95)],
            divergence=[(3, 0.5)],
        )
        path = str(tmp_path / "m.csv")
        write_metrics_csv(path, [m], tau=2)
        rows = list(csv.reader(open(path)))
        assert rows[0] == [
            "step", "phase", "arm", "seed", "train_loss", "eval_loss", "lr", "max_load_ratio", "replica_divergence",
        ]
        assert rows[1] == ["1", "pretrain", "upcycled", "7", "3", "", "0.1", "1", ""]
        assert rows[2][1] == "pretrain" and rows[2][5] == "2.95"
        assert rows[3][1] == "cpt" and rows[3][8] == "0.5"
        assert len(rows) == 4


@pytest.fixture()
def cfg_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(_mini_config_dict()))
    return str(path)


def _stdout_json(capsys) -> dict:
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


class TestCliPipeline:
    def test_gen_data(self, tmp_path, cfg_file, capsys):
        out = str(tmp_path / "d")
        assert main(["gen-data", "--config", cfg_file, "--out", out]) == 0
        payload = _stdout_json(capsys)
        assert payload["corpus_len"] == 4000 and payload["vocab"] == 8
        blob = np.load(os.path.join(out, "corpus.npz"))
        assert blob["tokens"].shape == (4000,)

    def test_set_overrides(self, tmp_path, cfg_file, capsys):
        out = str(tmp_path / "d")
        rc = main([
            "gen-data", "--config", cfg_file, "--out", out,
            "--set", "data.corpus_len=600", "--set", "data.markov_order=2",
        ])
        assert rc == 0
        payload = _stdout_json(capsys)
        assert payload["corpus_len"] == 600 and payload["order"] == 2

    def test_pretrain_upcycle_cpt_chain_matches_in_process(self, tmp_path, cfg_file, capsys):
        d1, d2, d3 = (str(tmp_path / n) for n in ("p", "u", "c"))
        assert main(["pretrain", "--config", cfg_file, "--out", d1]) == 0
        step_payload = _stdout_json(capsys)
        assert step_payload["step"] == 30
        assert os.path.exists(os.path.join(d1, "ckpt_tau.bin"))
        assert os.path.exists(os.path.join(d1, "metrics.csv"))

        assert main(["upcycle", "--ckpt", os.path.join(d1, "ckpt_tau.bin"), "--out", d2]) == 0
        up_payload = _stdout_json(capsys)
        assert up_payload["experts"] == 8
        assert up_payload["plan"] == {"1": [2, 2, 2, 2]}
        grown, opt, header = load_checkpoint(os.path.join(d2, "ckpt_upcycled.bin"))
        assert grown.config.experts == 8 and opt is not None and header["step"] == 30

        assert main(["cpt", "--ckpt", os.path.join(d2, "ckpt_upcycled.bin"), "--out", d3]) == 0
        cpt_payload = _stdout_json(capsys)
        assert cpt_payload["step"] == 60

        cfg = config_from_dict(_mini_config_dict())
        _, metrics, _ = run_two_phase(cfg)
        assert cpt_payload["terminal_eval"] == metrics.terminal_eval

    def test_baseline(self, tmp_path, cfg_file, capsys):
        out = str(tmp_path / "b")
        assert main(["baseline", "--config", cfg_file, "--out", out, "--experts", "8"]) == 0
        payload = _stdout_json(capsys)
        assert payload["experts"] == 8 and math.isfinite(payload["terminal_eval"])
        model, opt, _ = load_checkpoint(os.path.join(out, "ckpt_final.bin"))
        assert model.config.experts == 8 and opt is None

    def test_compare_report(self, tmp_path, cfg_file, capsys):
        out = str(tmp_path / "cmp")
        assert main(["compare", "--config", cfg_file, "--out", out]) == 0
        report = json.load(open(os.path.join(out, "report.json")))
        t = report["terminal"]
        recomputed = (t["fixed_small"] - t["upcycled"]) / (t["fixed_small"] - t["fixed_big"])
        assert abs(report["eta"] - recomputed) < 1e-12
        assert report["plan"] == {"1": [2, 2, 2, 2]}
        assert report["cost"]["saving"] == 30 * 2.0
        for key in ("term1", "term2", "bound", "warm_init_gap"):
            assert key in report["bound"]

        rows = list(csv.reader(open(os.path.join(out, "metrics.csv"))))
        arms = {r[2] for r in rows[1:]}
        assert arms == {"fixed_small", "upcycled", "fixed_big"}
        phases = {r[1] for r in rows[1:]}
        assert phases == {"pretrain", "cpt"}

    def test_sweep_outputs(self, tmp_path, cfg_file, capsys):
        out = str(tmp_path / "sw")
        rc = main([
            "sweep", "--config", cfg_file, "--out", out,
            "--axis", "cpt_fraction", "--values", "0.5,1.0", "--seeds", "0",
        ])
        assert rc == 0
        rows = list(csv.reader(open(os.path.join(out, "sweep.csv"))))
        assert len(rows) == 3
        summary = json.load(open(os.path.join(out, "sweep_summary.json")))
        assert set(summary["values"]) == {"0.5", "1.0"}
        assert summary["values"]["1.0"]["n"] == 1

    def test_bound_passthrough(self, tmp_path, cfg_file, capsys):
        from moelab import BoundInputs, bound, term1, term2

        out = str(tmp_path / "bd")
        rc = main([
            "bound", "--config", cfg_file, "--out", out,
            "--lstar-small", "3.0", "--lstar-big", "2.9",
            "--dist-up-sq", "1.0", "--dist-rand-sq", "4.0",
        ])
        assert rc == 0
        payload = _stdout_json(capsys)
        cfg = ExperimentConfig(model=MINI_MODEL, data=MINI_DATA, tau=30, cpt_fraction=1.0, warmup_steps=5)
        inputs = BoundInputs(cfg.schedule(), 30, 3.0, 2.9, 1.0, 4.0)
        assert payload["term1"] == term1(inputs)
        assert payload["term2"] == term2(inputs)
        assert payload["bound"] == bound(inputs)

    def test_utility_plan_dump(self, tmp_path, cfg_file, capsys):
        d1 = str(tmp_path / "p")
        main(["pretrain", "--config", cfg_file, "--out", d1])
        capsys.readouterr()
        out = str(tmp_path / "ut")
        rc = main([
            "utility", "--ckpt", os.path.join(d1, "ckpt_tau.bin"), "--out", out,
            "--set", "strategy=grad_norm",
        ])
        assert rc == 0
        plan = json.load(open(os.path.join(out, "plan.json")))
        assert plan["strategy"] == "grad_norm"
        assert sum(plan["plan"]["1"]) == 8
        assert len(plan["scores"]["1"]) == 4


class TestCliExitCodes:
    def test_usage_errors(self, capsys):
        assert main(["warp-speed"]) == 1
        assert main(["upcycle"]) == 1  # missing required --ckpt
        assert main(["--help"]) == 0
        capsys.readouterr()

    def test_bad_config_file(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{nope")
        assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
        assert main(["gen-data", "--config", str(tmp_path / "ghost.json"), "--out", str(tmp_path / "o")]) == 1
        capsys.readouterr()

    def test_invalid_config_value(self, tmp_path, cfg_file, capsys):
        assert main(["gen-data", "--config", cfg_file, "--out", str(tmp_path / "o"), "--set", "m=1"]) == 1
        capsys.readouterr()

    def test_missing_checkpoint(self, tmp_path, capsys):
        assert main(["cpt", "--ckpt", str(tmp_path / "ghost.bin"), "--out", str(tmp_path / "o")]) == 1
        capsys.readouterr()

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numeric_failure(self, tmp_path, cfg_file, capsys):
        out = str(tmp_path / "num")
        rc = main([
            "pretrain", "--config", cfg_file, "--out", out,
            "--set", "peak_lr=1e150", "--set", "tau=10",
        ])
        assert rc == 2
        capsys.readouterr()
