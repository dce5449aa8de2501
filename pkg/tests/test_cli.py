"""End-to-end tests for the command-line interface."""

import json

import numpy as np
import pytest

from chainboost import cli
from chainboost.ensemble import load_manifest


def run_cli(argv, capsys):
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    """One tiny trained chain shared by infer/bench tests."""
    root = tmp_path_factory.mktemp("run")
    cfg = {
        "task": {"kind": "copy", "vocab": 12, "length": 3, "n_samples": 24, "seed": 1},
        "model": {
            "n_layers": 2, "d_model": 16, "n_heads": 2, "d_ff": 32,
            "vocab": 12, "max_steps": 10, "fusion_period": 2, "adapter_rank": 4,
        },
        "n_successors": 1,
        "train": {"learning_rate": 0.05, "epochs": 2, "batch_size": 8, "stage2_epochs": 2},
        "seeds": [1],
        "holdout_fraction": 0.25,
    }
    cfg_path = root / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    code = cli.main(["train", "--config", str(cfg_path), "--out", str(root / "out")])
    assert code == 0
    prompts = root / "prompts.txt"
    prompts.write_text("1 2 3\n4 5\n")
    return root / "out" / "seed1" / "manifest.json", prompts


class TestGen:
    def test_writes_dataset_deterministically(self, tmp_path, capsys):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        for p in (a, b):
            code, out, _ = run_cli(
                ["gen", "--kind", "modsum", "--vocab", "16", "--length", "6",
                 "--n-samples", "10", "--seed", "7", "--out", str(p)],
                capsys,
            )
            assert code == 0
            assert "10 samples" in out
        assert a.read_bytes() == b.read_bytes()

    def test_gold_rederivable(self, tmp_path, capsys):
        from chainboost.tasks import TaskSpec, derive_gold, load_dataset

        p = tmp_path / "ds.jsonl"
        code, _, _ = run_cli(
            ["gen", "--kind", "copy", "--vocab", "12", "--length", "4",
             "--n-samples", "6", "--seed", "2", "--out", str(p)],
            capsys,
        )
        assert code == 0
        spec = TaskSpec("copy", vocab=12, length=4, n_samples=6, seed=2)
        ds = load_dataset(p)
        for i in range(len(ds)):
            assert np.array_equal(derive_gold(spec, ds.tokens[i]), ds.gold[i])


class TestTrainArtifacts:
    def test_manifest_roundtrip(self, trained_run):
        manifest, _ = trained_run
        ens, meta = load_manifest(manifest)
        assert len(ens.models) == 2
        assert (manifest.parent / "metrics.jsonl").exists()

    def test_checkpoints_reload_bitwise(self, trained_run):
        manifest, _ = trained_run
        a, _ = load_manifest(manifest)
        b, _ = load_manifest(manifest)
        for ma, mb in zip(a.models, b.models):
            for k in ma.params:
                assert np.array_equal(ma.params[k], mb.params[k])


class TestInfer:
    def test_sequential_and_pipelined_agree(self, trained_run, capsys):
        manifest, prompts = trained_run
        _, out_s, _ = run_cli(
            ["infer", "--manifest", str(manifest), "--prompts", str(prompts),
             "--mode", "sequential", "--max-tokens", "5"],
            capsys,
        )
        _, out_p, _ = run_cli(
            ["infer", "--manifest", str(manifest), "--prompts", str(prompts),
             "--mode", "pipelined", "--max-tokens", "5"],
            capsys,
        )
        toks_s = [l for l in out_s.splitlines() if not l.split()[0].endswith("_s")]
        toks_p = [l for l in out_p.splitlines() if not l.split()[0].endswith("_s")]
        assert toks_s == toks_p

    def test_timing_block_present(self, trained_run, capsys):
        manifest, prompts = trained_run
        _, out, _ = run_cli(
            ["infer", "--manifest", str(manifest), "--prompts", str(prompts),
             "--mode", "pipelined", "--max-tokens", "4"],
            capsys,
        )
        for field in ("end_to_end_s", "per_token_latency_s", "blocked_s", "state_passing_s"):
            assert field in out

    def test_empty_prompt_file(self, trained_run, tmp_path, capsys):
        manifest, _ = trained_run
        empty = tmp_path / "empty.txt"
        empty.write_text("")
        code, _, _ = run_cli(
            ["infer", "--manifest", str(manifest), "--prompts", str(empty)], capsys
        )
        assert code == 0


class TestBench:
    def test_reports_both_modes_and_csv(self, trained_run, tmp_path, capsys):
        manifest, prompts = trained_run
        csv_path = tmp_path / "bench.csv"
        code, out, _ = run_cli(
            ["bench", "--manifest", str(manifest), "--prompts", str(prompts),
             "--reps", "3", "--max-tokens", "4", "--csv", str(csv_path)],
            capsys,
        )
        assert code == 0
        assert "sequential" in out and "pipelined" in out and "speedup" in out
        assert csv_path.exists()


class TestSched:
    def test_table_and_exact_cell(self, capsys):
        code, out, _ = run_cli(["sched", "k=2..2", "l=4..4", "g=1..2"], capsys)
        assert code == 0
        assert "1.6000" in out  # k=2, l=4, g=2
        assert "1.0000" in out  # g=1 row: no pipelining, no speedup

    def test_malformed_range_exits_2(self, capsys):
        code, _, err = run_cli(["sched", "k=banana"], capsys)
        assert code == 2


class TestVerify:
    def test_sched_suite_passes(self, capsys):
        code, out, _ = run_cli(["verify", "--selector", "sched"], capsys)
        assert code == 0
        assert "PASS" in out

    def test_mse_suite_passes(self, capsys):
        code, out, _ = run_cli(["verify", "--selector", "mse"], capsys)
        assert code == 0
        assert "PASS" in out
