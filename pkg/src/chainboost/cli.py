"""Command-line entry points.

Subcommands: gen (synthetic datasets), train (chain training per seed),
infer (sequential or pipelined decoding), bench (latency comparison),
verify (theory/scheduler probe suites), sched (speedup tables).

Exit codes: 0 success, 1 assertion or training failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import statistics
import sys
from pathlib import Path

import numpy as np

from . import ensemble as ens_mod
from . import schedlab, tasks, theoryprobe
from .ensemble import ErrorTokenTrace
from .model import ModelSpec, TransformerModel
from .numkit import softmax
from .pipeline import decode_pipelined, decode_sequential
from .training import (
    DEFAULT_ALPHA,
    DEFAULT_BETA,
    TrainConfig,
    chain_eval,
    loss_logit_grad,
    total_loss,
    train_chain,
)

DEFAULT_SEEDS = [1, 2, 3]


def _load_config(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def _merged(config: dict, args, fields: dict) -> dict:
    """Config-file values overridden by any explicitly set flags."""
    out = dict(config)
    for flag, key in fields.items():
        val = getattr(args, flag, None)
        if val is not None:
            out[key] = val
    return out


def _task_from_dict(d: dict) -> tasks.TaskSpec:
    return tasks.TaskSpec(
        kind=d["kind"],
        vocab=d.get("vocab", 32),
        length=d.get("length", 8),
        n_samples=d.get("n_samples", 200),
        seed=d.get("seed", 0),
        modulus=d.get("modulus", 7),
    )


def _model_from_dict(d: dict, vocab: int, seed: int) -> ModelSpec:
    return ModelSpec(
        n_layers=d.get("n_layers", 2),
        d_model=d.get("d_model", 32),
        n_heads=d.get("n_heads", 2),
        d_ff=d.get("d_ff", 64),
        vocab=vocab,
        max_steps=d.get("max_steps", 32),
        fusion_period=d.get("fusion_period", 2),
        adapter_rank=d.get("adapter_rank", 4),
        seed=seed,
    )


def cmd_gen(args) -> int:
    spec = tasks.TaskSpec(
        kind=args.kind,
        vocab=args.vocab,
        length=args.length,
        n_samples=args.n_samples,
        seed=args.seed if args.seed is not None else 0,
        modulus=args.modulus,
    )
    ds = tasks.generate(spec)
    out = args.out or f"{args.kind}.jsonl"
    tasks.save_dataset(out, ds)
    print(f"wrote {ds.tokens.shape[0]} samples to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    seeds = args.seeds or cfg.get("seeds", DEFAULT_SEEDS)
    out_dir = Path(args.out or cfg.get("out", "runs"))
    out_dir.mkdir(parents=True, exist_ok=True)

    if "dataset" in cfg:
        ds_full = tasks.load_dataset(cfg["dataset"])
    else:
        ds_full = tasks.generate(_task_from_dict(cfg["task"]))
    vocab = int(cfg.get("task", {}).get("vocab", ds_full.tokens.max() + 1))
    holdout = cfg.get("holdout_fraction", 0.25)

    tc = cfg.get("train", {})
    results = []
    for sd in seeds:
        train_cfg = TrainConfig(
            alpha=tc.get("alpha", DEFAULT_ALPHA),
            beta=tc.get("beta", DEFAULT_BETA),
            learning_rate=tc.get("learning_rate", 0.1),
            epochs=tc.get("epochs", 60),
            batch_size=tc.get("batch_size", 32),
            seed=sd,
            precision=args.precision or tc.get("precision", "f64"),
            stage2_epochs=tc.get("stage2_epochs", tc.get("epochs", 60)),
            stage2_learning_rate=tc.get("stage2_learning_rate", tc.get("learning_rate", 0.1)),
            successor_init=tc.get("successor_init", "base_copy"),
        )
        n_succ = cfg.get("n_successors", 1)
        mdl = cfg.get("model", {})
        specs = [
            _model_from_dict(
                {**mdl, "adapter_rank": 0 if i == 0 else mdl.get("adapter_rank", 4)},
                vocab,
                seed=sd * 100 + i,
            )
            for i in range(n_succ + 1)
        ]
        espec = ens_mod.EnsembleSpec(
            models=specs,
            lambdas=cfg.get("lambdas", [ens_mod.DEFAULT_LAMBDA] * n_succ),
            top_k=cfg.get("top_k", ens_mod.DEFAULT_TOP_K),
        )
        ensemble = ens_mod.Ensemble(espec)
        train_ds, hold_ds = ds_full.split(holdout, seed=sd)
        try:
            metrics = train_chain(ensemble, train_ds, train_cfg)
        except Exception as exc:  # noqa: BLE001 - surfaced as exit 1
            print(f"training failed for seed {sd}: {exc}", file=sys.stderr)
            return 1
        seed_dir = out_dir / f"seed{sd}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        ckpts = []
        for i, model in enumerate(ensemble.models):
            p = seed_dir / f"model{i}.npz"
            model.save(p)
            ckpts.append(p.name)  # manifest paths resolve against its directory
        ens_mod.save_manifest(seed_dir / "manifest.json", ckpts, espec)
        with open(seed_dir / "metrics.jsonl", "w") as fh:
            for rec in metrics:
                fh.write(json.dumps(rec) + "\n")
        ev = chain_eval(ensemble, hold_ds)
        results.append(ev)
        print(
            f"seed {sd}: base_acc={ev['base_acc']:.4f} fused_acc={ev['fused_acc']:.4f}"
        )
    mean_base = statistics.mean(r["base_acc"] for r in results)
    mean_fused = statistics.mean(r["fused_acc"] for r in results)
    print(f"mean: base_acc={mean_base:.4f} fused_acc={mean_fused:.4f}")
    return 0


def _read_prompts(path) -> list[list[int]]:
    prompts = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line:
            prompts.append([int(x) for x in line.split()])
    return prompts


def cmd_infer(args) -> int:
    try:
        ensemble, _ = ens_mod.load_manifest(args.manifest)
    except ValueError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    prompts = _read_prompts(args.prompts)
    if not prompts:
        return 0
    for prompt in prompts:
        if args.mode == "sequential":
            import time

            t0 = time.perf_counter()
            toks, _ = decode_sequential(ensemble, prompt, args.max_tokens)
            wall = time.perf_counter() - t0
            print(" ".join(map(str, toks)))
            print(f"end_to_end_s        {wall:.6f}")
            print(f"per_token_latency_s {wall / max(1, len(toks)):.6f}")
            print("blocked_s           0.000000")
            print("state_passing_s     0.000000")
        else:
            toks, _, report = decode_pipelined(ensemble, prompt, args.max_tokens)
            print(" ".join(map(str, toks)))
            print(report.format())
    return 0


def cmd_bench(args) -> int:
    if args.reps < 3:
        print("need at least 3 repetitions", file=sys.stderr)
        return 2
    try:
        ensemble, _ = ens_mod.load_manifest(args.manifest)
    except ValueError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    prompts = _read_prompts(args.prompts)
    if not prompts:
        return 0
    import time

    rows = []
    for mode in ("sequential", "pipelined"):
        e2e, per_tok = [], []
        for _ in range(args.reps):
            t0 = time.perf_counter()
            n_toks = 0
            for prompt in prompts:
                if mode == "sequential":
                    toks, _ = decode_sequential(ensemble, prompt, args.max_tokens)
                else:
                    toks, _, _ = decode_pipelined(ensemble, prompt, args.max_tokens)
                n_toks += len(toks)
            wall = time.perf_counter() - t0
            e2e.append(wall)
            per_tok.append(wall / max(1, n_toks))
        qs = statistics.quantiles(e2e, n=4)
        rows.append(
            {
                "mode": mode,
                "median_e2e_s": statistics.median(e2e),
                "iqr_e2e_s": qs[2] - qs[0],
                "median_per_token_s": statistics.median(per_tok),
            }
        )
    speedup = rows[0]["median_e2e_s"] / rows[1]["median_e2e_s"]
    for r in rows:
        print(
            f"{r['mode']:10s} median={r['median_e2e_s']:.6f}s "
            f"iqr={r['iqr_e2e_s']:.6f}s per_token={r['median_per_token_s']:.6f}s"
        )
    print(f"speedup_sequential_over_pipelined {speedup:.4f}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(
                fh, fieldnames=["mode", "median_e2e_s", "iqr_e2e_s", "median_per_token_s"]
            )
            w.writeheader()
            w.writerows(rows)
    return 0


def _verify_grad(seed: int) -> bool:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(1000):
        v = int(rng.integers(3, 12))
        z = rng.normal(0.0, 2.0, v)
        gold = int(rng.integers(0, v))
        choices = [i for i in range(v) if i != gold]
        err = int(rng.choice(choices)) if rng.random() < 0.7 else None
        alpha = float(rng.uniform(0.1, 1.0))
        beta = float(rng.uniform(0.05, 0.5))
        g = loss_logit_grad(softmax(z), gold, err, alpha, beta)
        trace = ErrorTokenTrace([err])

        def central(e):
            out = np.zeros(v)
            for j in range(v):
                zp, zm = z.copy(), z.copy()
                zp[j] += e
                zm[j] -= e
                out[j] = (
                    total_loss([zp], [gold], trace, alpha, beta)
                    - total_loss([zm], [gold], trace, alpha, beta)
                ) / (2 * e)
            return out

        # Richardson-extrapolated central differences: O(eps^4) truncation
        # while eps stays large enough to dodge cancellation noise
        fd = (4 * central(5e-5) - central(1e-4)) / 3
        rel = np.abs(g - fd) / np.maximum(np.abs(fd), 1e-8)
        worst = max(worst, float(rel.max()))
    print(f"grad: worst relative error {worst:.3e}")
    return worst < 1e-5


def _verify_remainder(seed: int) -> bool:
    rng = np.random.default_rng(seed)
    ok = True
    for v in (4, 16, 64):
        for _ in range(10):
            z = rng.uniform(-3, 3, v)
            slope, c = theoryprobe.remainder_probe(
                z, scales=np.logspace(-3, -1, 7), directions=16, seed=seed
            )
            if not (1.9 <= slope <= 2.1):
                ok = False
            print(f"remainder: V={v} slope={slope:.4f} C={c:.4f}")
    return ok


def _verify_mse(seed: int) -> bool:
    rng = np.random.default_rng(seed)
    n, v = 200, 8
    zp = rng.normal(0.0, 1.5, (n, v))
    gold = rng.integers(0, v, n)
    # corrector that knows the answer: pushes logits toward gold
    zn = np.zeros((n, v))
    zn[np.arange(n), gold] = 4.0
    rep = theoryprobe.mse_sweep(zp, zn, gold, list(np.logspace(-3, np.log10(0.5), 12)))
    ok = rep.mean_eg > 0 and rep.negative_range is not None
    slope_res = np.polyfit(
        np.log(rep.lambdas), np.log(np.abs(rep.residuals()) + 1e-300), 1
    )[0]
    print(f"mse: mean_eg={rep.mean_eg:+.4e} range={rep.negative_range} residual_slope={slope_res:.2f}")
    return ok and slope_res >= 1.9


def _verify_descent(seed: int) -> bool:
    spec = tasks.TaskSpec("copy", vocab=12, length=4, n_samples=16, seed=seed)
    ds = tasks.generate(spec)
    model = TransformerModel(
        ModelSpec(
            n_layers=2, d_model=16, n_heads=2, d_ff=32, vocab=12,
            max_steps=16, adapter_rank=0, seed=seed,
        )
    )
    rep = theoryprobe.descent_probe(model, ds.tokens, ds.gold, alpha=0.9, steps=50, seed=seed)
    print(f"descent: violations={rep.violations} eta={rep.eta_used:.3e} l_hat={rep.smoothness:.2f}")
    return rep.precondition_ok and rep.violations == 0


def _verify_sched(seed: int) -> bool:
    bad = 0
    for k in range(1, 7):
        for l in range(1, 13):
            for g in range(1, 5):
                prob = schedlab.SchedProblem(k=k, l=l, g=g, c=1, delta=0)
                closed = schedlab.t_parallel_closed(prob)
                sim, _ = schedlab.simulate_schedule(prob)
                if closed != sim:
                    bad += 1
    print(f"sched: {6 * 12 * 4} grid points, {bad} mismatches")
    return bad == 0


def cmd_verify(args) -> int:
    suites = {
        "grad": _verify_grad,
        "remainder": _verify_remainder,
        "mse": _verify_mse,
        "descent": _verify_descent,
        "sched": _verify_sched,
    }
    names = list(suites) if args.selector == "all" else [args.selector]
    seed = args.seed if args.seed is not None else 1
    failed = []
    for name in names:
        ok = suites[name](seed)
        print(f"{name}: {'PASS' if ok else 'FAIL'}")
        if not ok:
            failed.append(name)
    return 1 if failed else 0


def _parse_range(text: str) -> range:
    lo, _, hi = text.partition("..")
    if not hi:
        hi = lo
    return range(int(lo), int(hi) + 1)


def cmd_sched(args) -> int:
    ranges = {}
    for item in args.ranges:
        key, _, val = item.partition("=")
        if key not in ("k", "l", "g") or not val:
            print(f"malformed range {item!r}; expected e.g. k=1..6", file=sys.stderr)
            return 2
        try:
            ranges[key] = _parse_range(val)
        except ValueError:
            print(f"malformed range {item!r}", file=sys.stderr)
            return 2
    table = schedlab.speedup_table(
        ranges.get("k", range(1, 7)),
        ranges.get("l", range(1, 13)),
        ranges.get("g", range(1, 5)),
        c=args.c,
        delta=args.delta,
    )
    print(schedlab.format_table(table))
    if args.csv:
        Path(args.csv).write_text(schedlab.table_to_csv(table))
    return 0


def build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(prog="chainboost", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default=None)
    common.add_argument("--precision", choices=["f64", "f32"], default=None)
    sub = top.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--kind", choices=tasks.TASK_KINDS, required=True)
    p.add_argument("--vocab", type=int, default=32)
    p.add_argument("--length", type=int, default=8)
    p.add_argument("--n-samples", type=int, default=200)
    p.add_argument("--modulus", type=int, default=7)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", parents=[common], help="train a chain per seed")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common], help="decode prompts")
    p.add_argument("--manifest", required=True)
    p.add_argument("--prompts", required=True)
    p.add_argument("--mode", choices=["sequential", "pipelined"], default="sequential")
    p.add_argument("--max-tokens", type=int, default=16)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("bench", parents=[common], help="latency comparison")
    p.add_argument("--manifest", required=True)
    p.add_argument("--prompts", required=True)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--max-tokens", type=int, default=16)
    p.add_argument("--csv", default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("verify", parents=[common], help="run probe suites")
    p.add_argument(
        "--selector",
        choices=["grad", "remainder", "mse", "descent", "sched", "all"],
        default="all",
    )
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("sched", parents=[common], help="speedup tables")
    p.add_argument("ranges", nargs="*", help="e.g. k=1..6 l=1..12 g=1..4")
    p.add_argument("--c", type=int, default=1)
    p.add_argument("--delta", type=int, default=0)
    p.add_argument("--csv", default=None)
    p.set_defaults(func=cmd_sched)
    return top


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
