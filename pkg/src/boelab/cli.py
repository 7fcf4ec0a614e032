"""``boelab`` command line: train, compare, verify, bench.

Exit codes: 0 success, 1 usage or configuration error, 2 verification
failure, 3 I/O or checkpoint error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .bench import bench_backward, bench_model, linear_fit, write_rows
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config, stream, sub_seed
from .exceptions import AuditError, BoeLabError, CheckpointError, ConfigError, ContractError
from .model import Denoiser
from .oracle import (aqa_fidelity, collect_probes, nfe_audit, ordering_check, sample_states, theorem_check,
                     write_report)
from .sampler import BoEConfig, GreedyConfig, boe_decode, greedy_decode
from .tasks import constraint_checks, generate, pivot_layout, write_manifest
from .training import prompted_cross_entropy, train

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("boelab")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _seed(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _rho(text: str) -> float:
    v = float(text)
    if not 0 < v <= 1:
        raise argparse.ArgumentTypeError(f"rho must lie in (0, 1], got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="boelab", description="Masked-diffusion decoding experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, text in [("train", "train a denoiser and write a checkpoint"),
                       ("compare", "decode the eval set with every configured sampler"),
                       ("verify", "run the oracle suites against a checkpoint"),
                       ("bench", "time the surrogate backward over active-set sizes")]:
        s = sub.add_parser(name, help=text)
        s.add_argument("--config", required=True, type=Path, help="INI experiment file")
        s.add_argument("--seed", type=_seed, help="override run.seed")
        s.add_argument("--out", type=Path, default=Path("runs"), help="output directory (default: runs)")
        s.add_argument("--workers", type=_positive, help="override run.workers")
        s.add_argument("--rho", type=_rho, help="override the candidate fraction of steering samplers")
        s.add_argument("--aqa", choices=("on", "off"), help="override row-detached attention in steering samplers")
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "verify":
            s.add_argument("--probes", type=_positive, help="override verify.probes")
    return p


# -- shared helpers --------------------------------------------------------------------


def _write_csv(path: Path, header, rows) -> Path:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _checkpoint_path(cfg: ExperimentConfig, out: Path) -> Path:
    p = Path(cfg.run.checkpoint)
    return p if p.is_absolute() else out / p


def _load_model(cfg: ExperimentConfig, out: Path) -> Denoiser:
    model = load_checkpoint(_checkpoint_path(cfg, out))
    c = model.config
    if (c.vocab_size, c.seq_len) != (cfg.model.vocab_size, cfg.model.seq_len):
        raise ContractError(f"checkpoint has vocab_size={c.vocab_size}, seq_len={c.seq_len}; config has "
                            f"vocab_size={cfg.model.vocab_size}, seq_len={cfg.model.seq_len}")
    return model


def _eval_set(cfg: ExperimentConfig, replicate: int):
    return generate(cfg.task.spec, cfg.task.n_eval, seed=sub_seed(cfg.run.seed, "eval", replicate))


# -- train -----------------------------------------------------------------------------


def cmd_train(cfg: ExperimentConfig, out: Path) -> int:
    seed = cfg.run.seed
    data = generate(cfg.task.spec, cfg.task.n_train, seed=sub_seed(seed, "data"))
    init = Denoiser.initialize(cfg.model, sub_seed(seed, "init"))
    start = time.perf_counter()

    def progress(epoch, loss):
        log.info("epoch %d loss %.5f", epoch + 1, loss)

    model, curve = train(init, data.tokens, cfg.schedule, cfg.train, stream(seed, "train"), callback=progress)
    elapsed = time.perf_counter() - start
    save_checkpoint(model, _checkpoint_path(cfg, out))
    _write_csv(out / "loss_curve.csv", ["epoch", "loss"], [[k + 1, _fmt(v)] for k, v in enumerate(curve)])
    held = _eval_set(cfg, 0)
    metrics = {"final_loss": curve[-1], "prompted_ce": prompted_cross_entropy(model, held.tokens, held.prompt_mask),
               "epochs": len(curve), "n_train": len(data)}
    (out / "train_metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    write_manifest(data, out / "train_data.json")
    _write_csv(out / "train_timings.csv", ["command", "seconds"], [["train", f"{elapsed:.3f}"]])
    print(f"trained {len(curve)} epochs: final loss {curve[-1]:.4f}, prompted CE {metrics['prompted_ce']:.4f}")
    return EXIT_OK


# -- compare ---------------------------------------------------------------------------

RESULT_COLUMNS = ("sampler", "replicate", "seed", "n", "exact_match", "constraint_satisfaction", "nfe_forward",
                  "nfe_backward", "pivot_step_mean")


def _decode_block(args):
    """Decode prompts ``lo:hi`` of one replicate; top-level so worker processes can run it."""
    model, config, prompts, lo, hi, decode_seed = args
    results = []
    for k in range(lo, hi):
        rng = np.random.default_rng([decode_seed, k])
        start = time.perf_counter_ns()
        if isinstance(config, BoEConfig):
            x, trace = boe_decode(model, prompts[k], config, rng)
        else:
            x, trace = greedy_decode(model, prompts[k], config, rng)
        results.append((k, x, trace, (time.perf_counter_ns() - start) / 1e6))
    return results


def _decode_all(model, config, prompts, decode_seed: int, workers: int):
    n = len(prompts)
    if workers <= 1 or n < 2:
        return _decode_block((model, config, prompts, 0, n, decode_seed))
    edges = np.linspace(0, n, min(workers, n) + 1).astype(int)
    jobs = [(model, config, prompts, int(a), int(b), decode_seed) for a, b in zip(edges[:-1], edges[1:])]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(_decode_block, jobs))
    return sorted((r for part in parts for r in part), key=lambda r: r[0])


def cmd_compare(cfg: ExperimentConfig, out: Path) -> int:
    model = _load_model(cfg, out)
    if not cfg.samplers:
        raise ConfigError("no samplers configured", path=cfg.source)
    spec = cfg.task.spec
    pivot = pivot_layout(spec).pivot_index if spec.kind == "pivot_binding" else None
    rows, timing_rows = [], []
    failures = 0
    with (out / "traces.jsonl").open("w", encoding="utf-8") as traces:
        for r in range(cfg.run.replicates):
            ev = _eval_set(cfg, r)
            prompts = ev.prompts(model.mask_id)
            decode_seed = sub_seed(cfg.run.seed, "decode", r)
            budgets = set()
            for name, config in cfg.samplers:
                results = _decode_all(model, config, prompts, decode_seed, cfg.run.workers)
                seqs = np.stack([x for _, x, _, _ in results])
                exact, partial = constraint_checks(seqs, spec)
                fwd, bwd, steps, ms = [], [], [], []
                for k, _, trace, dt in results:
                    try:
                        audit = nfe_audit(trace)
                    except AuditError as exc:
                        log.error("%s replicate %d example %d: %s", name, r, k, exc)
                        failures += 1
                        continue
                    fwd.append(audit["nfe_forward"])
                    bwd.append(audit["nfe_backward"])
                    budgets.add(sum(len(s["written"]) for s in trace.steps))
                    if pivot is not None:
                        steps.append(trace.unmask_step(pivot))
                    ms.append(dt)
                    extra = {"sampler": name, "replicate": r, "example": k}
                    traces.write(trace.to_jsonl(extra))
                rows.append([name, r, decode_seed, len(results), _fmt(exact.mean()), _fmt(partial.mean()),
                             _fmt(np.mean(fwd) if fwd else 0.0), _fmt(np.mean(bwd) if bwd else 0.0),
                             _fmt(np.mean(steps)) if steps else ""])
                timing_rows.append([name, r, f"{np.median(ms):.4f}" if ms else "", f"{np.mean(ms):.4f}" if ms else ""])
                log.info("%s replicate %d: exact %.3f", name, r, exact.mean())
            if len(budgets) > 1:
                log.error("replicate %d: samplers wrote different numbers of positions %s", r, sorted(budgets))
                failures += 1
    _write_csv(out / "results.csv", RESULT_COLUMNS, rows)
    _write_csv(out / "compare_timings.csv", ["sampler", "replicate", "median_ms_per_decode", "mean_ms_per_decode"],
               timing_rows)
    for row in rows:
        print(f"{row[0]:>12} rep {row[1]}: exact {float(row[4]):.3f}  fwd {float(row[6]):.1f}  "
              f"bwd {float(row[7]):.1f}" + (f"  pivot step {float(row[8]):.2f}" if row[8] else ""))
    return EXIT_VERIFY if failures else EXIT_OK


# -- verify ----------------------------------------------------------------------------


def cmd_verify(cfg: ExperimentConfig, out: Path) -> int:
    model = _load_model(cfg, out)
    v = cfg.verify
    prompts = _eval_set(cfg, 0).prompts(model.mask_id)
    probes = collect_probes(model, prompts, v.probes, stream(cfg.run.seed, "probe"), safety=v.safety,
                            aqa_rho=v.aqa_rho)
    report = theorem_check(probes, v.tol)
    write_report(report, out / "probes.jsonl", out / "probes.csv")
    pairs = ordering_check(probes)
    pair_fail = sum(not p.ok for p in pairs)

    # row-detached gradients with every masked row active must equal dense ones bitwise
    states = sample_states(model, prompts, v.states, stream(cfg.run.seed, "aqa"))
    aqa_bad = 0
    for tokens, t, T in states:
        masked = np.flatnonzero(tokens == model.mask_id)
        fid = aqa_fidelity(model, tokens, masked, model.predict_proba(tokens, t=t / T), t, T)
        aqa_bad += not fid["bitwise_equal"]

    audit_bad = 0
    boe = next((c for _, c in cfg.samplers if isinstance(c, BoEConfig)), BoEConfig(rho=v.aqa_rho))
    n_audit = min(len(prompts), 20)
    for k in range(n_audit):
        rng = stream(cfg.run.seed, "audit", k)
        for trace in (greedy_decode(model, prompts[k], _greedy_default(cfg), rng)[1],
                      boe_decode(model, prompts[k], boe, rng)[1]):
            try:
                nfe_audit(trace)
            except AuditError as exc:
                log.error("audit example %d: %s", k, exc)
                audit_bad += 1
    summary = {**report.summary(), "pairs": len(pairs), "pair_failures": pair_fail, "aqa_states": len(states),
               "aqa_full_mask_mismatches": aqa_bad, "audited_traces": 2 * n_audit, "audit_failures": audit_bad}
    (out / "verify.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    ok = report.pass_rate >= 0.99 and pair_fail == 0 and aqa_bad == 0 and audit_bad == 0
    print(f"bound pass rate {report.pass_rate:.4f} over {len(probes)} probes "
          f"({report.n_flagged_refine} curvature refinements flagged)")
    print(f"ordering pairs {len(pairs)}, failures {pair_fail}")
    print(f"full-mask AQA mismatches {aqa_bad}/{len(states)}; NFE audit failures {audit_bad}/{2 * n_audit}")
    print("verify:", "PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_VERIFY


def _greedy_default(cfg: ExperimentConfig):
    return next((c for _, c in cfg.samplers if isinstance(c, GreedyConfig)), GreedyConfig())


# -- bench -----------------------------------------------------------------------------


def cmd_bench(cfg: ExperimentConfig, out: Path) -> int:
    b = cfg.bench
    model = bench_model(b.seq_len, b.vocab_size, d_model=b.d_model, n_layers=b.n_layers, n_heads=b.n_heads,
                        d_hidden=b.d_hidden, seed=sub_seed(cfg.run.seed, "bench"))
    rows = bench_backward(model, reps=b.reps, warmup=b.warmup, seed=sub_seed(cfg.run.seed, "bench-active"))
    write_rows(rows, out / "scaling.csv")
    sizes = [r.active for r in rows]
    _, _, r2_visits = linear_fit(sizes, [r.node_visits for r in rows])
    slope, _, r2_time = linear_fit(sizes, [r.median_ms for r in rows])
    by_size = {r.active: r.median_ms for r in rows}
    eighth = b.seq_len // 8
    ratio = by_size[b.seq_len] / by_size[eighth] if eighth in by_size and by_size[eighth] > 0 else float("nan")
    fit = {"r2_node_visits": r2_visits, "r2_time": r2_time, "slope_ms_per_row": slope, "dense_over_eighth": ratio}
    (out / "bench_fit.json").write_text(json.dumps(fit, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    for r in rows:
        print(f"|A|={r.active:>4}  {r.median_ms:8.3f} ms  visits {r.node_visits}")
    print(f"R^2 visits {r2_visits:.4f}, R^2 time {r2_time:.4f}, dense / |A|=L/8 time {ratio:.2f}x")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "compare": cmd_compare, "verify": cmd_verify, "bench": cmd_bench}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"boelab: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"boelab: cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO
    aqa = None if args.aqa is None else args.aqa == "on"
    cfg = cfg.with_overrides(seed=args.seed, workers=args.workers, probes=getattr(args, "probes", None),
                             rho=args.rho, aqa=aqa)
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / f"{args.command}.effective.ini").write_text(cfg.to_ini(), encoding="utf-8")
        return COMMANDS[args.command](cfg, args.out)
    except (CheckpointError, OSError) as exc:
        print(f"boelab: {exc}", file=sys.stderr)
        return EXIT_IO
    except AuditError as exc:
        print(f"boelab: verification failure: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (ConfigError, ContractError) as exc:
        print(f"boelab: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except BoeLabError as exc:
        print(f"boelab: {exc}", file=sys.stderr)
        return EXIT_VERIFY


if __name__ == "__main__":
    sys.exit(main())
