"""Command line front end: data generation, experiment runs, comparison
reports, and the self-verification suite.

Every run directory is self-describing: the resolved config written into it,
plus the seed in its name, reproduce all of its outputs byte-identically.
"""

import argparse
import concurrent.futures
import json
import sys
import traceback
from dataclasses import replace
from pathlib import Path

from cotune.config import load_config, resolve, save_config
from cotune.data import partition_manifest, save_jsonl
from cotune.evaluation import evaluate
from cotune.federation import read_ledger_csv, run_experiment, world_data
from cotune.model import save_checkpoint
from cotune.verify import run_checks


def _json_dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def _load_cfg(args):
    if args.config:
        return load_config(args.config)
    return resolve({})


# -- generate-data -----------------------------------------------------------------


def cmd_generate_data(args) -> int:
    cfg = _load_cfg(args)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    root = Path(args.out or cfg.out_dir) / f"data-seed{seed}"
    root.mkdir(parents=True, exist_ok=True)

    corpus, part = world_data(cfg, seed)
    save_jsonl(corpus, root / "global.jsonl")
    save_jsonl(part.server.train, root / "server_train.jsonl")
    save_jsonl(part.server.test, root / "server_test.jsonl")
    for i, split in enumerate(part.devices):
        save_jsonl(split.train, root / f"device{i}_train.jsonl")
        save_jsonl(split.test, root / f"device{i}_test.jsonl")
    manifest = dict(partition_manifest(part))
    manifest["seed"] = seed
    _json_dump(manifest, root / "manifest.json")

    print(f"wrote {len(corpus)} samples across "
          f"{len(part.devices)} devices + server to {root}")
    return 0


# -- run ---------------------------------------------------------------------------


def _resident_scalars(world) -> dict:
    out = {}
    for dev in world.devices:
        n = dev.slm.scalar_count()
        if dev.dpm is not None:
            n += dev.dpm.scalar_count()
        out[dev.name] = n
    server = 0
    if world.server.llm is not None:
        server += world.server.llm.scalar_count()
    if world.server.dpm is not None:
        server += world.server.dpm.scalar_count()
    if server:
        out["server"] = server
    return out


def _write_predictions(world, path: Path) -> None:
    cfg = world.config
    rows = []
    for dev in world.devices:
        res = evaluate(dev.slm, dev.slm_tokenizer, dev.test,
                       max_new=cfg.eval_max_new)
        for rec in res.records:
            rows.append({"endpoint": dev.name, **rec})
    if world.server.dpm is not None:
        res = evaluate(world.server.dpm, world.server.tokenizer,
                       world.server.test, max_new=cfg.eval_max_new)
        for rec in res.records:
            rows.append({"endpoint": "server", **rec})
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _run_single(cfg, seed: int, root: Path):
    """One (method, seed) run directory; returns (seed, error or None)."""
    run_dir = root / f"{cfg.method}-seed{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    failure = run_dir / "failure.txt"
    if failure.exists():
        failure.unlink()
    # the echoed config alone reproduces this exact run
    save_config(replace(cfg, seeds=(seed,), out_dir=str(root)),
                run_dir / "resolved_config.json")
    try:
        result = run_experiment(cfg, seed)
    except Exception:
        failure.write_text(traceback.format_exc(), encoding="utf-8")
        return seed, f"failed, diagnostic in {failure}"

    report = {
        "method": cfg.method,
        "seed": seed,
        "resident_scalars": _resident_scalars(result.world),
        "rounds": [r.to_dict() for r in result.reports],
    }
    _json_dump(report, run_dir / "reports.json")
    result.ledger.to_csv(run_dir / "ledger.csv")
    _write_predictions(result.world, run_dir / "predictions.jsonl")

    ckpt = run_dir / "checkpoints"
    ckpt.mkdir(exist_ok=True)
    for dev in result.world.devices:
        save_checkpoint(dev.slm, str(ckpt / f"{dev.name}_slm.ckpt"))
        if dev.dpm is not None:
            save_checkpoint(dev.dpm, str(ckpt / f"{dev.name}_dpm.ckpt"))
    if result.world.server.dpm is not None:
        save_checkpoint(result.world.server.dpm, str(ckpt / "server_dpm.ckpt"))
    if result.world.server.llm is not None:
        save_checkpoint(result.world.server.llm, str(ckpt / "server_llm.ckpt"))
    return seed, None


def cmd_run(args) -> int:
    cfg = _load_cfg(args)
    root = Path(args.out or cfg.out_dir)
    seeds = [args.seed] if args.seed is not None else list(cfg.seeds)

    outcomes = []
    if len(seeds) == 1:
        outcomes.append(_run_single(cfg, seeds[0], root))
    else:
        # independent seeds run in parallel worker processes
        with concurrent.futures.ProcessPoolExecutor(
                max_workers=min(4, len(seeds))) as pool:
            futures = [pool.submit(_run_single, cfg, s, root) for s in seeds]
            outcomes = [f.result() for f in futures]

    failed = 0
    for seed, err in sorted(outcomes):
        run_dir = root / f"{cfg.method}-seed{seed}"
        if err is None:
            print(f"{run_dir}: ok")
        else:
            failed += 1
            print(f"{run_dir}: {err}", file=sys.stderr)
    return 1 if failed else 0


# -- report ------------------------------------------------------------------------


ROUND_COLUMNS = ("method", "seed", "endpoint", "round", "rouge_l", "em")
SUMMARY_COLUMNS = ("method", "endpoint", "seeds", "rouge_l", "em", "comm_ratio")


def _ratio_from_rows(rows, endpoint: str, resident: int) -> float:
    touched = sum(r["scalar_count"] for r in rows
                  if endpoint in (r["sender"], r["receiver"]))
    if touched == 0:
        return 0.0
    rounds = len({r["round"] for r in rows})
    return touched / rounds / resident


def _read_run(run_dir: Path) -> dict:
    report = json.loads((run_dir / "reports.json").read_text(encoding="utf-8"))
    ledger_rows = read_ledger_csv(run_dir / "ledger.csv")
    run = {"method": report["method"], "seed": report["seed"],
           "round_rows": [], "final": {}, "ratios": {}}
    for rnd in report["rounds"]:
        for dev in rnd["devices"]:
            endpoint = f"device{dev['device']}"
            run["round_rows"].append(
                (report["method"], report["seed"], endpoint, rnd["t"],
                 dev["rouge_l"], dev["em"]))
            run["final"][endpoint] = (dev["rouge_l"], dev["em"])
        if rnd["server"] is not None:
            run["round_rows"].append(
                (report["method"], report["seed"], "server", rnd["t"],
                 rnd["server"]["rouge_l"], rnd["server"]["em"]))
            run["final"]["server"] = (rnd["server"]["rouge_l"],
                                      rnd["server"]["em"])
    for endpoint, resident in report["resident_scalars"].items():
        run["ratios"][endpoint] = _ratio_from_rows(ledger_rows, endpoint,
                                                   resident)
    return run


def _summarize(runs) -> list:
    groups: dict[tuple, list] = {}
    for run in runs:
        for endpoint in run["final"]:
            groups.setdefault((run["method"], endpoint), []).append(run)
    rows = []
    for (method, endpoint), members in groups.items():
        rouge = sum(m["final"][endpoint][0] for m in members) / len(members)
        em = sum(m["final"][endpoint][1] for m in members) / len(members)
        ratio = sum(m["ratios"].get(endpoint, 0.0) for m in members) / len(members)
        rows.append((method, endpoint, len(members), rouge, em, ratio))
    return rows


def _write_csv(path: Path, header, rows) -> None:
    import csv
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def cmd_report(args) -> int:
    runs = []
    for d in args.run_dirs:
        run_dir = Path(d)
        if not (run_dir / "reports.json").exists():
            print(f"{run_dir}: no reports.json (skipping)", file=sys.stderr)
            continue
        runs.append(_read_run(run_dir))
    if not runs:
        print("no readable run directories", file=sys.stderr)
        return 1

    round_rows = [row for run in runs for row in run["round_rows"]]
    summary_rows = _summarize(runs)

    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "report.csv", ROUND_COLUMNS, round_rows)
    _write_csv(out / "summary.csv", SUMMARY_COLUMNS, summary_rows)

    print(f"{'method':12s} {'endpoint':10s} {'seeds':>5s} "
          f"{'rouge_l':>8s} {'em':>8s} {'comm_ratio':>11s}")
    for method, endpoint, n, rouge, em, ratio in summary_rows:
        print(f"{method:12s} {endpoint:10s} {n:5d} "
              f"{rouge:8.4f} {em:8.4f} {ratio:11.6f}")
    print(f"wrote {out / 'report.csv'} and {out / 'summary.csv'}")
    return 0


# -- verify ------------------------------------------------------------------------


def cmd_verify(args) -> int:
    results = run_checks(only=args.only or None)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name:12s} {status}  ({r.seconds:6.2f}s)  {r.detail}")
    total = sum(r.seconds for r in results)
    bad = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(bad)}/{len(results)} checks passed "
          f"in {total:.1f}s")
    return 1 if bad else 0


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cotune",
        description="cloud-edge co-tuning simulator for tiny language models")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="config JSON path (defaults used if omitted)")
        p.add_argument("--seed", type=int, help="override the config's seed(s)")
        p.add_argument("--out", help="override the config's output directory")

    p = sub.add_parser("generate-data",
                       help="write dataset JSONL files and a partition manifest")
    common(p)
    p.set_defaults(fn=cmd_generate_data)

    p = sub.add_parser("run", help="run the configured method for each seed")
    common(p)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("report",
                       help="comparison tables across finished run directories")
    p.add_argument("run_dirs", nargs="+", help="run directories to compare")
    p.add_argument("--out", help="directory for report.csv / summary.csv")
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("verify", help="run the oracle self-verification suite")
    p.add_argument("--only", nargs="*", help="subset of check names")
    p.set_defaults(fn=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
