"""Command-line entry point: generate, train, eval, oracle, report.

Exit codes: 0 success, 1 usage error, 2 invalid data or failed validation,
3 internal error. Every command that writes files also writes a JSON run
manifest next to its main output (``<output>.manifest.json``, or
``manifest.json`` inside a training output directory).
"""

import argparse
import csv
import hashlib
import io
import json
import os
import sys
import traceback
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import dump_config, load_config, resolve, snapshot
from .errors import InvalidArgument, PopcoError
from .inference import budgeted_eval, greedy_eval, pareto_sweep
from .instances import TAGS, generate, load_instances, save_instances
from .model import checkpoint_bytes, load_checkpoint
from .oracles import METHOD_TAG, METHODS
from .rng import derive_seed
from .training import phase1, phase2, phase3

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
LOG_COLUMNS = ["step", "phase", "mean_agent_reward", "population_reward", "loss", "wall_ms"]
EVAL_COLUMNS = ["instance_id", "best_obj", "ref_obj", "gap_pct", "n_trajectories"]


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _default_workers():
    try:
        return max(1, int(os.environ.get("POPPY_WORKERS", "1")))
    except ValueError:
        return 1


def _int_list(text, what):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"{what}: expected comma-separated integers, got {text!r}") from None


def _fmt(x):
    return repr(float(x))


def _now():
    return datetime.now(timezone.utc).isoformat()


def _sha256(path):
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def write_manifest(path, argv, config, seeds, outputs, started):
    manifest = {
        "command_line": ["popco", *argv],
        "config": config,
        "seeds": seeds,
        "version": __version__,
        "started": started,
        "finished": _now(),
        "outputs": {str(p): _sha256(p) for p in outputs},
    }
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def _write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    with open(path, "w", newline="") as f:
        f.write(buf.getvalue())


def _read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# -- generate ---------------------------------------------------------------

def cmd_generate(args, argv):
    if args.n is None and args.problem != "toy":
        raise UsageError(f"--n is required for {args.problem}")
    started = _now()
    seed = derive_seed(args.seed, "generation")
    inst = generate(args.problem, args.n or 3, args.count, seed, capacity=args.capacity,
                    demand_divisor=args.demand_divisor)
    save_instances(inst, args.out)
    write_manifest(f"{args.out}.manifest.json", argv,
                   {"problem": args.problem, "n": args.n, "count": args.count,
                    "capacity": args.capacity, "demand_divisor": inst.demand_divisor},
                   {"seed": args.seed, "generation": seed}, [args.out], started)
    print(f"wrote {len(inst)} {args.problem} instances to {args.out}")


# -- train ------------------------------------------------------------------

def _train_configs(args):
    file_values = load_config(args.config) if args.config else {}
    over = dict(kv.split("=", 1) for kv in args.set) if args.set else {}
    over = {k.strip(): v.strip() for k, v in over.items()}
    flags = {"problem": args.problem, "n": args.n, "population": args.K,
             "batch_size": args.batch_size, "num_starts": args.num_starts,
             "learning_rate": args.lr, "seed": args.seed}
    over.update({k: v for k, v in flags.items() if v is not None})
    if args.steps:
        steps = _int_list(args.steps, "--steps")
        if len(steps) != 3:
            raise UsageError("--steps needs three values: phase1,phase2,phase3")
        over.update(phase1_steps=steps[0], phase2_steps=steps[1], phase3_steps=steps[2])
    return resolve(file_values, over)


def cmd_train(args, argv):
    for kv in args.set or []:
        if "=" not in kv:
            raise UsageError(f"--set expects KEY=VALUE, got {kv!r}")
    tcfg, mcfg = _train_configs(args)
    if args.print_config:
        sys.stdout.write(dump_config(tcfg, mcfg))
        return
    if not args.out:
        raise UsageError("--out is required")
    phases = sorted(set(_int_list(args.phases, "--phases")))
    if not phases or not set(phases) <= {1, 2, 3}:
        raise UsageError("--phases takes values among 1,2,3")
    started = _now()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    model = None
    if args.resume:
        model, _ = load_checkpoint(args.resume)
        if model.config != mcfg:
            raise InvalidArgument(f"checkpoint model config {model.config} does not match {mcfg}")
    if phases[0] > 1 and model is None:
        raise UsageError(f"phase {phases[0]} needs --resume with an earlier checkpoint")
    if model is not None and 3 in phases and 2 not in phases and model.K != tcfg.population:
        raise InvalidArgument(f"checkpoint has {model.K} decoders, config asks for {tcfg.population}")

    rows = []

    def log(phase, step, stats, ms):
        rows.append([step, phase, _fmt(stats.mean_agent_reward), _fmt(stats.population_reward),
                     _fmt(stats.loss), 0 if args.no_timing else round(ms, 3)])
        if args.verbose and step % args.verbose == 0:
            print(f"phase {phase} step {step} agent {stats.mean_agent_reward:.4f} "
                  f"population {stats.population_reward:.4f} loss {stats.loss:.5f}", flush=True)

    outputs = []
    for ph in phases:
        if ph == 1:
            model = phase1(tcfg, mcfg, log, args.workers, model if args.resume and model.K == 1 else None)
            steps = tcfg.phase1_steps
        elif ph == 2:
            model = phase2(model, tcfg.population, tcfg, log, args.workers)
            steps = tcfg.phase2_steps
        else:
            model = phase3(model, tcfg, log, args.workers)
            steps = tcfg.phase3_steps
        path = out / f"phase{ph}.ckpt"
        with open(path, "wb") as f:
            f.write(checkpoint_bytes(model, steps))
        outputs.append(path)
    log_path = out / "train_log.csv"
    _write_csv(log_path, LOG_COLUMNS, rows)
    outputs.append(log_path)
    seeds = {"seed": tcfg.seed, "streams": ["init", "train", "rollout"]}
    write_manifest(out / "manifest.json", argv, snapshot(tcfg, mcfg), seeds, outputs, started)
    print(f"trained phases {','.join(map(str, phases))}; outputs in {out}")


# -- eval -------------------------------------------------------------------

def _load_reference(path, count):
    rows = _read_csv(path)
    if len(rows) != count:
        raise InvalidArgument(f"reference file has {len(rows)} rows for {count} instances")
    ref = np.empty(count)
    for j, row in enumerate(rows):
        if int(row["instance_id"]) != j:
            raise InvalidArgument(f"reference row {j} has instance_id {row['instance_id']}")
        ref[j] = float(row["objective"])
    return ref


def _parse_pareto(text):
    spec = text.split("=", 1)[1] if "=" in text else text
    mults = []
    for part in spec.split(","):
        part = part.strip().rstrip("x")
        try:
            mults.append(float(part))
        except ValueError:
            raise UsageError(f"--pareto: cannot read budget multiplier {part!r}") from None
    return mults


def cmd_eval(args, argv):
    started = _now()
    model, _ = load_checkpoint(args.checkpoint)
    inst = load_instances(args.instances)
    if model.config.problem != inst.tag:
        raise InvalidArgument(f"checkpoint is for {model.config.problem}, instances are {inst.tag}")
    ref = _load_reference(args.reference, len(inst)) if args.reference else None
    if args.pareto:
        if ref is None:
            raise UsageError("--pareto needs --reference")
        rows = pareto_sweep(model, inst, ref, _parse_pareto(args.pareto), args.P_eval, args.augment,
                            args.K_top, derive_seed(args.seed, "sampling"), args.workers)
        _write_csv(args.out, ["budget", "mean_gap"], [[b, _fmt(g)] for b, g in rows])
    else:
        if args.budget is None:
            rep = greedy_eval(model, inst, args.P_eval, args.augment, args.workers)
        else:
            rep = budgeted_eval(model, inst, args.budget, args.P_eval, args.augment, args.K_top,
                                derive_seed(args.seed, "sampling"), args.workers)
        if ref is not None:
            rep = rep.with_reference(ref)
        gaps = rep.gap_pct
        rows = []
        for i in range(len(inst)):
            rows.append([i, _fmt(rep.best_obj[i]), "" if ref is None else _fmt(ref[i]),
                         "" if gaps is None else _fmt(gaps[i]), int(rep.n_trajectories[i])])
        rows.append(["mean", _fmt(rep.mean_obj), "" if ref is None else _fmt(ref.mean()),
                     "" if gaps is None else _fmt(gaps.mean()), _fmt(rep.n_trajectories.mean())])
        _write_csv(args.out, EVAL_COLUMNS, rows)
        msg = f"mean objective {rep.mean_obj:.6f}"
        if gaps is not None:
            msg += f", mean gap {gaps.mean():.4f}%"
        print(msg)
    config = {"checkpoint": args.checkpoint, "instances": args.instances, "reference": args.reference,
              "budget": args.budget, "augment": args.augment, "P_eval": args.P_eval, "K_top": args.K_top,
              "pareto": args.pareto}
    write_manifest(f"{args.out}.manifest.json", argv, config,
                   {"seed": args.seed, "sampling": derive_seed(args.seed, "sampling")}, [args.out], started)


# -- oracle -----------------------------------------------------------------

def cmd_oracle(args, argv):
    started = _now()
    inst = load_instances(args.instances)
    if METHOD_TAG[args.method] != inst.tag:
        raise InvalidArgument(f"{args.method} solves {METHOD_TAG[args.method]}, instances are {inst.tag}")
    solve = METHODS[args.method]
    objs = [solve(x).objective for x in inst]
    _write_csv(args.out, ["instance_id", "objective", "method"],
               [[i, _fmt(o), args.method] for i, o in enumerate(objs)])
    write_manifest(f"{args.out}.manifest.json", argv, {"method": args.method, "instances": args.instances},
                   {}, [args.out], started)
    print(f"{args.method}: mean objective {np.mean(objs):.6f} over {len(objs)} instances")


# -- report -----------------------------------------------------------------

def _read_eval(path):
    rows = _read_csv(path)
    if not rows or list(rows[0].keys()) != EVAL_COLUMNS:
        raise InvalidArgument(f"{path} is not an evaluation CSV")
    body = [r for r in rows if r["instance_id"] != "mean"]
    return body


def cmd_report(args, argv):
    if not args.reports:
        raise UsageError("report needs at least one evaluation CSV")
    names = args.names.split(",") if args.names else [Path(p).stem for p in args.reports]
    if len(names) != len(args.reports):
        raise UsageError("--names must give one name per report")
    tables = [_read_eval(p) for p in args.reports]
    ids = [r["instance_id"] for r in tables[0]]
    for path, t in zip(args.reports[1:], tables[1:]):
        other = [r["instance_id"] for r in t]
        for j in range(max(len(ids), len(other))):
            a = ids[j] if j < len(ids) else "<missing>"
            b = other[j] if j < len(other) else "<missing>"
            if a != b:
                raise InvalidArgument(f"instance ids differ at row {j}: {args.reports[0]} has {a}, {path} has {b}")
    out_rows = []
    for name, path, t in zip(names, args.reports, tables):
        obj = np.mean([float(r["best_obj"]) for r in t])
        gaps = [r["gap_pct"] for r in t]
        gap = np.mean([float(g) for g in gaps]) if all(gaps) else None
        traj = np.mean([float(r["n_trajectories"]) for r in t])
        secs = None
        manifest = Path(f"{path}.manifest.json")
        if manifest.exists():
            m = json.loads(manifest.read_text())
            t0, t1 = datetime.fromisoformat(m["started"]), datetime.fromisoformat(m["finished"])
            secs = (t1 - t0).total_seconds()
        out_rows.append([name, f"{obj:.4f}", "-" if gap is None else f"{gap:.3f}%",
                         f"{traj:g}", "-" if secs is None else f"{secs:.1f}s"])
    header = ["Method", "Obj.", "Gap", "Trajectories", "Time"]
    widths = [max(len(str(r[c])) for r in [header] + out_rows) for c in range(len(header))]
    for r in [header] + out_rows:
        print("  ".join(str(v).ljust(w) if c == 0 else str(v).rjust(w) for c, (v, w) in enumerate(zip(r, widths))))
    if args.out:
        _write_csv(args.out, header, out_rows)


# -- parser -----------------------------------------------------------------

def build_parser():
    p = Parser(prog="popco", description="Population policies for routing and knapsack problems.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=Parser)
    sub.required = True

    def common(q):
        q.add_argument("--workers", type=int, default=_default_workers(),
                       help="data-parallel workers (default: $POPPY_WORKERS or 1)")
        q.add_argument("--seed", type=int, default=0)

    g = sub.add_parser("generate", help="write a binary instance file")
    g.add_argument("--problem", choices=TAGS, required=True)
    g.add_argument("--n", type=int)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--capacity", type=float, default=25.0, help="knapsack capacity")
    g.add_argument("--demand-divisor", type=int, default=None, help="CVRP demand divisor D")
    g.add_argument("--out", required=True)
    common(g)

    t = sub.add_parser("train", help="run training phases and write checkpoints")
    t.add_argument("--config")
    t.add_argument("--problem", choices=TAGS)
    t.add_argument("--n", type=int)
    t.add_argument("--K", type=int, help="population size")
    t.add_argument("--batch-size", type=int)
    t.add_argument("--num-starts", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--steps", help="phase lengths, e.g. 5000,1000,5000")
    t.add_argument("--phases", default="1,2,3")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--out", help="output directory")
    t.add_argument("--print-config", action="store_true")
    t.add_argument("--no-timing", action="store_true", help="write wall_ms as 0 for reproducible logs")
    t.add_argument("--verbose", type=int, default=0, metavar="EVERY")
    common(t)
    t.set_defaults(seed=None)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--instances", required=True)
    e.add_argument("--reference", help="oracle CSV with reference objectives")
    e.add_argument("--budget", type=int, help="trajectories per instance, greedy pass included")
    e.add_argument("--augment", action="store_true")
    e.add_argument("--P-eval", dest="P_eval", type=int)
    e.add_argument("--K-top", dest="K_top", type=int)
    e.add_argument("--pareto", help="budget multipliers, e.g. budgets=1x,2x,5x,10x")
    e.add_argument("--out", required=True)
    common(e)

    o = sub.add_parser("oracle", help="reference objectives from an exact or heuristic solver")
    o.add_argument("--method", choices=sorted(METHODS), required=True)
    o.add_argument("--instances", required=True)
    o.add_argument("--out", required=True)
    common(o)

    r = sub.add_parser("report", help="compare evaluation CSVs")
    r.add_argument("reports", nargs="*")
    r.add_argument("--names")
    r.add_argument("--out")
    return p


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval,
            "oracle": cmd_oracle, "report": cmd_report}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    torch.set_num_threads(1)
    try:
        COMMANDS[args.command](args, argv)
    except UsageError as e:
        print(f"popco {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (PopcoError, OSError, ValueError, KeyError) as e:
        print(f"popco {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception:
        traceback.print_exc()
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
