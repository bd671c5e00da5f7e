"""Command-line surface: synth, train, eval, inspect-memory.

Exit codes: 0 success, 2 validation or usage problems, 3 numerical abort.
Environment: PROTOSTREAM_OUT overrides the default output directory,
PROTOSTREAM_THREADS caps BLAS threads (applied before numpy loads).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

_threads = os.environ.get("PROTOSTREAM_THREADS")
if _threads:
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, _threads)

import numpy as np

from .errors import NumericalError, ValidationError


def _default_out(value):
    return value if value is not None else os.environ.get("PROTOSTREAM_OUT")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="protostream", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic embedding stream")
    p.add_argument("--tasks", type=int, required=True)
    p.add_argument("--classes", type=int, required=True, help="classes per task")
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--train", type=int, required=True, help="train samples per class")
    p.add_argument("--test", type=int, required=True, help="test samples per class")
    p.add_argument("--spread", type=float, required=True, help="cluster noise scale")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="output directory (or PROTOSTREAM_OUT)")

    p = sub.add_parser("train", help="train over a manifest's task stream")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default=None, help="run directory (or PROTOSTREAM_OUT)")
    p.add_argument("--config", default=None, help="json config file (strict keys)")
    p.add_argument("--profile", choices=["full", "desk"], default="desk")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--stop-after", type=int, default=None, help="stop after this many tasks")
    p.add_argument("--pnum", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda-old", type=float)
    p.add_argument("--lambda-ga", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--sinkhorn-iters", type=int)
    p.add_argument("--proj-hidden", type=int)
    p.add_argument("--proj-out", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--replay-per-class", type=int)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--var-mode", choices=["diagonal", "scalar"])
    p.add_argument("--memory", dest="memory_mode", help="proto or exemplar:<K>")
    p.add_argument("--fixed-sigma", action="store_true", help="freeze prototype scales at 0.1")
    p.add_argument("--no-sep-loss", action="store_true")
    p.add_argument("--no-align", action="store_true")
    p.add_argument("--no-replay", action="store_true", help="disable replay sampling and old loss")
    p.add_argument("--no-projector", action="store_true")
    p.add_argument("--freeze-old-centers", action="store_true")
    p.add_argument("--lr-cosine-decay", action="store_true")

    p = sub.add_parser("eval", help="re-evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--mapping", choices=["global", "restricted"], default="global")

    p = sub.add_parser("inspect-memory", help="summarize stored prototype memory")
    p.add_argument("--checkpoint", required=True)
    return parser


def _resolve_config(args) -> "TrainConfig":
    from .trainer import TrainConfig

    if args.config is not None:
        doc = json.loads(Path(args.config).read_text())
        cfg = TrainConfig.from_dict(doc)
    elif args.profile == "desk":
        cfg = TrainConfig.desk_profile()
    else:
        cfg = TrainConfig()

    direct = ["pnum", "epochs", "batch_size", "lr", "lambda_old", "lambda_ga", "tau",
              "epsilon", "sinkhorn_iters", "proj_hidden", "proj_out", "seed",
              "replay_per_class", "eval_every", "var_mode", "memory_mode"]
    for name in direct:
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    if args.fixed_sigma:
        cfg.sigma_trainable = False
    if args.no_sep_loss:
        cfg.sep_enabled = False
    if args.no_align:
        cfg.align_enabled = False
    if args.no_replay:
        cfg.replay_enabled = False
    if args.no_projector:
        cfg.projector_enabled = False
    if args.freeze_old_centers:
        cfg.freeze_old_centers = True
    if args.lr_cosine_decay:
        cfg.lr_cosine_decay = True
    cfg.validate()
    return cfg


def cmd_synth(args) -> int:
    from .data import synth_stream

    out = _default_out(args.out)
    if out is None:
        print("error: --out is required (or set PROTOSTREAM_OUT)", file=sys.stderr)
        return 2
    result = synth_stream(
        out,
        tasks=args.tasks,
        classes_per_task=args.classes,
        dim=args.dim,
        train_per_class=args.train,
        test_per_class=args.test,
        spread=args.spread,
        seed=args.seed,
    )
    echo = {k: getattr(args, k) for k in ["tasks", "classes", "dim", "train", "test", "spread", "seed"]}
    (Path(out) / "synth_config.json").write_text(json.dumps(echo, indent=2) + "\n")
    print(result.manifest_path)
    return 0


def cmd_train(args) -> int:
    from .data import load_manifest
    from .trainer import load_checkpoint, run_stream

    out = _default_out(args.out)
    if out is None:
        print("error: --out is required (or set PROTOSTREAM_OUT)", file=sys.stderr)
        return 2
    manifest = load_manifest(args.manifest)
    resume = None
    if args.resume is not None:
        resume, cfg = load_checkpoint(args.resume)
        if args.config is not None:
            cfg = _resolve_config(args)
    else:
        cfg = _resolve_config(args)

    try:
        state, reports = run_stream(manifest, cfg, out, resume=resume, stop_after=args.stop_after)
    except NumericalError as exc:
        diag = Path(out) / "abort_diagnostics.txt"
        diag.parent.mkdir(parents=True, exist_ok=True)
        diag.write_text(str(exc) + "\n")
        print(f"numerical abort: {exc}\ndiagnostics: {diag}", file=sys.stderr)
        return 3
    final = reports[-1]
    forget = "n/a" if final.forgetting is None else f"{final.forgetting:.4f}"
    print(f"acc_overall={final.acc_overall:.4f} forgetting={forget}")
    return 0


def cmd_eval(args) -> int:
    from .data import load_manifest
    from .evaluation import evaluate_session, forgetting_score
    from .trainer import load_checkpoint

    state, cfg = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    if manifest.dim != state.dim:
        print(f"error: manifest dim {manifest.dim} != checkpoint dim {state.dim}", file=sys.stderr)
        return 2
    sessions = len(state.centers.counts) if state.centers else 0
    if sessions == 0:
        print("error: checkpoint has no trained sessions", file=sys.stderr)
        return 2
    for t in range(min(sessions, len(manifest.tasks))):
        if not manifest.test_path(t).exists():
            print(f"error: missing test file {manifest.test_path(t)}", file=sys.stderr)
            return 2
    report = evaluate_session(state.projector, state.centers, manifest, sessions)
    per_task = report.per_task_acc if args.mapping == "global" else report.per_task_acc_restricted
    print(f"acc_overall={report.acc_overall:.4f}")
    for i, acc in enumerate(per_task):
        print(f"acc_task_{i + 1}={acc:.4f} [{args.mapping} mapping]")
    if len(state.reports) >= 2:
        history = state.reports[:-1] + [report]
        forget = forgetting_score(history, restricted=args.mapping == "restricted")
        print(f"forgetting={forget:.4f}")
    return 0


def cmd_inspect_memory(args) -> int:
    from .memory import ExemplarMemory
    from .trainer import load_checkpoint

    state, cfg = load_checkpoint(args.checkpoint)
    memory = state.memory
    if len(memory) == 0:
        print("memory is empty")
        return 0
    total_floats = memory.budget_floats()
    classes = memory.class_ids()
    print(f"classes stored: {len(classes)}")
    if isinstance(memory, ExemplarMemory):
        for cls in classes:
            print(f"  class {cls}: {memory.rows[cls].shape[0]} exemplars")
        counts_per_class = [memory.rows[c].shape[0] for c in classes]
    else:
        purities = []
        for cls in classes:
            stats = memory.by_class(cls)
            print(f"  class {cls}: {len(stats)} prototypes, {sum(s.count for s in stats)} samples")
            purities.extend(s.purity for s in stats)
        hist, edges = np.histogram(purities, bins=10, range=(0.0, 1.0))
        print("purity histogram:")
        for count, lo, hi in zip(hist, edges[:-1], edges[1:]):
            print(f"  [{lo:.1f}, {hi:.1f}): {count}")
    exemplar_equiv = total_floats / state.dim / len(classes)
    print(f"total floats stored: {total_floats}")
    print(f"exemplar-equivalents per class: {exemplar_equiv:.2f}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "synth": cmd_synth,
        "train": cmd_train,
        "eval": cmd_eval,
        "inspect-memory": cmd_inspect_memory,
    }
    try:
        return handlers[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
