"""
Command-line surface: one verb per experiment plus pretraining, reporting and
gradient checks.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from .config import setup_logging, substream
from .errors import IclLabError, SpecError, exit_code_for
from .evaluation import eval_accuracy
from .experiments import FIGURES, ExperimentRunner, ExperimentSpec, emit_plot_data
from .gradcheck import DEFAULT_TOL, run_suite
from .hidden_io import read_dump
from .metrics import measure_cloud
from .model import ModelConfig, save_model
from .tasks import DemoMode, build_world
from .train import CorpusConfig, PretrainConfig, TrainConfig, build_pretraining_corpus, pretrain_toy
from .tvs_filter import load_filter

logger = logging.getLogger(__name__)

EXPERIMENT_VERBS = {
    "train-filter": "filter_sweep",
    "transfer": "verbalization",
    "scan-heads": "head_scan",
    "ablate": "dh_ablation",
    "fact-recall": "fact_recall",
    "export-pca": "pca_export",
}

# argparse dest -> ExperimentSpec field
SPEC_FIELDS = {
    "task": "task", "tasks": "tasks", "layers": "layers", "ranks": "ranks", "shots": "shots", "mode": "modes",
    "seed": "seed", "out": "out", "n_train": "n_train", "n_val": "n_val", "n_test": "n_test",
    "per_query": "per_query", "flux_rank": "flux_rank", "eval_shots": "eval_shots", "theta": "theta",
    "ablation_theta": "ablation_theta", "overlap_k": "overlap_k", "control_trials": "control_trials",
    "configs": "ablation_configs", "read_offset": "read_offset", "pca_dims": "pca_dims", "workers": "workers",
}


# ==============================================================================
# PARSER
# ==============================================================================

def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="Root seed for every random substream (default: 0)")
    common.add_argument("--workers", type=int, default=None, help="Worker threads (default: ICL_LAB_THREADS)")
    common.add_argument("--verbose", "-v", action="store_true", help="Debug logging")
    return common


def _grid_parser() -> argparse.ArgumentParser:
    grid = argparse.ArgumentParser(add_help=False)
    grid.add_argument("--model", type=Path, help="TWB1 model file")
    grid.add_argument("--task", help="Task world: 'ambiguous', 'facts' or a TSV path (default: stored with the model)")
    grid.add_argument("--tasks", nargs="+", help="Tasks inside the world (default: all)")
    grid.add_argument("--out", type=Path, default=Path("results"), help="Output directory (default: results)")
    grid.add_argument("--layers", type=int, nargs="+", help="Layers (default: all)")
    grid.add_argument("--ranks", type=int, nargs="+", help="Filter ranks (default: 1 2 4 8 16 64)")
    grid.add_argument("--shots", type=int, nargs="+", help="Demonstration counts k (default: 0 1 2 4 8)")
    grid.add_argument("--mode", nargs="+", help="Demonstration modes: gold random_label seen unseen instruct instruct_ls")
    grid.add_argument("--n-train", type=int, help="Filter training queries (default: 2048)")
    grid.add_argument("--n-val", type=int, help="Filter validation queries (default: 512)")
    grid.add_argument("--n-test", type=int, help="Held-out queries per cloud (default: 256)")
    grid.add_argument("--per-query", type=int, help="Demonstration sequences per query (default: 2)")
    grid.add_argument("--flux-rank", type=int, help="Filter rank used for covariance flux (default: 8)")
    grid.add_argument("--eval-shots", type=int, help="k for few-shot baselines and head scans (default: 8)")
    grid.add_argument("--lr", type=float, help="Filter learning rate (default: 1e-4)")
    grid.add_argument("--epochs", type=int, help="Filter training epochs (default: 4)")
    grid.add_argument("--pseudo-batch", type=int, help="Examples per optimizer step (default: 32)")
    grid.add_argument("--record-timing", action="store_true", help="Add wall_clock to every result row")
    return grid


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="icl-lab", description="Task-oriented information removal experiments")
    verbs = parser.add_subparsers(dest="verb", required=True)
    common, grid = _common_parser(), _grid_parser()

    p = verbs.add_parser("pretrain", parents=[common], help="Pretrain a toy model on a synthetic task world")
    p.add_argument("--task", default="ambiguous", help="'ambiguous', 'facts' or a TSV path (default: ambiguous)")
    p.add_argument("--out", type=Path, default=Path("models/toy.twb"), help="Model file to write")
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--corpus-size", type=int, default=20000)
    p.add_argument("--max-shots", type=int, default=8)
    p.add_argument("--d-model", type=int, default=128)
    p.add_argument("--n-layers", type=int, default=4)
    p.add_argument("--n-heads", type=int, default=4)
    p.add_argument("--max-seq", type=int, default=128)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--loss-on", choices=["labels", "all"], default="labels")
    p.set_defaults(handler=cmd_pretrain)

    for verb, kind in EXPERIMENT_VERBS.items():
        p = verbs.add_parser(verb, parents=[common, grid], help=f"Run the {kind} experiment")
        p.set_defaults(handler=cmd_experiment, kind=kind)
        if kind == "head_scan":
            p.add_argument("--theta", type=float, help="DH / anti-DH threshold (default: 0.035)")
            p.add_argument("--overlap-k", type=float, help="Bottom-K fraction for task overlap (default: 0.01)")
            p.add_argument("--read-offset", type=int, help="Read clouds this many layers after the ablation")
        if kind == "dh_ablation":
            p.add_argument("--ablation-theta", type=float, help="Ablate heads below -theta flux change (default: 0.05)")
            p.add_argument("--control-trials", type=int, help="Matched random-head controls (default: 10)")
            p.add_argument("--configs", nargs="+", help="Demonstration configs (default: random_sample seen unseen)")
        if kind == "pca_export":
            p.add_argument("--pca-dims", type=int, nargs="+", help="1-based components (default: 1 2 3)")

    p = verbs.add_parser("measure", parents=[common, grid], help="Cloud metrics against k or layer")
    p.add_argument("--by", choices=["k", "layer"], default="k")
    p.add_argument("--dump", type=Path, help="Measure an HSC1 hidden-state dump instead of running the model")
    p.add_argument("--filter", type=Path, help="TVS1 filter for --dump")
    p.add_argument("--allow-layer-mismatch", action="store_true")
    p.set_defaults(handler=cmd_measure)

    p = verbs.add_parser("report", parents=[common], help="Emit tidy CSV plot data from a JSONL report")
    p.add_argument("--report", type=Path, required=True)
    p.add_argument("--figure", choices=sorted(FIGURES), help="Figure kind (default: from the report name)")
    p.add_argument("--out", type=Path, help="Output directory (default: <report dir>/plots)")
    p.set_defaults(handler=cmd_report)

    p = verbs.add_parser("gradcheck", parents=[common], help="Finite-difference check of every backward pass")
    p.add_argument("--d", type=int, default=32)
    p.add_argument("--tol", type=float, default=DEFAULT_TOL)
    p.set_defaults(handler=cmd_gradcheck)
    return parser


# ==============================================================================
# HANDLERS
# ==============================================================================

def spec_from_args(args: argparse.Namespace, kind: str) -> ExperimentSpec:
    if args.model is None:
        raise SpecError("--model is required")
    values: Dict[str, Any] = {"kind": kind, "model": args.model, "record_timing": args.record_timing}
    for dest, name in SPEC_FIELDS.items():
        value = getattr(args, dest, None)
        if value is not None:
            values[name] = value
    train = {name: getattr(args, dest) for dest, name in
             (("lr", "learning_rate"), ("epochs", "epochs"), ("pseudo_batch", "pseudo_batch"))
             if getattr(args, dest) is not None}
    if train:
        values["train"] = TrainConfig(**train)
    return ExperimentSpec.build(**values)


def cmd_experiment(args: argparse.Namespace) -> int:
    spec = spec_from_args(args, args.kind)
    path = ExperimentRunner().run(spec)
    print(f"✅ {spec.kind}: results written to {path}")
    return 0


def cmd_measure(args: argparse.Namespace) -> int:
    if args.dump is None:
        args.kind = "metrics_vs_k" if args.by == "k" else "metrics_vs_layer"
        return cmd_experiment(args)
    if args.filter is None:
        raise SpecError("--dump needs --filter")
    cloud = read_dump(args.dump)
    row = measure_cloud(cloud, load_filter(args.filter), args.flux_rank, args.allow_layer_mismatch)
    print(json.dumps(row.as_dict(), indent=2))
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    figure = args.figure or args.report.stem
    out = args.out or args.report.parent / "plots"
    written = emit_plot_data(args.report, figure, out)
    print(f"✅ {len(written)} plot-data files written to {out}")
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    reports = run_suite(args.seed, args.d)
    for report in reports:
        mark = "✅" if report.passed(args.tol) else "❌"
        print(f"{mark} {report.name:<14} max rel error {report.max_rel_error:.2e}")
    return 0 if all(r.passed(args.tol) for r in reports) else 3


def cmd_pretrain(args: argparse.Namespace) -> int:
    world = build_world(args.task, seed=args.seed)
    corpus = build_pretraining_corpus(world, args.corpus_size, substream(args.seed, "corpus"),
                                      CorpusConfig(max_shots=args.max_shots))
    cfg = ModelConfig(d_model=args.d_model, n_layers=args.n_layers, n_heads=args.n_heads,
                      vocab_size=len(world.tokenizer), max_seq=args.max_seq)
    train_cfg = PretrainConfig(learning_rate=args.lr, batch_size=args.batch_size, loss_on=args.loss_on,
                               seed=args.seed)
    meta = {"world": world.to_meta(),
            "pretrain": {"steps": args.steps, "corpus_size": args.corpus_size, "seed": args.seed}}
    print(f"🚀 Pretraining {cfg.n_layers}x{cfg.d_model} model on {len(corpus)} prompts ({world.task_names})")
    model = pretrain_toy(cfg, corpus, args.steps, train_cfg, world.tokenizer.vocab, meta)
    path = save_model(model, args.out)

    rng = substream(args.seed, "pretrain-eval")
    for task in world.task_names:
        queries = world.task(task).test[:64]
        acc = eval_accuracy(model, world.prompts(task, queries, args.max_shots, DemoMode.GOLD, rng),
                            workers=args.workers)
        print(f"   • {task}: {args.max_shots}-shot accuracy {acc:.3f}")
    print(f"✅ Model written to {path}")
    return 0


# ==============================================================================
# ENTRY POINT
# ==============================================================================

def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging("DEBUG" if args.verbose else None)
    try:
        return args.handler(args)
    except (IclLabError, ValueError) as e:
        logger.debug("command failed", exc_info=True)
        print(f"❌ {e}", file=sys.stderr)
        return exit_code_for(e)


if __name__ == "__main__":
    sys.exit(main())
