"""Command line front end: runs, derivation, evaluation, baselines, counting.

Configs are flat ``key = value`` text files; every key mirrors a field of the
search or data configuration and unknown keys are rejected outright so a
typo cannot silently fall back to a default. Artifacts are written with
full-precision repr floats and no timestamps, so re-running a command with
the same config and seed reproduces byte-identical files.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

from . import __version__
from .cell import (
    CellError,
    CellSpec,
    Genotype,
    alpha_entropy,
    derive_genotype,
    format_alpha,
    parse_alpha,
    uniform_entropy,
)
from .counting import CountError, SpaceQuery, count_discrete, count_relaxed, relaxed_edge_count, scientific
from .fidelity import run_fidelity_suite
from .gradcheck import check_all_primitives
from .ops import OP_ORDER
from .optim import OptimizerError
from .search import (
    IterationRecord,
    NumericalError,
    SearchConfig,
    Trajectory,
    random_search,
    search,
    toy_search_config,
    train_genotype,
)
from .tasks import DataConfig, DataError, SyntheticCellTask, ToyBilevelTask


class ConfigError(Exception):
    """Unparseable, unknown, or inconsistent configuration input."""


# ---------------------------------------------------------------------------
# Config files
# ---------------------------------------------------------------------------


def _cast_bool(text: str) -> bool:
    if text.lower() in ("true", "yes", "1"):
        return True
    if text.lower() in ("false", "no", "0"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _cast_optional_float(text: str):
    if text.lower() in ("auto", "none"):
        return None
    return float(text)


def _cast_choice(*choices):
    def cast(text: str) -> str:
        if text not in choices:
            raise ConfigError(f"expected one of {choices}, got {text!r}")
        return text

    return cast


CONFIG_KEYS = {
    # task selection and data shape
    "task": _cast_choice("synthetic", "toy"),
    "data_n": int,
    "data_dims": int,
    "data_classes": int,
    "data_noise": float,
    "data_seed": int,
    "data_clusters": int,
    "data_path": str,
    "test_fraction": float,
    "val_fraction": float,
    # cell shape
    "cell_nodes": int,
    "cell_hidden": int,
    "cell_k": int,
    "cell_reduction": _cast_choice("mean", "concat"),
    # search hyperparameters
    "mode": _cast_choice("second-order", "first-order", "joint", "random"),
    "steps": int,
    "batch_size": int,
    "seed": int,
    "weight_lr": float,
    "arch_lr": float,
    "momentum": float,
    "weight_decay_weights": float,
    "weight_decay_alpha": float,
    "adam_beta1": float,
    "adam_beta2": float,
    "arch_optimizer": _cast_choice("adam", "sgd"),
    "unroll_lr": _cast_optional_float,
    "hvp_epsilon_scale": float,
    "anneal": _cast_bool,
    "clip_norm": _cast_optional_float,
    "momentum_unroll": _cast_bool,
    "joint_submode": _cast_choice("coordinate", "simultaneous"),
    "snapshot_every": int,
    # from-scratch evaluation budget
    "eval_steps": int,
    "eval_batch_size": int,
    "eval_seed": int,
    "n_samples": int,
}


def parse_config_text(text: str, origin: str = "<config>") -> dict:
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}: line {lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{origin}: line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{origin}: line {lineno}: duplicate key {key!r}")
        try:
            values[key] = CONFIG_KEYS[key](value)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"{origin}: line {lineno}: bad value for {key!r}: {exc}") from None
    return values


def load_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except FileNotFoundError:
        raise ConfigError(f"no such config file: {path}") from None
    return parse_config_text(text, origin=str(path))


def search_config_from(cfg: dict) -> SearchConfig:
    base = SearchConfig()
    kwargs = {}
    for field in ("mode", "steps", "batch_size", "seed", "weight_lr", "arch_lr",
                  "momentum", "weight_decay_weights", "weight_decay_alpha",
                  "arch_optimizer", "unroll_lr", "hvp_epsilon_scale", "anneal",
                  "clip_norm", "momentum_unroll", "joint_submode", "eval_steps",
                  "eval_batch_size", "eval_seed", "snapshot_every"):
        if field in cfg:
            kwargs[field] = cfg[field]
    betas = (cfg.get("adam_beta1", base.adam_betas[0]),
             cfg.get("adam_beta2", base.adam_betas[1]))
    try:
        return SearchConfig(adam_betas=betas, **kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cell_spec_from(cfg: dict) -> CellSpec:
    try:
        return CellSpec(
            nodes=cfg.get("cell_nodes", 6),
            input_arity=2,
            hidden=cfg.get("cell_hidden", 16),
            k=cfg.get("cell_k", 2),
            reduction=cfg.get("cell_reduction", "mean"),
        )
    except CellError as exc:
        raise ConfigError(str(exc)) from None


def data_config_from(cfg: dict) -> DataConfig:
    defaults = DataConfig()
    return DataConfig(
        n=cfg.get("data_n", defaults.n),
        dims=cfg.get("data_dims", defaults.dims),
        classes=cfg.get("data_classes", defaults.classes),
        noise=cfg.get("data_noise", defaults.noise),
        seed=cfg.get("data_seed", defaults.seed),
        clusters_per_class=cfg.get("data_clusters", defaults.clusters_per_class),
        test_fraction=cfg.get("test_fraction", defaults.test_fraction),
        val_fraction=cfg.get("val_fraction", defaults.val_fraction),
        path=cfg.get("data_path"),
    )


def build_problem(cfg: dict):
    if cfg.get("task", "synthetic") == "toy":
        return ToyBilevelTask()
    try:
        dataset = data_config_from(cfg).build()
        return SyntheticCellTask(dataset, cell_spec_from(cfg))
    except DataError as exc:
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------------------
# Artifact writers
# ---------------------------------------------------------------------------


def _fmt(x) -> str:
    if x is None:
        return ""
    return repr(float(x))


def config_hash(cfg: dict) -> str:
    canon = "\n".join(f"{k}={cfg[k]}" for k in sorted(cfg))
    return hashlib.sha256(canon.encode()).hexdigest()


def write_manifest(out_dir: Path, cfg: dict, seeds: list[int]) -> None:
    doc = {
        "tool": "cellsearch",
        "version": __version__,
        "config_hash": config_hash(cfg),
        "config": {k: str(cfg[k]) for k in sorted(cfg)},
        "seeds": seeds,
        "layout": {
            "trajectory": "trajectory.csv",
            "alpha_dir": "alpha",
            "genotype": "genotype.json",
            "summary": "summary.txt",
        },
    }
    (out_dir / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


TRAJECTORY_HEADER = "iteration,train_loss,val_loss,weight_lr,hvp_epsilon,alpha_snapshot"


def write_trajectory(out_dir: Path, traj: Trajectory) -> None:
    lines = [TRAJECTORY_HEADER]
    for r in traj.records:
        lines.append(
            f"{r.iteration},{_fmt(r.train_loss)},{_fmt(r.val_loss)},"
            f"{_fmt(r.weight_lr)},{_fmt(r.hvp_epsilon)},{r.snapshot}"
        )
    (out_dir / "trajectory.csv").write_text("\n".join(lines) + "\n")


def read_trajectory(path) -> list[IterationRecord]:
    """Inverse of write_trajectory (wall-clock is not serialized)."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != TRAJECTORY_HEADER:
        raise ConfigError(f"{path}: not a trajectory file")
    records = []
    for line in lines[1:]:
        it, train, val, lr, eps, snapshot = line.split(",")
        records.append(IterationRecord(
            iteration=int(it), train_loss=float(train), val_loss=float(val),
            weight_lr=float(lr), hvp_epsilon=float(eps) if eps else None,
            snapshot=snapshot, wall_clock=0.0,
        ))
    return records


def write_summary(out_dir: Path, entries: dict) -> None:
    lines = [f"{key}: {value}" for key, value in entries.items()]
    (out_dir / "summary.txt").write_text("\n".join(lines) + "\n")


def genotype_one_liner(genotype: Genotype) -> str:
    return " | ".join(
        ",".join(f"{pred}:{op}" for pred, op in pairs) for pairs in genotype.nodes
    )


def _search_summary(config: SearchConfig, traj: Trajectory, problem) -> dict:
    entries = {
        "mode": config.mode,
        "steps_requested": config.steps,
        "steps_completed": len(traj.records),
        "diverged": str(traj.diverged).lower(),
    }
    if traj.records:
        entries["final_train_loss"] = _fmt(traj.records[-1].train_loss)
        entries["final_val_loss"] = _fmt(traj.records[-1].val_loss)
    if problem.has_cell:
        entries["alpha_entropy"] = _fmt(alpha_entropy(traj.final_alpha))
        entries["uniform_entropy"] = _fmt(uniform_entropy(len(OP_ORDER)))
        if traj.genotype is not None:
            entries["genotype"] = genotype_one_liner(traj.genotype)
    else:
        entries["final_alpha"] = _fmt(traj.final_alpha["alpha"])
        entries["final_w"] = _fmt(traj.final_weights["w"])
    entries["forward_passes"] = traj.counters.forward_passes
    entries["backward_passes"] = traj.counters.backward_passes
    entries["alpha_grad_evals"] = traj.counters.alpha_grad_evals
    entries["weight_grad_evals"] = traj.counters.weight_grad_evals
    entries["events"] = len(traj.events)
    return entries


def _run_search_to_dir(config: SearchConfig, problem, cfg: dict, out_dir: Path) -> Trajectory:
    out_dir.mkdir(parents=True, exist_ok=True)
    snapshot_hook = None
    if problem.has_cell:
        alpha_dir = out_dir / "alpha"
        alpha_dir.mkdir(exist_ok=True)

        def snapshot_hook(t, alpha):
            every = config.snapshot_every
            if every > 0 and t % every == 0:
                name = f"alpha/step_{t:06d}.tsv"
                (out_dir / name).write_text(format_alpha(alpha))
                return name
            return ""

    traj = search(config, problem, snapshot_hook=snapshot_hook)
    if problem.has_cell:
        final_name = f"alpha/step_{len(traj.records):06d}.tsv"
        (out_dir / final_name).write_text(format_alpha(traj.final_alpha))
        if traj.genotype is not None:
            (out_dir / "genotype.json").write_text(traj.genotype.to_json())
    write_trajectory(out_dir, traj)
    write_manifest(out_dir, cfg, [config.seed])
    write_summary(out_dir, _search_summary(config, traj, problem))
    return traj


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _run_random_to_dir(config: SearchConfig, problem, cfg: dict, out_dir: Path,
                       n_samples: int):
    out_dir.mkdir(parents=True, exist_ok=True)
    result = random_search(config, problem, n_samples)
    (out_dir / "genotype.json").write_text(result.best.to_json())
    lines = ["sample,val_accuracy"]
    lines += [f"{i},{_fmt(score)}" for i, score in enumerate(result.scores)]
    (out_dir / "samples.csv").write_text("\n".join(lines) + "\n")
    write_manifest(out_dir, cfg, [config.seed])
    write_summary(out_dir, {
        "mode": "random",
        "samples": n_samples,
        "best_score": _fmt(result.best_score),
        "genotype": genotype_one_liner(result.best),
    })
    return result


def cmd_search(args) -> int:
    cfg = load_config(args.config)
    config = search_config_from(cfg)
    problem = build_problem(cfg)
    if config.mode == "random":
        if not problem.has_cell:
            raise ConfigError("random mode needs a dataset task, not the toy problem")
        result = _run_random_to_dir(config, problem, cfg, Path(args.out),
                                    cfg.get("n_samples", 8))
        print(f"best of {cfg.get('n_samples', 8)}: val_accuracy={result.best_score:.4f}")
        return 0
    traj = _run_search_to_dir(config, problem, cfg, Path(args.out))
    if traj.diverged:
        print("search diverged:", "; ".join(traj.events), file=sys.stderr)
        return 3
    if traj.records:
        last = traj.records[-1]
        print(f"search finished: train_loss={last.train_loss:.6f} "
              f"val_loss={last.val_loss:.6f}")
    if traj.genotype is not None:
        print("genotype:", genotype_one_liner(traj.genotype))
    return 0


def cmd_toy_bilevel(args) -> int:
    config = toy_search_config(
        mode=args.mode, steps=args.steps, unroll_lr=args.unroll_lr,
        weight_lr=args.weight_lr, arch_lr=args.arch_lr, seed=args.seed,
    )
    problem = ToyBilevelTask()
    if args.out is not None:
        cfg = {"task": "toy", "mode": args.mode, "steps": args.steps, "seed": args.seed}
        traj = _run_search_to_dir(config, problem, cfg, Path(args.out))
    else:
        traj = search(config, problem)
    alpha = float(traj.final_alpha["alpha"])
    w = float(traj.final_weights["w"])
    print(f"alpha={alpha:.6f} w={w:.6f}")
    return 3 if traj.diverged else 0


def cmd_derive(args) -> int:
    cfg = load_config(args.config) if args.config else {}
    spec = cell_spec_from(cfg)
    try:
        alpha, op_names = parse_alpha(Path(args.alpha).read_text())
    except FileNotFoundError:
        raise ConfigError(f"no such logit snapshot: {args.alpha}") from None
    except CellError as exc:
        raise ConfigError(str(exc)) from None
    if op_names != list(OP_ORDER):
        raise ConfigError(
            f"snapshot operation columns {op_names} do not match the registry {list(OP_ORDER)}"
        )
    expected = {f"{i}->{j}" for i, j in spec.edges()}
    if set(alpha) != expected:
        raise ConfigError(
            f"snapshot edges do not match the cell: missing {sorted(expected - set(alpha))}, "
            f"unexpected {sorted(set(alpha) - expected)}"
        )
    genotype = derive_genotype(spec, alpha)
    Path(args.out).write_text(genotype.to_json())
    print("genotype:", genotype_one_liner(genotype))
    return 0


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    if cfg.get("task", "synthetic") == "toy":
        raise ConfigError("evaluate needs a dataset task, not the toy problem")
    problem = build_problem(cfg)
    config = search_config_from(cfg)
    try:
        genotype = Genotype.from_json(Path(args.genotype).read_text())
    except FileNotFoundError:
        raise ConfigError(f"no such genotype file: {args.genotype}") from None
    except CellError as exc:
        raise ConfigError(str(exc)) from None
    if genotype.spec != problem.spec:
        raise ConfigError(
            f"genotype cell {genotype.spec} does not match the configured cell {problem.spec}"
        )
    val_accuracy, weights = train_genotype(problem, genotype, config)
    train_accuracy = problem.split_accuracy(weights, genotype, "train")
    test_accuracy = problem.split_accuracy(weights, genotype, "test")
    metrics = {
        "train_accuracy": _fmt(train_accuracy),
        "val_accuracy": _fmt(val_accuracy),
        "test_accuracy": _fmt(test_accuracy),
    }
    for key, value in metrics.items():
        print(f"{key}: {value}")
    if args.out is not None:
        Path(args.out).write_text("".join(f"{k}: {v}\n" for k, v in metrics.items()))
    return 0


def cmd_random_search(args) -> int:
    cfg = load_config(args.config)
    if cfg.get("task", "synthetic") == "toy":
        raise ConfigError("random search needs a dataset task, not the toy problem")
    problem = build_problem(cfg)
    config = search_config_from(cfg)
    n_samples = args.samples if args.samples is not None else cfg.get("n_samples", 8)
    if n_samples < 1:
        raise ConfigError("need at least one sample")
    result = _run_random_to_dir(config, problem, cfg, Path(args.out), n_samples)
    print(f"best of {n_samples}: val_accuracy={result.best_score:.4f}")
    print("genotype:", genotype_one_liner(result.best))
    return 0


def cmd_count(args) -> int:
    try:
        query = SpaceQuery(
            intermediates=args.intermediates,
            nonzero_ops=args.ops,
            retained=args.retained,
            multiplicity=args.multiplicity,
        )
        discrete = count_discrete(query)
        relaxed = count_relaxed(query)
    except CountError as exc:
        raise ConfigError(str(exc)) from None
    print(f"edges_per_cell: {relaxed_edge_count(query)}")
    print(f"discrete_exact: {discrete}")
    print(f"discrete_approx: {scientific(discrete)}")
    print(f"relaxed_exact: {relaxed}")
    print(f"relaxed_approx: {scientific(relaxed)}")
    return 0


def cmd_grad_check(args) -> int:
    ok = True
    worst = 0.0
    for report in check_all_primitives(seed=args.seed, cases_per_kind=args.cases):
        status = "PASS" if report.passed else "FAIL"
        ok &= report.passed
        worst = max(worst, report.max_error)
        print(f"primitive {report.kind:>22}: max_rel_err={report.max_error:.3e} "
              f"(tol {report.tolerance:g}) {status}")
    for report in run_fidelity_suite(seed=args.seed, n_networks=args.problems,
                                     n_quadratics=args.problems):
        status = "PASS" if report.passed else "FAIL"
        ok &= report.passed
        print(f"fidelity {report.label}: max_rel_err={report.max_error:.3e} "
              f"(tol {report.tolerance:g}) {status}")
    print(f"grad-check: {'PASS' if ok else 'FAIL'} (worst primitive error {worst:.3e})")
    return 0 if ok else 3


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cellsearch",
        description="Gradient-based architecture search over DAG cells, desk scale.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", help="run a search and write its artifacts")
    p.add_argument("--config", required=True, help="flat key=value config file")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("toy-bilevel", help="run the analytic scalar problem")
    p.add_argument("--mode", default="second-order",
                   choices=["second-order", "first-order"])
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--unroll-lr", type=float, default=None,
                   help="lookahead step; defaults to the weight learning rate")
    p.add_argument("--weight-lr", type=float, default=0.5)
    p.add_argument("--arch-lr", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="optional output directory")
    p.set_defaults(func=cmd_toy_bilevel)

    p = sub.add_parser("derive", help="discretize a logit snapshot into a genotype")
    p.add_argument("--alpha", required=True, help="logit snapshot (.tsv)")
    p.add_argument("--config", default=None, help="config carrying the cell shape")
    p.add_argument("--out", required=True, help="genotype output file")
    p.set_defaults(func=cmd_derive)

    p = sub.add_parser("evaluate", help="train a genotype from scratch and report metrics")
    p.add_argument("--genotype", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="optional metrics file")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("random-search", help="best of n uniformly sampled genotypes")
    p.add_argument("--config", required=True)
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_random_search)

    p = sub.add_parser("count", help="exact search-space sizes")
    p.add_argument("--intermediates", type=int, required=True)
    p.add_argument("--ops", type=int, required=True, help="non-zero operation count")
    p.add_argument("--retained", type=int, default=2)
    p.add_argument("--multiplicity", type=int, default=1)
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("grad-check", help="gradient and lookahead fidelity report")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cases", type=int, default=20, help="cases per primitive kind")
    p.add_argument("--problems", type=int, default=20, help="fidelity problems per family")
    p.set_defaults(func=cmd_grad_check)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (CellError, DataError, CountError, OptimizerError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


def console_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_main()
