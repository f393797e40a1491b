"""
``illusion`` command line.

Subcommands: gen-data, train, attack, defend, eval, serve, report. Every
flag can also come from ``--config`` (YAML or JSON, keys are the flag names);
a written run manifest is itself a valid config file.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import yaml

from app.core.config import settings
from app.core.exceptions import IllusionError, InvalidConfigError, UnsupportedModalityError
from app.schemas.attack import (
    AttackConfig,
    AttackMethod,
    EnsembleMode,
    EvasionMode,
    PerturbationBudget,
)
from app.schemas.defense import AugmentationKind, AugmentationSpec, JpegConfig
from app.schemas.manifest import RunManifest
from app.schemas.report import EvalReport
from app.schemas.sample import Modality
from app.services import plot_service, report_service, results_service
from app.services.dataset_service import gen_dataset, load_dataset, natural_pairs, save_dataset, split_indices
from app.services.defense_service import consistency_score
from app.services.encoder_service import alignment, load_checkpoint, save_checkpoint, train_contrastive
from app.services.eval_service import detector_roc
from app.services.experiment_service import (
    DEFAULT_AUGMENTATIONS,
    attack_runner,
    build_jobs,
    evaluate,
    label_set_for,
    run_attacks,
)
from app.services.oracle_service import LocalOracle, remote_oracle
from app.utils.seed import resolve_seed

logger = logging.getLogger("illusion")

MANIFEST_FILE = "run_manifest.json"
MANIFEST_SUFFIX = ".manifest.json"

# argparse bookkeeping that never goes into a manifest
_NOT_CONFIG = {"command", "config", "seed", "verbose"}

QUERY_BASED = (AttackMethod.QUERY, AttackMethod.HYBRID)


def _csv(cast: Callable[[str], Any]) -> Callable[[str], List[Any]]:
    def parse(text: str) -> List[Any]:
        return [cast(item.strip()) for item in str(text).split(",") if item.strip()]
    return parse


def _modality(text: str) -> Modality:
    try:
        return Modality(str(text).upper())
    except ValueError:
        raise argparse.ArgumentTypeError(f"unknown modality {text!r}") from None


# =============================================================================
# Parser
# =============================================================================

def _common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", default=None, help="YAML/JSON file (or run manifest) supplying flag values")
    sub.add_argument("--seed", type=int, default=None, help="run seed (ILLUSION_SEED overrides it)")
    sub.add_argument("--verbose", action="store_true", help="DEBUG logging")


def _attack_flags(sub: argparse.ArgumentParser, methods: Sequence[str]) -> None:
    sub.add_argument("--data", default=None, help="dataset file from gen-data")
    sub.add_argument("--ckpt", default=None, help="attacked (white-box) or evaluated encoder")
    sub.add_argument("--method", choices=methods, default=methods[0])
    sub.add_argument("--source", type=_modality, default=Modality.IMAGE.value, help="perturbed modality")
    sub.add_argument("--target", type=_modality, default=Modality.TEXT.value, help="target modality")
    sub.add_argument("--eps", type=float, default=None,
                     help="budget: integer/255 for images, raw value for audio")
    sub.add_argument("--eps-sweep", type=_csv(float), default=None, help="comma-separated budgets, one run each")
    sub.add_argument("--iters", type=int, default=None, help="gradient iterations (method default when unset)")
    sub.add_argument("--step", type=float, default=None, help="PGD step (eps/100 when unset)")
    sub.add_argument("--count", type=int, default=None, help="number of held-out samples to attack")
    sub.add_argument("--workers", type=int, default=1)
    sub.add_argument("--progress", action="store_true", help="per-sample progress bar")
    sub.add_argument("--random-start", action="store_true")
    sub.add_argument("--out", default=None, help="output directory")


def build_parser() -> Tuple[argparse.ArgumentParser, Dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="illusion", description="Adversarial illusions toolkit")
    commands = parser.add_subparsers(dest="command", required=True)
    subs: Dict[str, argparse.ArgumentParser] = {}

    sub = subs["gen-data"] = commands.add_parser("gen-data", help="generate the toy dataset")
    _common(sub)
    sub.add_argument("--classes", type=int, default=10)
    sub.add_argument("--per-class", type=int, default=50)
    sub.add_argument("--noise", type=float, default=0.1)
    sub.add_argument("--out", default=None, help="dataset file")

    sub = subs["train"] = commands.add_parser("train", help="train a toy encoder contrastively")
    _common(sub)
    sub.add_argument("--data", default=None)
    sub.add_argument("--out", default=None, help="checkpoint file")
    sub.add_argument("--pairs", type=_csv(str), default="image-text,audio-text",
                     help="trained modality pairs, e.g. image-text,audio-text")
    sub.add_argument("--epochs", type=int, default=200)
    sub.add_argument("--lr", type=float, default=0.1)
    sub.add_argument("--temperature", type=float, default=0.07)
    sub.add_argument("--batch-size", type=int, default=64)
    sub.add_argument("--embed-dim", type=int, default=32)
    sub.add_argument("--hidden-dim", type=int, default=64)

    sub = subs["attack"] = commands.add_parser("attack", help="craft adversarial illusions")
    _common(sub)
    _attack_flags(sub, ["whitebox", "transfer", "query", "hybrid"])
    sub.add_argument("--surrogates", type=_csv(str), default=None, help="surrogate checkpoints (comma-separated)")
    sub.add_argument("--ensemble-mode", choices=[m.value for m in EnsembleMode], default=EnsembleMode.CYCLE.value)
    sub.add_argument("--ensemble-weights", type=_csv(float), default=None)
    sub.add_argument("--limit", type=int, default=None, help="query budget N")
    sub.add_argument("--check-every", type=int, default=None, help="queries between success checks")
    sub.add_argument("--no-early-stop", action="store_true", help="spend the whole query budget")
    sub.add_argument("--literal-objective", action="store_true", help="literal log-sum-exp query objective")
    sub.add_argument("--exclude-true-label", action="store_true")
    sub.add_argument("--endpoint", default=None, help="embedding service URL for query attacks")
    sub.add_argument("--api-key", default=None)

    sub = subs["defend"] = commands.add_parser("defend", help="JPEG-resistant and detector-evading illusions")
    _common(sub)
    _attack_flags(sub, ["resistant", "evasion"])
    sub.add_argument("--quality", type=int, default=75, help="JPEG quality attacked through")
    sub.add_argument("--evasion-mode", choices=[m.value for m in EvasionMode], default=EvasionMode.EOT.value)
    sub.add_argument("--eot-samples", type=int, default=4)
    sub.add_argument("--augs", type=_csv(str), default=None, help="augmentation kinds (all six by default)")

    sub = subs["eval"] = commands.add_parser("eval", help="score attack runs into a CSV report")
    _common(sub)
    sub.add_argument("--data", default=None)
    sub.add_argument("--ckpt", default=None, help="evaluated encoder")
    sub.add_argument("--results", type=_csv(str), default=None, help="attack output directories")
    sub.add_argument("--defense", type=_csv(str), default="none", help="none and/or jpeg<quality>")
    sub.add_argument("--task", choices=["classify", "retrieve"], default="classify")
    sub.add_argument("--detector", action="store_true", help="also write the consistency-detector ROC")
    sub.add_argument("--augs", type=_csv(str), default=None)
    sub.add_argument("--price", type=float, default=None, help="price per query for cost columns")
    sub.add_argument("--out", default=None, help="CSV report file")

    sub = subs["serve"] = commands.add_parser("serve", help="serve an encoder as a metered oracle")
    _common(sub)
    sub.add_argument("--ckpt", default=None)
    sub.add_argument("--host", default=settings.HOST)
    sub.add_argument("--port", type=int, default=settings.PORT)
    sub.add_argument("--price", type=float, default=None)
    sub.add_argument("--database-url", default=None)

    sub = subs["report"] = commands.add_parser("report", help="aggregate tables and trace plots")
    _common(sub)
    sub.add_argument("--report", default=None, help="CSV written by eval")
    sub.add_argument("--results", type=_csv(str), default=None, help="attack directories to plot traces of")
    sub.add_argument("--out", default=None, help="output directory (next to the report by default)")

    return parser, subs


def _load_config(path: str, command: str) -> Dict[str, Any]:
    config_path = Path(path)
    if not config_path.is_file():
        raise FileNotFoundError(f"no such file: {config_path}")
    data = yaml.safe_load(config_path.read_text(encoding="utf-8")) or {}
    if not isinstance(data, dict):
        raise InvalidConfigError(f"{config_path}: expected a mapping of flag names")
    if "subcommand" in data and "config" in data:
        if data["subcommand"] != command:
            raise InvalidConfigError(f"{config_path} is a {data['subcommand']} manifest, not {command}")
        config = dict(data["config"])
        config.setdefault("seed", data.get("seed"))
        data = config
    return {str(key).replace("-", "_"): value for key, value in data.items()}


def parse_args(argv: Optional[Sequence[str]] = None) -> Tuple[argparse.Namespace, int]:
    """Parse flags, fold in ``--config`` and resolve the run seed."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    config_seed = None
    if args.config:
        config = _load_config(args.config, args.command)
        config_seed = config.pop("seed", None)
        unknown = sorted(set(config) - (set(vars(args)) - _NOT_CONFIG))
        if unknown:
            raise InvalidConfigError(f"unknown config keys for {args.command}: {', '.join(unknown)}")
        subs[args.command].set_defaults(**config)
        args = parser.parse_args(argv)
    return args, resolve_seed(args.seed, config_seed)


def _require(args: argparse.Namespace, *names: str) -> None:
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n, None) in (None, "", [])]
    if missing:
        raise InvalidConfigError(f"{args.command} needs {', '.join(missing)}")


# =============================================================================
# Manifests
# =============================================================================

def manifest_path(output) -> Path:
    """Directories hold ``run_manifest.json``; a file ``x`` gets ``x.manifest.json`` beside it."""
    output = Path(output)
    if output.is_dir():
        return output / MANIFEST_FILE
    return output.with_name(output.name + MANIFEST_SUFFIX)


def _config_of(args: argparse.Namespace) -> Dict[str, Any]:
    config = {}
    for key, value in sorted(vars(args).items()):
        if key in _NOT_CONFIG:
            continue
        config[key] = value.value if isinstance(value, Modality) else value
    return config


def write_manifest(args: argparse.Namespace, seed: int, inputs: Sequence, outputs: Sequence, primary) -> Path:
    manifest = RunManifest(
        subcommand=args.command,
        config=_config_of(args),
        seed=seed,
        inputs=[str(p) for p in inputs],
        outputs=[str(p) for p in outputs],
        toolkit_version=settings.APP_VERSION,
    )
    path = manifest_path(primary)
    path.write_text(json.dumps(manifest.model_dump(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info("wrote manifest %s", path)
    return path


# =============================================================================
# Attack settings
# =============================================================================

def resolve_epsilon(modality: Modality, value: Optional[float]) -> Optional[float]:
    """Image budgets are given as integers over 255; audio budgets are raw."""
    if value is None:
        return None
    return value / 255.0 if modality == Modality.IMAGE else float(value)


def resolve_budgets(modality: Modality, eps: Optional[float],
                    sweep: Optional[Sequence[float]] = None) -> List[PerturbationBudget]:
    values = list(sweep) if sweep else [eps]
    return [PerturbationBudget.for_modality(modality, resolve_epsilon(modality, v)) for v in values]


def resolve_attack_config(args: argparse.Namespace, method: AttackMethod) -> AttackConfig:
    fields: Dict[str, Any] = {
        "method": method,
        "iterations": args.iters,
        "step_size": args.step,
        "random_start": args.random_start,
    }
    if args.command == "attack":
        fields.update({
            "ensemble_mode": EnsembleMode(args.ensemble_mode),
            "ensemble_weights": args.ensemble_weights,
            "early_stop": not args.no_early_stop,
            "literal_objective": args.literal_objective,
            "exclude_true_label": args.exclude_true_label,
            "check_every": args.check_every if args.check_every is not None else settings.CHECK_EVERY,
        })
        if args.limit is not None:
            fields["query_limit"] = args.limit
    else:
        fields.update({
            "evasion_mode": EvasionMode(args.evasion_mode),
            "eot_samples": args.eot_samples,
        })
    return AttackConfig(**fields)


def resolve_augmentations(kinds: Optional[Sequence[str]]) -> List[AugmentationSpec]:
    if not kinds:
        return list(DEFAULT_AUGMENTATIONS)
    try:
        return [AugmentationSpec(kind=AugmentationKind(k.upper()), seed=i) for i, k in enumerate(kinds)]
    except ValueError as exc:
        raise InvalidConfigError(f"unknown augmentation in {list(kinds)}: {exc}") from None


# =============================================================================
# Subcommands
# =============================================================================

def _cmd_gen_data(args: argparse.Namespace, seed: int) -> int:
    _require(args, "out")
    ds = gen_dataset(args.classes, args.per_class, seed, args.noise)
    save_dataset(ds, args.out)
    write_manifest(args, seed, [], [args.out], args.out)
    return 0


def _pair_modalities(spec: str) -> Tuple[Modality, Modality]:
    parts = spec.split("-")
    if len(parts) != 2:
        raise InvalidConfigError(f"pair {spec!r} is not of the form first-second")
    try:
        return Modality(parts[0].upper()), Modality(parts[1].upper())
    except ValueError:
        raise UnsupportedModalityError(f"unknown modality in pair {spec!r}") from None


def _cmd_train(args: argparse.Namespace, seed: int) -> int:
    _require(args, "data", "out")
    ds = load_dataset(args.data)
    train, held = split_indices(len(ds))
    pair_kinds = [_pair_modalities(p) for p in args.pairs]
    pairs = [natural_pairs(ds, a, b, train) for a, b in pair_kinds]
    ckpt = train_contrastive(pairs, epochs=args.epochs, temperature=args.temperature, lr=args.lr, seed=seed,
                             embed_dim=args.embed_dim, hidden_dim=args.hidden_dim, batch_size=args.batch_size)
    for a, b in pair_kinds:
        logger.info("held-out %s-%s alignment %.4f", a.value, b.value, alignment(ckpt, natural_pairs(ds, a, b, held)))
    save_checkpoint(ckpt, args.out)
    write_manifest(args, seed, [args.data], [args.out], args.out)
    return 0


def _run_batch(args: argparse.Namespace, seed: int, method: AttackMethod, **runner_kwargs) -> int:
    ds = load_dataset(args.data)
    source, target = Modality(args.source), Modality(args.target)
    ckpt = load_checkpoint(args.ckpt) if args.ckpt else None
    jobs = build_jobs(ds, source, target, seed, args.count)
    labels = label_set_for(ckpt, ds, target) if ckpt is not None and method in QUERY_BASED else None
    cfg = resolve_attack_config(args, method)

    all_jobs, results = [], []
    for budget in resolve_budgets(source, args.eps, args.eps_sweep):
        runner = attack_runner(method, budget, cfg, ckpt=ckpt, labels=labels, **runner_kwargs)
        results.extend(run_attacks(jobs, runner, seed, workers=args.workers, progress=args.progress))
        all_jobs.extend(jobs)
    outputs = results_service.save_run(all_jobs, results, args.out)
    inputs = [args.data] + ([args.ckpt] if args.ckpt else []) + list(getattr(args, "surrogates", None) or [])
    write_manifest(args, seed, inputs, outputs, args.out)
    return 0


def _cmd_attack(args: argparse.Namespace, seed: int) -> int:
    _require(args, "data", "out")
    method = AttackMethod(args.method.upper())
    if method == AttackMethod.WHITEBOX:
        _require(args, "ckpt")
    if method in (AttackMethod.TRANSFER, AttackMethod.HYBRID):
        _require(args, "surrogates")
    surrogates = [load_checkpoint(p) for p in args.surrogates or []]

    oracle = None
    if method in QUERY_BASED:
        if args.endpoint:
            oracle = remote_oracle(args.endpoint, args.api_key)
        else:
            _require(args, "ckpt")
            oracle = LocalOracle(load_checkpoint(args.ckpt))
    try:
        return _run_batch(args, seed, method, surrogates=surrogates, oracle=oracle)
    finally:
        if hasattr(oracle, "close"):
            oracle.close()


def _cmd_defend(args: argparse.Namespace, seed: int) -> int:
    _require(args, "data", "ckpt", "out")
    method = AttackMethod(args.method.upper())
    return _run_batch(args, seed, method, augs=resolve_augmentations(args.augs), jpeg=JpegConfig(quality=args.quality))


def _write_roc(ckpt, jobs, results, augs, report_path: Path) -> List[Path]:
    pairs = [(job, result) for job, result in zip(jobs, results) if result.modality == Modality.IMAGE]
    if not pairs:
        raise UnsupportedModalityError("the consistency detector needs IMAGE attack results")
    clean = [consistency_score(job.source, ckpt, augs).mean for job, _ in pairs]
    adversarial = [consistency_score(result.adversarial_sample(), ckpt, augs).mean for _, result in pairs]
    curve = detector_roc(clean, adversarial)
    logger.info("detector AUC %.4f over %d clean / %d adversarial inputs", curve.auc, len(clean), len(adversarial))
    roc_json = report_path.with_name(report_path.stem + ".roc.json")
    roc_json.write_text(json.dumps(curve.model_dump(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    roc_svg = plot_service.plot_roc(curve, report_path.with_name(report_path.stem + ".roc.svg"))
    return [roc_json, roc_svg]


def _cmd_eval(args: argparse.Namespace, seed: int) -> int:
    _require(args, "data", "ckpt", "results", "out")
    ds = load_dataset(args.data)
    ckpt = load_checkpoint(args.ckpt)
    augs = resolve_augmentations(args.augs)
    report_path = Path(args.out)
    report_path.parent.mkdir(parents=True, exist_ok=True)

    rows, all_jobs, all_results = [], [], []
    for run_dir in args.results:
        jobs, results = results_service.load_run(run_dir, ds)
        for defense in args.defense:
            rows.extend(evaluate(jobs, results, ckpt, ds, defense=defense, task=args.task))
        all_jobs.extend(jobs)
        all_results.extend(results)

    price = settings.PRICE_PER_QUERY if args.price is None else args.price
    outputs = [report_service.emit_report(EvalReport(rows=rows, price_per_query=price), report_path),
               report_service.summary_path(report_path)]
    if args.detector:
        outputs.extend(_write_roc(ckpt, all_jobs, all_results, augs, report_path))
    write_manifest(args, seed, [args.data, args.ckpt, *args.results], outputs, report_path)
    return 0


def _cmd_serve(args: argparse.Namespace, seed: int) -> int:
    _require(args, "ckpt")
    from app.main import serve

    serve(load_checkpoint(args.ckpt), host=args.host, port=args.port, price_per_query=args.price,
          database_url=args.database_url)
    return 0


def _cmd_report(args: argparse.Namespace, seed: int) -> int:
    _require(args, "report")
    report_path = Path(args.report)
    out_dir = Path(args.out) if args.out else report_path.parent
    out_dir.mkdir(parents=True, exist_ok=True)

    table = report_service.format_table(report_service.aggregate(report_service.load_report(report_path)))
    print(table)
    table_path = out_dir / f"{report_path.stem}.table.txt"
    table_path.write_text(table + "\n", encoding="utf-8")
    outputs = [table_path]
    if args.results:
        results = [r for run_dir in args.results for r in results_service.load_results(run_dir)]
        outputs.append(plot_service.plot_traces(results, out_dir / f"{report_path.stem}.traces.svg"))
    write_manifest(args, seed, [args.report, *(args.results or [])], outputs, out_dir)
    return 0


COMMANDS: Dict[str, Callable[[argparse.Namespace, int], int]] = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "attack": _cmd_attack,
    "defend": _cmd_defend,
    "eval": _cmd_eval,
    "serve": _cmd_serve,
    "report": _cmd_report,
}


def _configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else settings.LOG_LEVEL,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Exit code 0 on success, 2 on usage errors, 1 on runtime or missing-file errors."""
    try:
        args, seed = parse_args(argv)
        _configure_logging(args.verbose)
        return COMMANDS[args.command](args, seed)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    except FileNotFoundError as exc:
        logger.error("%s", exc)
        return 1
    except (InvalidConfigError, UnsupportedModalityError) as exc:
        logger.error("%s", exc)
        return 2
    except (IllusionError, OSError) as exc:
        logger.error("%s", exc)
        return 1
    except ValueError as exc:
        logger.error("invalid value: %s", exc)
        return 2


def main() -> None:
    sys.exit(run())
