"""
Command-line entry point.

    mpbm train  --config training_configs/blobs_rotated.json --seed 7
    mpbm ablate --config training_configs/blobs_rotated.json --seeds 0 1 2 3 4 --workers 5
    mpbm sweep  --config training_configs/mnist_usps.json --param lambda_adv --values 0.1 0.5 0.9 --domain usps
    mpbm eval   --checkpoint runs/mnist_usps_mpbm_seed0 --manifest manifests/digits.json

Exit codes: 0 success, 2 config error, 3 training aborted, 4 architecture mismatch.
"""
import os
import json
import argparse
import dataclasses
from concurrent.futures import ProcessPoolExecutor

import yaml
import pandas as pd
import torch

from loguru import logger

from mpbm import args_utils, trainer
from mpbm.args_utils import ConfigError, RunConfig
from mpbm.data import ManifestError, load_manifest
from mpbm.modeling import ArchitectureMismatch, CheckpointError, check_architecture, load_model, read_metadata, resolve_architecture
from mpbm.training_utils import resolve_checkpoint


EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ABORT = 3
EXIT_MISMATCH = 4

ABLATIONS = {
    "full": {},
    "no_mix_tr": {"no_mix_tr": True},
    "no_adv": {"no_adv": True},
    "no_mix_gen": {"no_mix_gen": True},
    "no_sgld": {"no_sgld": True},
}
SWEEP_PARAMS = {"lambda_adv": "lambda_adv", "lambda_mix": "lambda_mix", "T": "sgld_steps", "N_b": "n_b"}


def parse_args(args=None):
    parser = argparse.ArgumentParser(prog="mpbm", description="Model-aware parametric batch-wise mixup experiments")
    subparsers = parser.add_subparsers(dest="command", required=True)

    def add_run_arguments(p):
        p.add_argument("--config", type=str, required=True, help="Path to a JSON (or yaml) run config")
        p.add_argument("--override", type=str, nargs="*", default=[], metavar="KEY=VALUE",
                       help="Override config fields, e.g. --override lambda_adv=0 epochs=5")
        p.add_argument("--output_dir", type=str, default=None,
                       help="Run directory (or root directory for ablate/sweep). Defaults to $MPBM_OUT_DIR/<run name>")
        p.add_argument("--workers", type=int, default=1, help="Parallel processes for independent runs")

    train = subparsers.add_parser("train", help="Pretrain and run the augmentation loop")
    add_run_arguments(train)
    train.add_argument("--seed", type=int, default=None)

    ablate = subparsers.add_parser("ablate", help="Run the full model and the four ablated variants")
    add_run_arguments(ablate)
    ablate.add_argument("--seeds", type=int, nargs="+", default=None)

    sweep = subparsers.add_parser("sweep", help="Sensitivity sweep over one hyperparameter")
    add_run_arguments(sweep)
    sweep.add_argument("--param", type=str, required=True, choices=list(SWEEP_PARAMS))
    sweep.add_argument("--values", type=str, nargs="+", required=True)
    sweep.add_argument("--seeds", type=int, nargs="+", default=None)
    sweep.add_argument("--domain", type=str, default=None,
                       help="Report this domain's accuracy instead of the mean target accuracy")

    evaluate = subparsers.add_parser("eval", help="Evaluate checkpoints on every domain of a manifest")
    evaluate.add_argument("--checkpoint", type=str, nargs="+", required=True,
                          help="Checkpoint directories, run directories or model.safetensors files (one per seed)")
    evaluate.add_argument("--manifest", type=str, required=True)
    evaluate.add_argument("--architecture", type=str, default=None,
                          help="Expected architecture (built-in name or JSON file); checkpoints that differ are refused")
    evaluate.add_argument("--batch_size", type=int, default=256)
    evaluate.add_argument("--output_dir", type=str, default=None)

    return parser.parse_args(args)


def log_config(cfg: RunConfig):
    logger.info("*" * 40)
    logger.info(f"Starting training with the arguments")
    for k, v in dataclasses.asdict(cfg).items():
        logger.info(f"{k:30} {v}")
    logger.info("*" * 40)


def target_accuracy(accuracies: dict, domain: str = None) -> float:
    if domain is not None:
        if domain not in accuracies:
            raise ConfigError(f"--domain {domain} is not one of the evaluated domains {list(accuracies)}")
        return accuracies[domain]
    targets = [acc for name, acc in accuracies.items() if name != "source"] or [accuracies["source"]]
    return sum(targets) / len(targets)


def run_single(cfg: RunConfig, output_dir: str) -> dict:
    """One fully resolved run in `output_dir`. Returns the final accuracy per domain."""
    torch.use_deterministic_algorithms(True)
    os.makedirs(output_dir, exist_ok=True)
    sink = logger.add(os.path.join(output_dir, "train.log"), encoding="utf-8", mode="w")
    try:
        suite = load_manifest(cfg.manifest)
        cfg = args_utils.resolve_dataset_defaults(cfg, len(suite.source))
        cfg = dataclasses.replace(cfg, output_dir=output_dir)
        arch = resolve_architecture(cfg.architecture)
        if arch.input_shape != suite.source.input_shape or arch.num_classes != suite.source.num_classes:
            raise ConfigError(
                f"field architecture {cfg.architecture} expects inputs {arch.input_shape} and {arch.num_classes} classes, "
                f"manifest {cfg.manifest} provides {suite.source.input_shape} and {suite.source.num_classes}"
            )

        log_config(cfg)
        with open(os.path.join(output_dir, "training_config.json"), "w", encoding="utf-8") as f:
            json.dump(dataclasses.asdict(cfg), f, indent=4)

        result = trainer.run(cfg.train_config(), suite.source, arch=arch, eval_sets=suite.eval_sets, output_dir=output_dir)
        if result.trace:
            accuracies = result.trace[-1]["eval"]
        else:
            accuracies = trainer.evaluate_domains(result.model, suite.eval_sets, cfg.eval_batch_size)

        results = pd.DataFrame(
            [{"seed": cfg.seed, "method": cfg.method, "domain": k, "accuracy": v} for k, v in accuracies.items()]
        )
        results.to_csv(os.path.join(output_dir, "results.csv"), index=False, encoding="utf-8")
        logger.info(f"Final accuracies: {accuracies}")
        return accuracies
    finally:
        logger.remove(sink)


def _run_many(jobs, workers: int):
    """jobs: list of (key, cfg, output_dir). Returns {key: accuracies} in job order."""
    if workers <= 1:
        return {key: run_single(cfg, output_dir) for key, cfg, output_dir in jobs}
    with ProcessPoolExecutor(max_workers=workers) as executor:
        futures = {key: executor.submit(run_single, cfg, output_dir) for key, cfg, output_dir in jobs}
        return {key: future.result() for key, future in futures.items()}


def _load_run_config(args) -> RunConfig:
    cfg = args_utils.load_config(args.config)
    cfg = args_utils.apply_overrides(cfg, args.override)
    return args_utils.check_run_config(cfg, source=args.config)


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    output_dir = args.output_dir or args_utils.default_output_dir(cfg, args.config)
    run_single(cfg, output_dir)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load_run_config(args)
    if cfg.method != "mpbm":
        raise ConfigError(f"{args.config}: ablations need method mpbm, got {cfg.method}")
    seeds = args.seeds or [cfg.seed]
    root = args.output_dir or args_utils.default_output_dir(dataclasses.replace(cfg, run_name=None), args.config) + "_ablation"

    jobs = []
    for variant, flags in ABLATIONS.items():
        for seed in seeds:
            variant_cfg = dataclasses.replace(cfg, seed=seed, run_name=f"{variant}_seed{seed}", **flags)
            jobs.append(((variant, seed), variant_cfg, os.path.join(root, f"{variant}_seed{seed}")))
    accuracies = _run_many(jobs, args.workers)

    rows = [
        {"variant": variant, "seed": seed, "domain": domain, "accuracy": acc}
        for (variant, seed), per_domain in accuracies.items()
        for domain, acc in per_domain.items()
    ]
    rows += [
        {"variant": variant, "seed": seed, "domain": "target-mean", "accuracy": target_accuracy(per_domain)}
        for (variant, seed), per_domain in accuracies.items()
    ]
    df = pd.DataFrame(rows)
    df.to_csv(os.path.join(root, "ablation.csv"), index=False, encoding="utf-8")

    summary = df.groupby(["variant", "domain"], sort=False)["accuracy"].agg(["mean", "std"]).reset_index()
    summary.to_csv(os.path.join(root, "ablation_summary.csv"), index=False, encoding="utf-8")
    logger.info(f"Ablation summary:\n{summary.to_string(index=False)}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load_run_config(args)
    field = SWEEP_PARAMS[args.param]
    seeds = args.seeds or [cfg.seed]
    values = [args_utils.coerce_fields({field: yaml.safe_load(v)}, f"--values {v}")[field] for v in args.values]
    root = args.output_dir or args_utils.default_output_dir(dataclasses.replace(cfg, run_name=None), args.config) + f"_sweep_{args.param}"

    jobs = []
    for value in values:
        for seed in seeds:
            run_cfg = args_utils.check_run_config(
                dataclasses.replace(cfg, seed=seed, run_name=f"{args.param}{value}_seed{seed}", **{field: value}),
                source=f"--values {value}",
            )
            jobs.append(((value, seed), run_cfg, os.path.join(root, f"{args.param}{value}_seed{seed}")))
    accuracies = _run_many(jobs, args.workers)

    df = pd.DataFrame([
        {"param": args.param, "value": value, "seed": seed, "accuracy": target_accuracy(per_domain, args.domain)}
        for (value, seed), per_domain in accuracies.items()
    ])
    df.to_csv(os.path.join(root, "sweep.csv"), index=False, encoding="utf-8")
    logger.info(f"Sweep results:\n{df.groupby('value')['accuracy'].agg(['mean', 'std']).to_string()}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if not os.path.exists(args.manifest):
        raise ConfigError(f"--manifest {args.manifest} does not exist")
    suite = load_manifest(args.manifest)
    expected = resolve_architecture(args.architecture) if args.architecture is not None else None

    rows = []
    for checkpoint in args.checkpoint:
        path = resolve_checkpoint(checkpoint)
        metadata = read_metadata(path)
        if "architecture" not in metadata:
            raise CheckpointError(f"--checkpoint {path} has no architecture metadata")
        if expected is not None:
            check_architecture(expected, metadata["architecture"])
        model = load_model(path)
        if model.arch.input_shape != suite.source.input_shape or model.arch.num_classes != suite.source.num_classes:
            raise ArchitectureMismatch(
                f"Checkpoint {path} does not fit manifest {args.manifest}.\n"
                f"  checkpoint: {json.dumps(model.arch.to_dict(), sort_keys=True)}\n"
                f"  manifest:   input_shape={suite.source.input_shape}, num_classes={suite.source.num_classes}"
            )
        for domain, acc in trainer.evaluate_domains(model, suite.eval_sets, args.batch_size).items():
            rows.append({"checkpoint": checkpoint, "seed": metadata.get("seed"), "domain": domain, "accuracy": acc})

    df = pd.DataFrame(rows)
    stats = df.groupby("domain", sort=False)["accuracy"].agg(["mean", "std"])
    summary_rows = [
        {"checkpoint": "", "seed": stat, "domain": domain, "accuracy": stats.loc[domain, stat]}
        for stat in ("mean", "std")
        for domain in stats.index
    ]
    df = pd.concat([df, pd.DataFrame(summary_rows)], ignore_index=True)

    output_dir = args.output_dir or os.path.join(os.environ.get("MPBM_OUT_DIR", "runs"), "eval")
    os.makedirs(output_dir, exist_ok=True)
    df.to_csv(os.path.join(output_dir, "eval.csv"), index=False, encoding="utf-8")
    logger.info(f"Evaluation:\n{df.to_string(index=False)}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "eval": cmd_eval,
}


def main(args=None) -> int:
    args = parse_args(args)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ManifestError, CheckpointError) as e:
        logger.error(f"Config error: {e}")
        return EXIT_CONFIG
    except trainer.TrainingAborted as e:
        logger.error(f"Training aborted: {e}")
        return EXIT_ABORT
    except ArchitectureMismatch as e:
        logger.error(str(e))
        return EXIT_MISMATCH
