import os
import typing
import dataclasses
from dataclasses import dataclass, fields
from typing import Optional

import yaml

from loguru import logger

from mpbm.modeling import BUILTIN_ARCHITECTURES
from mpbm.trainer import METHODS, TrainConfig


OPTIMIZERS = ("rmsprop", "adam")
MIX_BATCHES = ("sample", "full")
WANDB_MODES = ("online", "offline", "disabled")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig(TrainConfig):
    manifest: Optional[str] = None
    architecture: str = "lenet-small"
    output_dir: Optional[str] = None
    run_name: Optional[str] = None

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{f.name: getattr(self, f.name) for f in fields(TrainConfig)})


def _coerce(name, value, hint, source):
    if typing.get_origin(hint) is typing.Union:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if value is None:
            return None
        hint = args[0]

    if hint is bool and isinstance(value, bool):
        return value
    if hint is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if hint is float and not isinstance(value, bool):
        # yaml reads 1e-4 (no dot) as a string
        try:
            return float(value)
        except (TypeError, ValueError):
            pass
    if hint is str and isinstance(value, str):
        return value
    if (hint is list or typing.get_origin(hint) is list) and isinstance(value, (list, tuple)):
        return list(value)
    raise ConfigError(f"{source}: field {name} expects {getattr(hint, '__name__', hint)}, got {value!r}")


def coerce_fields(raw: dict, source: str) -> dict:
    hints = typing.get_type_hints(RunConfig)
    coerced = {}
    for name, value in raw.items():
        if name not in hints:
            raise ConfigError(f"{source}: unknown field {name}")
        coerced[name] = _coerce(name, value, hints[name], source)
    return coerced


def load_config(path) -> RunConfig:
    if not os.path.exists(path):
        raise ConfigError(f"{path}: config file does not exist")
    with open(path, encoding="utf-8") as f:
        try:
            raw = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: cannot parse config: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a mapping of field names to values")
    return RunConfig(**coerce_fields(raw, str(path)))


def parse_overrides(overrides) -> dict:
    parsed = {}
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--override {item}: expected key=value")
        key, value = item.split("=", 1)
        parsed[key.strip()] = yaml.safe_load(value)
    return coerce_fields(parsed, "--override")


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    parsed = parse_overrides(overrides)
    for k, v in parsed.items():
        logger.info(f"Override {k}: {getattr(cfg, k)} -> {v}")
    return dataclasses.replace(cfg, **parsed)


def check_run_config(cfg: RunConfig, source: str = "config") -> RunConfig:
    """Cross-field validation and derived defaults. Returns the resolved config."""
    if cfg.manifest is None:
        raise ConfigError(f"{source}: field manifest is required")
    if not os.path.exists(cfg.manifest):
        raise ConfigError(f"{source}: field manifest points to {cfg.manifest}, which does not exist")

    if cfg.architecture not in BUILTIN_ARCHITECTURES and not os.path.exists(cfg.architecture):
        raise ConfigError(f"{source}: field architecture {cfg.architecture} is neither a built-in name nor an existing file")

    if cfg.method not in METHODS:
        raise ConfigError(f"{source}: field method must be one of {METHODS}, got {cfg.method}")
    if cfg.optimizer.lower() not in OPTIMIZERS:
        raise ConfigError(f"{source}: field optimizer must be one of {OPTIMIZERS}, got {cfg.optimizer}")
    if cfg.mix_batch not in MIX_BATCHES:
        raise ConfigError(f"{source}: field mix_batch must be one of {MIX_BATCHES}, got {cfg.mix_batch}")
    if cfg.wandb_mode not in WANDB_MODES:
        raise ConfigError(f"{source}: field wandb_mode must be one of {WANDB_MODES}, got {cfg.wandb_mode}")

    for name in ("batch_size", "n_b", "eval_batch_size"):
        if getattr(cfg, name) < 1:
            raise ConfigError(f"{source}: field {name} must be positive, got {getattr(cfg, name)}")
    for name in ("epochs", "generator_iters", "outer_iters", "finetune_iters", "queries_per_outer", "pretrain_epochs"):
        value = getattr(cfg, name)
        if value is not None and value < 0:
            raise ConfigError(f"{source}: field {name} must be non-negative, got {value}")
    for name in ("lambda_adv", "lambda_mix", "lr", "generator_lr", "discriminator_lr", "sgld_eta", "mixup_alpha"):
        if getattr(cfg, name) < 0:
            raise ConfigError(f"{source}: field {name} must be non-negative, got {getattr(cfg, name)}")
    if not 0 < cfg.lr_decay_factor <= 1:
        raise ConfigError(f"{source}: field lr_decay_factor must be in (0, 1], got {cfg.lr_decay_factor}")
    if cfg.method == "mixup" and cfg.mixup_alpha == 0:
        raise ConfigError(f"{source}: field mixup_alpha must be positive for method mixup")

    if cfg.input_clamp is not None:
        if len(cfg.input_clamp) != 2 or cfg.input_clamp[0] >= cfg.input_clamp[1]:
            raise ConfigError(f"{source}: field input_clamp must be [low, high] with low < high, got {cfg.input_clamp}")
    if cfg.sgld_steps < 1 and not cfg.no_sgld:
        raise ConfigError(f"{source}: field sgld_steps must be positive unless no_sgld is set, got {cfg.sgld_steps}")

    if cfg.method != "mpbm" and any((cfg.no_mix_tr, cfg.no_adv, cfg.no_mix_gen, cfg.no_sgld)):
        logger.warning(f"Ablation flags have no effect with method={cfg.method}")
    if cfg.method == "mpbm" and cfg.no_mix_gen and (cfg.no_adv or cfg.lambda_adv == 0):
        logger.warning("Both generator objectives are disabled, the generator keeps its initial weights")
    if cfg.method == "mpbm" and cfg.effective_lambda_mix == 0:
        logger.warning("lambda_mix is 0, the generated store is never used for fine-tuning")

    derived = {}
    if cfg.outer_iters is None:
        derived["outer_iters"] = cfg.epochs
    if cfg.pretrain_epochs is None:
        derived["pretrain_epochs"] = cfg.epochs
    if cfg.queries_per_outer is None:
        derived["queries_per_outer"] = cfg.batch_size
    if cfg.queries_per_outer == 0:
        raise ConfigError(f"{source}: field queries_per_outer must be positive")
    for k, v in derived.items():
        logger.info(f"{k} not set, using {v}")

    return dataclasses.replace(cfg, **derived)


def resolve_dataset_defaults(cfg: RunConfig, num_examples: int) -> RunConfig:
    """Defaults that depend on the training set size; n_b is checked against it as well."""
    if cfg.n_b > num_examples:
        raise ConfigError(f"field n_b={cfg.n_b} exceeds the {num_examples} training examples")
    if cfg.finetune_iters is None:
        finetune_iters = cfg.finetune_steps(num_examples)
        logger.info(f"finetune_iters not set, using one pass over the data: {finetune_iters}")
        return dataclasses.replace(cfg, finetune_iters=finetune_iters)
    return cfg


def default_output_dir(cfg: RunConfig, config_path: Optional[str] = None) -> str:
    if cfg.output_dir is not None:
        return cfg.output_dir
    run_name = cfg.run_name
    if run_name is None:
        stem = os.path.splitext(os.path.basename(config_path))[0] if config_path else "run"
        run_name = f"{stem}_{cfg.method}_seed{cfg.seed}"
    return os.path.join(os.environ.get("MPBM_OUT_DIR", "runs"), run_name)
