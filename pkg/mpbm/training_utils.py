import os
import json
import shutil
from functools import partial

import torch
from torch.optim.lr_scheduler import LambdaLR

from loguru import logger

from mpbm.modeling import CheckpointError, save_parameters


def get_optimizer(params, *, optimizer_type: str, lr: float):
    if optimizer_type.lower() == "rmsprop":
        # adaptive and momentum-free
        return torch.optim.RMSprop(params, lr=lr, momentum=0.0)
    if optimizer_type.lower() == "adam":
        return torch.optim.Adam(params, lr=lr)
    raise ValueError(f"Optimizer {optimizer_type} not supported")


def get_scheduler(optimizer, *, num_steps: int, decay_factor: float = 0.1, decay_at: float = 0.5, last_epoch=-1):
    """Constant learning rate, multiplied by `decay_factor` once `decay_at` of the steps are done."""
    assert 0 < decay_factor <= 1.0, "decay_factor must be in (0,1]"
    lr_lambda = partial(
        _get_step_decay_lambda,
        decay_step=int(num_steps * decay_at),
        decay_factor=decay_factor,
    )
    return LambdaLR(optimizer, lr_lambda, last_epoch)


def _get_step_decay_lambda(current_step, *, decay_step, decay_factor):
    if decay_step > 0 and current_step >= decay_step:
        return decay_factor
    return 1.0


def snapshot(module: torch.nn.Module) -> dict:
    return {name: t.detach().clone() for name, t in module.state_dict().items()}


def save_checkpoint(save_dir, *, model, generator=None, discriminator=None, optimizers=None, training_state, metadata):
    """
    Layout of a checkpoint directory:
        model.safetensors, generator.safetensors, discriminator.safetensors
        optimizer.pt          optimizer and scheduler states
        training_state.json   outer_iter, global_step, store_size, seed
    """
    os.makedirs(save_dir, exist_ok=True)
    metadata = {**metadata, "step": training_state.get("global_step", 0)}
    save_parameters(model, os.path.join(save_dir, "model.safetensors"), metadata={**metadata, "architecture": model.arch.to_dict()})
    if generator is not None:
        save_parameters(generator, os.path.join(save_dir, "generator.safetensors"), metadata=metadata)
    if discriminator is not None:
        save_parameters(discriminator, os.path.join(save_dir, "discriminator.safetensors"), metadata=metadata)
    if optimizers:
        torch.save({name: opt.state_dict() for name, opt in optimizers.items()}, os.path.join(save_dir, "optimizer.pt"))

    with open(os.path.join(save_dir, "training_state.json"), "w") as f:
        json.dump(training_state, f, indent=4)
    logger.info(f"Saved checkpoint to {save_dir}")


def get_last_training_state(save_dir):
    # find the checkpoint with the highest outer iteration "{save_dir}/model_{outer_iter}"
    model_dirs = [d for d in os.listdir(save_dir) if d.startswith("model_")]
    if len(model_dirs) == 0:
        logger.warning(f"Directory {save_dir} does not contain any checkpoints.")
        return None, None

    model_dirs = sorted(model_dirs, key=lambda x: int(x.split("_")[-1]))
    resume_from = os.path.join(save_dir, model_dirs[-1])

    with open(os.path.join(resume_from, "training_state.json")) as f:
        training_state = json.load(f)

    return training_state, resume_from


def resolve_checkpoint(path):
    """Accepts a checkpoint directory, a run directory or a model.safetensors file."""
    if not os.path.exists(path):
        raise CheckpointError(f"Checkpoint {path} does not exist")
    if os.path.isfile(path):
        return path
    if os.path.exists(os.path.join(path, "model.safetensors")):
        return os.path.join(path, "model.safetensors")
    _, checkpoint_dir = get_last_training_state(path)
    if checkpoint_dir is None:
        raise CheckpointError(f"No checkpoint found in {path}")
    return os.path.join(checkpoint_dir, "model.safetensors")


def delete_old_checkpoints(save_dir, keep):
    if keep is None:
        return

    checkpoints = [d for d in os.listdir(save_dir) if d.startswith("model_")]
    if len(checkpoints) <= keep:
        return

    checkpoints = sorted(checkpoints, key=lambda x: int(x.split("_")[-1]))
    for checkpoint in checkpoints[:-keep]:
        checkpoint_path = os.path.join(save_dir, checkpoint)
        logger.info(f"Deleting checkpoint {checkpoint_path}")
        shutil.rmtree(checkpoint_path)


def append_jsonl(path, record: dict):
    with open(path, "a", encoding="utf-8") as f:
        f.write(json.dumps(record, sort_keys=False) + "\n")
