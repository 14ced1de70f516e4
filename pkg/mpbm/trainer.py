"""
Progressive augmentation training:

    pretrain f, h on D
    for each outer iteration:
        freeze f, h; recompute the correlation matrix C from training features
        build m adversarial queries with SGLD and sample m base batches
        J alternating steps: discriminator ascent on L_adv, generator descent on L_mix_gen + lambda_adv * L_adv
        freeze g, D; append m generated (z_mix, y_mix) pairs to D_mix
        fine-tune f, h on L_sup + lambda_mix * L_mix_tr
"""
import os
import copy
from functools import partial
from dataclasses import dataclass, field, asdict
from typing import Optional

import torch
from safetensors.torch import save_file
from tqdm import tqdm
import wandb

from loguru import logger

from mpbm import training_utils
from mpbm.baselines import PairwiseMixup
from mpbm.correlation import compute_correlation
from mpbm.data import Dataset, make_loader
from mpbm.mixgen import MixupGenerator, MixupSample, generate, sample_base_batches
from mpbm.modeling import (
    ArchitectureConfig,
    Discriminator,
    PredictionModel,
    build_discriminator,
    build_model,
    classify,
    discriminate,
    evaluate,
    extract,
)
from mpbm.numerics import cross_entropy, derive_seed, make_generator
from mpbm.query import SgldConfig, sgld_query


METHODS = ("mpbm", "erm", "mixup")

# keys of the independent random streams derived from the run seed
INIT_STREAM = 0
PRETRAIN_STREAM = 1
QUERY_STREAM = 2
BASE_STREAM = 3
STORE_STREAM = 4
FINETUNE_STREAM = 5
CORRELATION_STREAM = 6
REAL_STREAM = 7
MIXUP_STREAM = 8


class TrainingAborted(RuntimeError):
    def __init__(self, message, *, phase: str, step: int, last_loss: Optional[float] = None):
        super().__init__(f"{message} (phase={phase}, step={step}, last finite loss={last_loss})")
        self.reason = message
        self.phase = phase
        self.step = step
        self.last_loss = last_loss

    def __reduce__(self):
        # picklable across the sweep process pool
        return partial(TrainingAborted, phase=self.phase, step=self.step, last_loss=self.last_loss), (self.reason,)


@dataclass
class TrainConfig:
    lambda_adv: float = 0.5
    lambda_mix: float = 0.5
    n_b: int = 5
    sgld_steps: int = 5
    outer_iters: Optional[int] = None  # defaults to epochs
    generator_iters: int = 20
    finetune_iters: Optional[int] = None  # defaults to one pass over the training set
    queries_per_outer: Optional[int] = None  # defaults to batch_size
    batch_size: int = 32
    epochs: int = 50
    pretrain_epochs: Optional[int] = None  # defaults to epochs
    lr: float = 1e-4
    seed: int = 0

    method: str = "mpbm"
    optimizer: str = "rmsprop"
    generator_lr: float = 1e-3
    discriminator_lr: float = 1e-3
    lr_decay_factor: float = 0.1
    label_softmax: bool = True
    mix_batch: str = "sample"
    sgld_eta: float = 0.01
    sgld_noise_scale: Optional[float] = None
    input_clamp: Optional[list] = field(default_factory=lambda: [0.0, 1.0])
    correlation_max_rows: Optional[int] = 10_000
    mixup_alpha: float = 1.0
    eval_batch_size: int = 256
    save_every: Optional[int] = None
    keep_checkpoints: Optional[int] = None
    wandb_mode: str = "disabled"

    no_mix_tr: bool = False
    no_adv: bool = False
    no_mix_gen: bool = False
    no_sgld: bool = False

    @property
    def num_outer_iters(self) -> int:
        return self.epochs if self.outer_iters is None else self.outer_iters

    @property
    def num_pretrain_epochs(self) -> int:
        return self.epochs if self.pretrain_epochs is None else self.pretrain_epochs

    @property
    def num_queries(self) -> int:
        return self.batch_size if self.queries_per_outer is None else self.queries_per_outer

    @property
    def effective_lambda_adv(self) -> float:
        return 0.0 if self.no_adv else self.lambda_adv

    @property
    def effective_lambda_mix(self) -> float:
        return 0.0 if self.no_mix_tr else self.lambda_mix

    def finetune_steps(self, num_examples: int) -> int:
        if self.finetune_iters is not None:
            return self.finetune_iters
        return -(-num_examples // self.batch_size)

    def sgld_config(self) -> SgldConfig:
        return SgldConfig(
            steps=self.sgld_steps,
            eta=self.sgld_eta,
            noise_scale=self.sgld_noise_scale,
            clamp=self.input_clamp,
            seed=self.seed,
        )

    def to_dict(self):
        return asdict(self)


class AugmentStore:
    """
    Append-only D_mix. Stored pairs are frozen values with (outer_iter, query_id) provenance;
    `rollback` only discards the pairs of an aborted outer iteration.
    """

    def __init__(self):
        self._z = []
        self._y = []
        self._chunk_iters = []
        self._provenance = []
        self._cache = None

    def __len__(self):
        return len(self._provenance)

    def extend(self, z_mix: torch.Tensor, y_mix: torch.Tensor, outer_iter: int):
        if len(z_mix) != len(y_mix):
            raise ValueError(f"{len(z_mix)} features but {len(y_mix)} labels")
        z = z_mix.detach().clone()
        y = y_mix.detach().clone()
        self._z.append(z)
        self._y.append(y)
        self._chunk_iters.append(outer_iter)
        self._provenance += [(outer_iter, query_id) for query_id in range(len(z))]
        self._cache = None

    def rollback(self, outer_iter: int):
        """Drops every pair generated after `outer_iter`."""
        keep = [i for i, it in enumerate(self._chunk_iters) if it <= outer_iter]
        self._z = [self._z[i] for i in keep]
        self._y = [self._y[i] for i in keep]
        self._chunk_iters = [self._chunk_iters[i] for i in keep]
        self._provenance = [p for p in self._provenance if p[0] <= outer_iter]
        self._cache = None

    def tensors(self):
        if self._cache is None:
            self._cache = (torch.cat(self._z), torch.cat(self._y))
        return self._cache

    @property
    def provenance(self):
        return list(self._provenance)

    def sample(self, k: int, generator: torch.Generator):
        z, y = self.tensors()
        if k >= len(self):
            return z, y
        index = torch.randperm(len(self), generator=generator)[:k]
        return z[index], y[index]

    def save(self, path):
        if len(self) == 0:
            return
        z, y = self.tensors()
        save_file(
            {"z_mix": z.contiguous(), "y_mix": y.contiguous(), "provenance": torch.tensor(self._provenance, dtype=torch.int64)},
            path,
        )


@dataclass
class RunResult:
    model: PredictionModel
    generator: Optional[MixupGenerator]
    discriminator: Optional[Discriminator]
    store: AugmentStore
    trace: list
    pretrain_metrics: dict


def default_architecture(dataset: Dataset) -> ArchitectureConfig:
    if len(dataset.input_shape) == 3:
        return ArchitectureConfig(input_shape=dataset.input_shape, num_classes=dataset.num_classes)
    return ArchitectureConfig(
        name="mlp",
        input_shape=dataset.input_shape,
        num_classes=dataset.num_classes,
        feature_dim=16,
        hidden_sizes=[32],
        activation="tanh",
        feature_activation="tanh",
    )


def _check_loss(loss: torch.Tensor, *, phase: str, step: int, last_loss):
    if not torch.isfinite(loss):
        logger.error(f"Non-finite loss during {phase} at step {step}, last finite loss {last_loss}")
        raise TrainingAborted("Loss diverged", phase=phase, step=step, last_loss=last_loss)


def pretrain(model: PredictionModel, dataset: Dataset, cfg: TrainConfig, epochs: Optional[int] = None) -> dict:
    """Mini-batch cross-entropy training of f and h on the source domain."""
    epochs = cfg.num_pretrain_epochs if epochs is None else epochs
    logger.info(f"Pretraining for {epochs} epochs on {dataset}")

    model.train()
    optimizer = training_utils.get_optimizer(model.parameters(), optimizer_type=cfg.optimizer, lr=cfg.lr)
    scheduler = training_utils.get_scheduler(optimizer, num_steps=epochs, decay_factor=cfg.lr_decay_factor)
    loader = make_loader(dataset, cfg.batch_size, seed=derive_seed(cfg.seed, PRETRAIN_STREAM))

    last_loss = None
    global_step = 0
    for epoch in tqdm(range(epochs), desc="Pretrain epochs", ncols=80):
        epoch_loss, n_batches = 0.0, 0
        for x, y in loader:
            loss = cross_entropy(model(x), y)
            _check_loss(loss, phase="pretrain", step=global_step, last_loss=last_loss)

            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

            last_loss = loss.item()
            epoch_loss += last_loss
            n_batches += 1
            global_step += 1
        scheduler.step()
        logger.debug(f"Pretrain epoch {epoch}: loss {epoch_loss / n_batches:.4f}, lr {optimizer.param_groups[0]['lr']:.2e}")

    accuracy, loss = evaluate(model, dataset, batch_size=cfg.eval_batch_size)
    logger.info(f"Pretraining done: train accuracy {accuracy:.4f}, train loss {loss:.4f}")
    return {"loss": loss, "train_accuracy": accuracy, "epochs": epochs, "steps": global_step}


def generator_loss(sample: MixupSample, classifier) -> torch.Tensor:
    """Cross-entropy of the stop-gradient classifier on (z_mix, y_mix); only the generator gets gradients."""
    logits = classify(classifier, sample.z_mix, stop_grad=True)
    return cross_entropy(logits, sample.y_mix)


def adversarial_loss(real_features: torch.Tensor, mix_features: torch.Tensor, discriminator: Discriminator) -> torch.Tensor:
    """E[log D(real)] + E[log(1 - D(mix))]; maximized by the discriminator, minimized by the generator."""
    if len(real_features) == 0 or len(mix_features) == 0:
        raise ValueError("adversarial_loss needs non-empty real and mixup batches")
    eps = Discriminator.EPS
    real_score = discriminate(discriminator, real_features).clamp(eps, 1 - eps)
    mix_score = discriminate(discriminator, mix_features).clamp(eps, 1 - eps)
    return torch.log(real_score).mean() + torch.log(1 - mix_score).mean()


def _apply_gradients(optimizer, params, loss, *, ascent=False):
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    for p, g in zip(params, grads):
        g = torch.zeros_like(p) if g is None else g
        p.grad = -g if ascent else g
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)


def train_generator(
    model: PredictionModel,
    generator: MixupGenerator,
    discriminator: Discriminator,
    *,
    queries: torch.Tensor,
    base_x: torch.Tensor,
    base_y: torch.Tensor,
    correlation,
    dataset: Dataset,
    cfg: TrainConfig,
    optimizers: dict,
    rng: torch.Generator,
    steps: Optional[int] = None,
) -> dict:
    """
    Alternating minimax steps with f and h frozen: discriminator ascent on L_adv,
    then generator descent on L_mix_gen + lambda_adv * L_adv.

    A non-finite loss stops the phase and restores the generator to its state at entry.
    """
    steps = cfg.generator_iters if steps is None else steps
    lambda_adv = cfg.effective_lambda_adv
    use_mix_gen = not cfg.no_mix_gen
    use_adv = lambda_adv > 0
    losses = {"L_mix_gen": None, "L_adv": None}
    if steps == 0 or not (use_mix_gen or use_adv):
        return losses

    generator_before = training_utils.snapshot(generator)
    g_params = list(generator.parameters())
    d_params = list(discriminator.parameters())

    for step in range(steps):
        real_index = torch.randint(len(dataset), (cfg.batch_size,), generator=rng)
        with torch.no_grad():
            real_features = extract(model.extractor, dataset.inputs[real_index])

        sample = generate(queries, base_x, base_y, model.extractor, correlation, generator)

        if use_adv:
            d_objective = adversarial_loss(real_features, sample.z_mix.detach(), discriminator)
            if not torch.isfinite(d_objective):
                logger.error(f"Non-finite adversarial loss at generator step {step}, keeping the previous generator")
                generator.load_state_dict(generator_before)
                break
            _apply_gradients(optimizers["discriminator"], d_params, d_objective, ascent=True)

        l_mix_gen = generator_loss(sample, model.classifier)
        l_adv = adversarial_loss(real_features, sample.z_mix, discriminator) if use_adv else torch.zeros(())
        objective = lambda_adv * l_adv
        if use_mix_gen:
            objective = objective + l_mix_gen

        if not torch.isfinite(objective):
            logger.error(f"Non-finite generator loss at step {step}, keeping the previous generator")
            generator.load_state_dict(generator_before)
            break

        _apply_gradients(optimizers["generator"], g_params, objective)
        losses = {"L_mix_gen": l_mix_gen.item(), "L_adv": l_adv.item() if use_adv else None}

    return losses


def finetune(
    model: PredictionModel,
    dataset: Dataset,
    store: AugmentStore,
    cfg: TrainConfig,
    *,
    optimizer,
    steps: Optional[int] = None,
    seed: int = 0,
    mixup: Optional[PairwiseMixup] = None,
) -> dict:
    """
    Minimizes L_sup + lambda_mix * L_mix_tr with g and D frozen. Stored z_mix live in feature
    space and are fed straight into the classifier.
    """
    steps = cfg.finetune_steps(len(dataset)) if steps is None else steps
    lambda_mix = cfg.effective_lambda_mix
    use_store = lambda_mix > 0 and len(store) > 0

    model.train()
    loader = make_loader(dataset, cfg.batch_size, seed=seed)
    store_rng = make_generator(derive_seed(seed, STORE_STREAM))
    batches = iter(loader)

    sup_total, mix_total, last_loss = 0.0, 0.0, None
    for step in range(steps):
        try:
            x, y = next(batches)
        except StopIteration:
            batches = iter(loader)
            x, y = next(batches)
        if mixup is not None:
            x, y, _ = mixup(x, y)

        l_sup = cross_entropy(model(x), y)
        loss = l_sup
        if use_store:
            if cfg.mix_batch == "full":
                z_mix, y_mix = store.tensors()
            else:
                z_mix, y_mix = store.sample(cfg.batch_size, store_rng)
            l_mix = cross_entropy(model.classifier(z_mix), y_mix)
            loss = loss + lambda_mix * l_mix
            mix_total += l_mix.item()

        _check_loss(loss, phase="finetune", step=step, last_loss=last_loss)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

        last_loss = loss.item()
        sup_total += l_sup.item()

    n = max(steps, 1)
    return {"L_sup": sup_total / n if steps else None, "L_mix_tr": mix_total / n if (use_store and steps) else None}


def evaluate_domains(model: PredictionModel, eval_sets: dict, batch_size: int) -> dict:
    return {name: evaluate(model, dataset, batch_size=batch_size)[0] for name, dataset in eval_sets.items()}


def _save(output_dir, outer_iter, *, model, generator, discriminator, optimizers, store, cfg, global_step):
    if output_dir is None:
        return
    training_state = {
        "outer_iter": outer_iter,
        "global_step": global_step,
        "store_size": len(store),
        "seed": cfg.seed,
    }
    training_utils.save_checkpoint(
        os.path.join(output_dir, f"model_{outer_iter}"),
        model=model,
        generator=generator,
        discriminator=discriminator,
        optimizers=optimizers,
        training_state=training_state,
        metadata={"seed": cfg.seed, "method": cfg.method},
    )
    if cfg.keep_checkpoints is not None:
        training_utils.delete_old_checkpoints(output_dir, keep=cfg.keep_checkpoints)


def run(
    cfg: TrainConfig,
    dataset: Dataset,
    *,
    arch: Optional[ArchitectureConfig] = None,
    eval_sets: Optional[dict] = None,
    output_dir: Optional[str] = None,
    pretrained: Optional[PredictionModel] = None,
) -> RunResult:
    """
    Pretraining followed by the outer augmentation loop. Emits one metrics record per outer
    iteration (appended to `output_dir/metrics.jsonl` when an output directory is given).
    """
    if cfg.method not in METHODS:
        raise ValueError(f"Unknown method {cfg.method}, expected one of {METHODS}")
    torch.manual_seed(cfg.seed)
    eval_sets = eval_sets if eval_sets is not None else {"source": dataset}

    init_rng = make_generator(derive_seed(cfg.seed, INIT_STREAM))
    if pretrained is not None:
        model = copy.deepcopy(pretrained)
        pretrain_metrics = {}
        logger.info("Starting from a pretrained model, skipping pretraining")
    else:
        model = build_model(arch or default_architecture(dataset), init_rng)
    d = model.arch.feature_dim

    use_generator = cfg.method == "mpbm"
    generator = MixupGenerator(d, generator=init_rng, label_softmax=cfg.label_softmax) if use_generator else None
    discriminator = build_discriminator(d, init_rng) if use_generator else None
    mixup = PairwiseMixup(cfg.mixup_alpha, seed=derive_seed(cfg.seed, MIXUP_STREAM)) if cfg.method == "mixup" else None

    store = AugmentStore()
    trace = []
    metrics_path = os.path.join(output_dir, "metrics.jsonl") if output_dir else None
    if metrics_path is not None:
        os.makedirs(output_dir, exist_ok=True)
        open(metrics_path, "w").close()

    wandb_run = wandb.init(project="mpbm", mode=cfg.wandb_mode, config=cfg.to_dict(), dir=output_dir, reinit=True)

    num_outer = cfg.num_outer_iters
    outer_iter = 0
    global_step = 0
    modules = {"model": model, "generator": generator, "discriminator": discriminator}
    last_good = _snapshot_modules(modules)
    last_good_step = global_step
    try:
        if pretrained is None:
            pretrain_metrics = pretrain(model, dataset, cfg)
            global_step = pretrain_metrics["steps"]
        last_good = _snapshot_modules(modules)
        last_good_step = global_step

        optimizers = {
            "finetune": training_utils.get_optimizer(model.parameters(), optimizer_type=cfg.optimizer, lr=cfg.lr),
        }
        if use_generator:
            optimizers["generator"] = training_utils.get_optimizer(generator.parameters(), optimizer_type=cfg.optimizer, lr=cfg.generator_lr)
            optimizers["discriminator"] = training_utils.get_optimizer(discriminator.parameters(), optimizer_type=cfg.optimizer, lr=cfg.discriminator_lr)
        scheduler = training_utils.get_scheduler(optimizers["finetune"], num_steps=num_outer, decay_factor=cfg.lr_decay_factor)
        sgld_cfg = cfg.sgld_config() if use_generator and not cfg.no_sgld and cfg.sgld_steps > 0 else None
        finetune_steps = cfg.finetune_steps(len(dataset))

        logger.info(f"Starting {num_outer} outer iterations ({cfg.method}), {finetune_steps} fine-tune steps each")
        for outer_iter in tqdm(range(1, num_outer + 1), desc="Outer iterations", ncols=80):
            losses = {"L_mix_gen": None, "L_adv": None}

            if use_generator:
                losses = _augment(
                    model, generator, discriminator, store,
                    dataset=dataset, cfg=cfg, sgld_cfg=sgld_cfg, optimizers=optimizers, outer_iter=outer_iter,
                )

            ft_losses = finetune(
                model, dataset, store, cfg,
                optimizer=optimizers["finetune"],
                steps=finetune_steps,
                seed=derive_seed(cfg.seed, FINETUNE_STREAM, outer_iter),
                mixup=mixup,
            )
            scheduler.step()
            global_step += finetune_steps
            last_good = _snapshot_modules(modules)
            last_good_step = global_step

            record = {
                "iter": outer_iter,
                "L_sup": ft_losses["L_sup"],
                "L_mix_gen": losses["L_mix_gen"],
                "L_adv": losses["L_adv"],
                "L_mix_tr": ft_losses["L_mix_tr"],
                "store_size": len(store),
                "eval": evaluate_domains(model, eval_sets, cfg.eval_batch_size),
            }
            trace.append(record)
            if metrics_path is not None:
                training_utils.append_jsonl(metrics_path, record)
            wandb_run.log(record, step=outer_iter)

            if cfg.save_every and outer_iter % cfg.save_every == 0 and outer_iter != num_outer:
                _save(output_dir, outer_iter, model=model, generator=generator, discriminator=discriminator,
                      optimizers=optimizers, store=store, cfg=cfg, global_step=global_step)

    except TrainingAborted:
        completed = max(outer_iter - 1, 0)
        logger.error(f"Training aborted at outer iteration {outer_iter}, saving the state after iteration {completed}")
        for name, module in modules.items():
            if module is not None:
                module.load_state_dict(last_good[name])
        store.rollback(completed)
        _save(output_dir, completed, model=model, generator=generator, discriminator=discriminator,
              optimizers=None, store=store, cfg=cfg, global_step=last_good_step)
        if output_dir is not None:
            store.save(os.path.join(output_dir, "augment_store.safetensors"))
        wandb_run.finish()
        raise

    _save(output_dir, num_outer, model=model, generator=generator, discriminator=discriminator,
          optimizers=optimizers, store=store, cfg=cfg, global_step=global_step)
    if output_dir is not None:
        store.save(os.path.join(output_dir, "augment_store.safetensors"))
    wandb_run.finish()

    return RunResult(
        model=model,
        generator=generator,
        discriminator=discriminator,
        store=store,
        trace=trace,
        pretrain_metrics=pretrain_metrics,
    )


def _snapshot_modules(modules: dict) -> dict:
    return {name: training_utils.snapshot(module) for name, module in modules.items() if module is not None}


def _augment(model, generator, discriminator, store, *, dataset, cfg, sgld_cfg, optimizers, outer_iter) -> dict:
    """Generator phase of one outer iteration; appends m new pairs to the store."""
    model.eval()
    model.requires_grad_(False)

    correlation = compute_correlation(
        model.extractor,
        dataset,
        max_rows=cfg.correlation_max_rows,
        generator=make_generator(derive_seed(cfg.seed, CORRELATION_STREAM, outer_iter)),
        batch_size=cfg.eval_batch_size,
    )

    m = cfg.num_queries
    query_rng = make_generator(derive_seed(cfg.seed, QUERY_STREAM, outer_iter))
    seed_index = torch.randint(len(dataset), (m,), generator=query_rng)
    x_seed, y_seed = dataset.inputs[seed_index], dataset.labels[seed_index]
    if sgld_cfg is None:
        queries = x_seed
    else:
        result = sgld_query(x_seed, y_seed, model, sgld_cfg, query_rng)
        if result.diverged:
            logger.warning(f"SGLD chains diverged after {result.steps} steps at outer iteration {outer_iter}")
        queries = result.x

    base_rng = make_generator(derive_seed(cfg.seed, BASE_STREAM, outer_iter))
    base_index = sample_base_batches(len(dataset), m, cfg.n_b, base_rng)
    base_x, base_y = dataset.inputs[base_index], dataset.labels[base_index]

    losses = train_generator(
        model, generator, discriminator,
        queries=queries,
        base_x=base_x,
        base_y=base_y,
        correlation=correlation,
        dataset=dataset,
        cfg=cfg,
        optimizers=optimizers,
        rng=make_generator(derive_seed(cfg.seed, REAL_STREAM, outer_iter)),
    )

    with torch.no_grad():
        sample = generate(queries, base_x, base_y, model.extractor, correlation, generator)
    store.extend(sample.z_mix, sample.y_mix, outer_iter)

    model.requires_grad_(True)
    return losses
