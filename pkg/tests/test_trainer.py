import json
import math

import numpy as np
import pytest
import torch
from safetensors.torch import load_file

from mpbm import trainer
from mpbm.baselines import PairwiseMixup
from mpbm.correlation import compute_correlation
from mpbm.data import synth_blobs, apply_shifts
from mpbm.mixgen import MixupGenerator, generate, sample_base_batches
from mpbm.modeling import MLP_BLOBS, build_discriminator, build_model
from mpbm.numerics import DTYPE, make_generator
from mpbm.trainer import AugmentStore, TrainConfig, TrainingAborted
from mpbm.training_utils import get_optimizer, snapshot


def small_config(**kwargs):
    defaults = dict(
        batch_size=16,
        epochs=2,
        pretrain_epochs=3,
        outer_iters=2,
        generator_iters=3,
        finetune_iters=4,
        queries_per_outer=8,
        sgld_steps=2,
        n_b=3,
        lr=1e-2,
        eval_batch_size=64,
    )
    defaults.update(kwargs)
    return TrainConfig(**defaults)


@pytest.fixture(scope="module")
def blobs():
    return synth_blobs(3, 20, 3.0, seed=0)


@pytest.fixture(scope="module")
def pretrained(blobs):
    model = build_model(MLP_BLOBS, make_generator(0))
    trainer.pretrain(model, blobs, small_config())
    return model


def generator_phase_inputs(model, dataset, m=4, n_b=3, seed=0):
    rng = make_generator(seed)
    correlation = compute_correlation(model.extractor, dataset)
    queries = dataset.inputs[torch.randint(len(dataset), (m,), generator=rng)]
    index = sample_base_batches(len(dataset), m, n_b, rng)
    return dict(queries=queries, base_x=dataset.inputs[index], base_y=dataset.labels[index], correlation=correlation)


def test_derived_config_defaults():
    cfg = TrainConfig(batch_size=10, epochs=7)
    assert cfg.num_outer_iters == 7 and cfg.num_pretrain_epochs == 7 and cfg.num_queries == 10
    assert cfg.finetune_steps(95) == 10
    assert TrainConfig(no_adv=True).effective_lambda_adv == 0
    assert TrainConfig(no_mix_tr=True).effective_lambda_mix == 0


def test_pretrain_improves_accuracy(blobs):
    model = build_model(MLP_BLOBS, make_generator(1))
    metrics = trainer.pretrain(model, blobs, small_config(pretrain_epochs=30))
    assert metrics["epochs"] == 30 and metrics["steps"] == 30 * 4
    assert metrics["train_accuracy"] > 0.7


def test_zero_pretrain_epochs_leaves_model(blobs):
    model = build_model(MLP_BLOBS, make_generator(1))
    before = snapshot(model)
    trainer.pretrain(model, blobs, small_config(pretrain_epochs=0))
    for k, v in model.state_dict().items():
        assert torch.equal(v, before[k])


def test_adversarial_loss_of_uninformative_discriminator():
    discriminator = build_discriminator(4, make_generator(0), zero_head=True)
    real = torch.randn(5, 4, dtype=DTYPE)
    mix = torch.randn(3, 4, dtype=DTYPE)
    loss = trainer.adversarial_loss(real, mix, discriminator)
    assert loss.item() == pytest.approx(2 * math.log(0.5))
    with pytest.raises(ValueError):
        trainer.adversarial_loss(real[:0], mix, discriminator)


def test_generator_loss_only_reaches_generator(blobs, pretrained):
    model = pretrained
    generator = MixupGenerator(MLP_BLOBS.feature_dim, generator=make_generator(0))
    inputs = generator_phase_inputs(model, blobs)
    sample = generate(inputs["queries"], inputs["base_x"], inputs["base_y"], model.extractor, inputs["correlation"], generator)
    trainer.generator_loss(sample, model.classifier).backward()
    assert all(p.grad is None for p in model.parameters())
    assert all(p.grad is not None and p.grad.abs().sum() > 0 for p in generator.parameters())


def test_generator_phase_leaves_model_untouched(blobs, pretrained):
    model = pretrained
    before = snapshot(model)
    cfg = small_config()
    generator = MixupGenerator(MLP_BLOBS.feature_dim, generator=make_generator(0))
    discriminator = build_discriminator(MLP_BLOBS.feature_dim, make_generator(1))
    generator_before = snapshot(generator)
    optimizers = {
        "generator": get_optimizer(generator.parameters(), optimizer_type="rmsprop", lr=1e-2),
        "discriminator": get_optimizer(discriminator.parameters(), optimizer_type="rmsprop", lr=1e-2),
    }
    losses = trainer.train_generator(
        model, generator, discriminator,
        dataset=blobs, cfg=cfg, optimizers=optimizers, rng=make_generator(2),
        **generator_phase_inputs(model, blobs),
    )
    assert losses["L_mix_gen"] is not None and losses["L_adv"] is not None
    for k, v in model.state_dict().items():
        assert torch.equal(v, before[k]), k
    assert any(not torch.equal(v, generator_before[k]) for k, v in generator.state_dict().items())


def test_generator_phase_skipped_without_objectives(blobs, pretrained):
    cfg = small_config(no_mix_gen=True, no_adv=True)
    generator = MixupGenerator(MLP_BLOBS.feature_dim, generator=make_generator(0))
    before = snapshot(generator)
    losses = trainer.train_generator(
        pretrained, generator, build_discriminator(MLP_BLOBS.feature_dim, make_generator(1)),
        dataset=blobs, cfg=cfg, optimizers={}, rng=make_generator(2),
        **generator_phase_inputs(pretrained, blobs),
    )
    assert losses == {"L_mix_gen": None, "L_adv": None}
    for k, v in generator.state_dict().items():
        assert torch.equal(v, before[k])


def test_augment_store_is_append_only(tmp_path):
    store = AugmentStore()
    assert len(store) == 0
    z = torch.randn(3, 4, dtype=DTYPE)
    y = torch.softmax(torch.randn(3, 2, dtype=DTYPE), dim=-1)
    store.extend(z, y, outer_iter=1)
    z[0, 0] = 100.0
    store.extend(torch.zeros(2, 4, dtype=DTYPE), torch.full((2, 2), 0.5, dtype=DTYPE), outer_iter=2)

    stored_z, stored_y = store.tensors()
    assert len(store) == 5 and stored_z.shape == (5, 4)
    assert stored_z[0, 0] != 100.0
    assert store.provenance == [(1, 0), (1, 1), (1, 2), (2, 0), (2, 1)]

    sample_z, sample_y = store.sample(2, make_generator(0))
    assert sample_z.shape == (2, 4) and sample_y.shape == (2, 2)
    assert store.sample(10, make_generator(0))[0].shape == (5, 4)

    store.save(str(tmp_path / "store.safetensors"))
    saved = load_file(str(tmp_path / "store.safetensors"))
    assert torch.equal(saved["z_mix"], stored_z)
    assert saved["provenance"].tolist()[3] == [2, 0]


def test_store_grows_by_queries_per_iteration(blobs, pretrained):
    cfg = small_config(outer_iters=3)
    result = trainer.run(cfg, blobs, pretrained=pretrained)
    assert [record["store_size"] for record in result.trace] == [8, 16, 24]
    assert len(result.store) == 24
    for record in result.trace:
        assert set(record) == {"iter", "L_sup", "L_mix_gen", "L_adv", "L_mix_tr", "store_size", "eval"}
        assert 0 <= record["eval"]["source"] <= 1
    z, y = result.store.tensors()
    np.testing.assert_allclose(y.sum(dim=1).numpy(), np.ones(24), atol=1e-9)


def test_run_is_deterministic(blobs):
    cfg = small_config()
    a = trainer.run(cfg, blobs)
    b = trainer.run(cfg, blobs)
    assert json.dumps(a.trace) == json.dumps(b.trace)
    c = trainer.run(small_config(seed=1), blobs)
    assert json.dumps(a.trace) != json.dumps(c.trace)


def test_degenerate_weights_reduce_to_erm(blobs, pretrained):
    erm = trainer.run(small_config(method="erm"), blobs, pretrained=pretrained)
    degenerate = trainer.run(small_config(lambda_adv=0.0, lambda_mix=0.0, no_sgld=True), blobs, pretrained=pretrained)
    for k, v in erm.model.state_dict().items():
        assert torch.equal(v, degenerate.model.state_dict()[k]), k
    assert len(erm.store) == 0 and len(degenerate.store) == 16


def test_no_adv_matches_zero_lambda_adv(blobs, pretrained):
    a = trainer.run(small_config(no_adv=True), blobs, pretrained=pretrained)
    b = trainer.run(small_config(lambda_adv=0.0), blobs, pretrained=pretrained)
    assert json.dumps(a.trace) == json.dumps(b.trace)
    assert all(record["L_adv"] is None for record in a.trace)


def test_mixup_baseline_runs(blobs, pretrained):
    result = trainer.run(small_config(method="mixup"), blobs, pretrained=pretrained)
    assert result.generator is None and len(result.store) == 0
    assert all(record["L_mix_gen"] is None for record in result.trace)


def test_pairwise_mixup_stays_on_simplex():
    mixup = PairwiseMixup(alpha=1.0, seed=0)
    x = torch.rand(6, 2, dtype=DTYPE)
    y = torch.eye(3, dtype=DTYPE)[[0, 1, 2, 0, 1, 2]]
    x_mix, y_mix, lam = mixup(x, y)
    assert 0 <= lam <= 1
    np.testing.assert_allclose(y_mix.sum(dim=1).numpy(), np.ones(6))
    np.testing.assert_allclose(x_mix[0].numpy(), (lam * x[0] + (1 - lam) * x[5]).numpy())
    with pytest.raises(ValueError):
        PairwiseMixup(alpha=0.0)


def test_run_writes_artifacts(tmp_path, blobs):
    target = apply_shifts(blobs, [{"kind": "rotate", "magnitude": 30.0}], name="rotated", domain="rotated")
    cfg = small_config(save_every=1, keep_checkpoints=1)
    result = trainer.run(cfg, blobs, eval_sets={"source": blobs, "rotated": target}, output_dir=str(tmp_path))

    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(line) for line in lines] == json.loads(json.dumps(result.trace))
    assert set(result.trace[-1]["eval"]) == {"source", "rotated"}
    checkpoints = sorted(p.name for p in tmp_path.iterdir() if p.name.startswith("model_"))
    assert checkpoints == ["model_2"]
    assert (tmp_path / "model_2" / "generator.safetensors").exists()
    state = json.loads((tmp_path / "model_2" / "training_state.json").read_text())
    assert state["outer_iter"] == 2 and state["store_size"] == 16
    assert (tmp_path / "augment_store.safetensors").exists()


def test_nan_loss_aborts_with_checkpoint(tmp_path, blobs):
    broken = build_model(MLP_BLOBS, make_generator(0))
    with torch.no_grad():
        broken.classifier.linear.bias[0] = float("nan")
    with pytest.raises(TrainingAborted) as e:
        trainer.run(small_config(method="erm"), blobs, pretrained=broken, output_dir=str(tmp_path))
    assert e.value.phase == "finetune" and e.value.step == 0
    assert (tmp_path / "model_0" / "model.safetensors").exists()


def test_abort_during_finetune_restores_the_previous_iteration(tmp_path, blobs, pretrained, monkeypatch):
    reference = trainer.run(small_config(outer_iters=1), blobs, pretrained=pretrained, output_dir=str(tmp_path / "reference"))

    calls = []
    finetune = trainer.finetune

    def diverge_on_second_iteration(*args, **kwargs):
        calls.append(kwargs["seed"])
        if len(calls) == 2:
            raise TrainingAborted("Loss diverged", phase="finetune", step=0)
        return finetune(*args, **kwargs)

    monkeypatch.setattr(trainer, "finetune", diverge_on_second_iteration)
    cfg = small_config(outer_iters=3)
    with pytest.raises(TrainingAborted):
        trainer.run(cfg, blobs, pretrained=pretrained, output_dir=str(tmp_path / "aborted"))

    checkpoint = tmp_path / "aborted" / "model_1"
    state = json.loads((checkpoint / "training_state.json").read_text())
    assert state["outer_iter"] == 1 and state["store_size"] == cfg.num_queries
    store = load_file(tmp_path / "aborted" / "augment_store.safetensors")
    assert store["provenance"][:, 0].tolist() == [1] * cfg.num_queries
    torch.testing.assert_close(store["z_mix"], reference.store.tensors()[0], rtol=0, atol=0)

    for name, module in (("model", reference.model), ("generator", reference.generator), ("discriminator", reference.discriminator)):
        saved = load_file(checkpoint / f"{name}.safetensors")
        for key, value in module.state_dict().items():
            assert torch.equal(saved[key], value), f"{name}.{key}"


def test_training_aborted_pickles():
    import pickle

    error = TrainingAborted("Loss diverged", phase="pretrain", step=3, last_loss=1.5)
    restored = pickle.loads(pickle.dumps(error))
    assert restored.phase == "pretrain" and restored.step == 3 and restored.last_loss == 1.5
    assert str(restored) == str(error)


def test_step_decay_schedule():
    from mpbm.training_utils import get_scheduler

    param = torch.nn.Parameter(torch.zeros(1, dtype=DTYPE))
    optimizer = get_optimizer([param], optimizer_type="rmsprop", lr=1.0)
    scheduler = get_scheduler(optimizer, num_steps=10, decay_factor=0.1)
    lrs = []
    for _ in range(10):
        lrs.append(optimizer.param_groups[0]["lr"])
        optimizer.step()
        scheduler.step()
    assert lrs[:5] == [1.0] * 5
    assert lrs[5:] == pytest.approx([0.1] * 5)
    with pytest.raises(ValueError):
        get_optimizer([param], optimizer_type="sgd", lr=1.0)
