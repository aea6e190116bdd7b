import json
from dataclasses import replace

import numpy as np
import pytest
import torch

from crossseg import losses
from crossseg.config import (
    BatchConfig,
    OptimizerConfig,
    TrainConfig,
    config_from_dict,
    dump_config,
    load_config,
)
from crossseg.data import (
    LabeledSample,
    MixedBatch,
    SyntheticConfig,
    UnlabeledSample,
    compose_batches,
    generate_synthetic_dataset,
)
from crossseg.losses import ContrastiveConfig, RampUpConfig
from crossseg.models import NetworkConfig, build_network, parameter_vector
from crossseg.training import (
    init_state,
    lr_schedule,
    prepare_data,
    read_checkpoint,
    restore_state,
    save_checkpoint,
    select_and_checkpoint,
    train,
    train_step,
    validate,
)

TINY_CNN = NetworkConfig(kind="cnn_unet", base_channels=4)
TINY_SWIN = NetworkConfig(kind="windowed_transformer_unet", embed_dim=6, num_heads=[1, 2, 2], window_size=4)


def tiny_config(tmp_path, data_dir, **overrides):
    cfg = TrainConfig(
        optimizer=OptimizerConfig(lr0=0.01, max_iters=10),
        ramp=RampUpConfig(ramp_iters=4),
        batch=BatchConfig(2, 2),
        image_size=(32, 32),
        eval_every=5,
        data_dir=str(data_dir),
        out_dir=str(tmp_path / "run"),
        model1=TINY_CNN,
        model2=TINY_SWIN,
    )
    return replace(cfg, **overrides)


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    generate_synthetic_dataset(SyntheticConfig(num_labeled=3, num_unlabeled=4, num_val=2, height=32, width=32, seed=1), root)
    return root


def random_batch(n_lab, n_unl, seed=0, size=32):
    rng = np.random.default_rng(seed)
    lab = [LabeledSample(rng.random((3, size, size), dtype=np.float32), rng.integers(0, 3, (size, size)).astype(np.uint8), f"l{i}")
           for i in range(n_lab)]
    unl = [UnlabeledSample(rng.random((3, size, size), dtype=np.float32), f"u{i}") for i in range(n_unl)]
    return MixedBatch(lab, unl)


# --- schedules -------------------------------------------------------------

def test_lr_schedule_values():
    cfg = OptimizerConfig()
    assert lr_schedule(0, cfg) == 0.001
    assert lr_schedule(30000, cfg) == 0.0
    assert lr_schedule(15000, cfg) == pytest.approx(0.001 * 0.5**0.9, abs=1e-15)
    assert lr_schedule(15000, cfg) == pytest.approx(5.359e-4, abs=1e-7)
    values = [lr_schedule(t, cfg) for t in range(0, 30001, 1000)]
    assert all(b < a for a, b in zip(values, values[1:]))
    with pytest.raises(ValueError):
        lr_schedule(30001, cfg)
    with pytest.raises(ValueError):
        lr_schedule(-1, cfg)


# --- config ----------------------------------------------------------------

def test_default_config_values():
    cfg = TrainConfig()
    assert (cfg.optimizer.lr0, cfg.optimizer.momentum, cfg.optimizer.weight_decay) == (0.001, 0.9, 0.0001)
    assert cfg.optimizer.max_iters == 30000
    assert (cfg.batch.labeled, cfg.batch.unlabeled) == (2, 6)
    assert cfg.image_size == (224, 224)


def test_config_round_trip_and_unknown_keys(tmp_path):
    cfg = TrainConfig(seed=4, image_size=(64, 64))
    path = tmp_path / "c.yaml"
    path.write_text(dump_config(cfg))
    assert load_config(path) == cfg
    with pytest.raises(ValueError, match="optimizer.lr"):
        config_from_dict({"optimizer": {"lr": 0.1}})
    with pytest.raises(ValueError, match="bogus"):
        config_from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        config_from_dict({"image_size": [50, 64]})


# --- train_step ------------------------------------------------------------

def test_train_step_deterministic(tmp_path, tiny_data):
    cfg = tiny_config(tmp_path, tiny_data)
    batch = random_batch(2, 2)
    reports = []
    for _ in range(2):
        state = init_state(cfg)
        for _ in range(2):
            state, report = train_step(state, batch, cfg)
        reports.append(report)
    assert reports[0] == reports[1]
    assert state.iter == 2


def test_train_step_updates_both_networks_once(tmp_path, tiny_data):
    cfg = tiny_config(tmp_path, tiny_data)
    state = init_state(cfg)
    before = (parameter_vector(state.model1), parameter_vector(state.model2))
    state, report = train_step(state, random_batch(2, 2), cfg)
    assert not torch.equal(before[0], parameter_vector(state.model1))
    assert not torch.equal(before[1], parameter_vector(state.model2))
    assert report.total == pytest.approx(
        (report.sup1 + report.sup2) + report.lambda_t * (report.semi1 + report.semi2) + report.contra, abs=1e-6)
    assert report.lambda_t == losses.ramp_up_lambda(0, cfg.ramp)
    assert len(state.optimizer.param_groups) == 1
    n_params = sum(1 for _ in state.model1.parameters()) + sum(1 for _ in state.model2.parameters())
    assert len(state.optimizer.param_groups[0]["params"]) == n_params


def test_train_step_without_unlabeled(tmp_path, tiny_data):
    cfg = tiny_config(tmp_path, tiny_data)
    state, report = train_step(init_state(cfg), random_batch(2, 0), cfg)
    assert report.semi1 == 0.0 and report.semi2 == 0.0
    assert report.contra > 0


def test_train_step_refuses_past_max_iters(tmp_path, tiny_data):
    cfg = tiny_config(tmp_path, tiny_data)
    state = init_state(cfg)
    state.iter = cfg.optimizer.max_iters
    with pytest.raises(ValueError):
        train_step(state, random_batch(2, 2), cfg)


def test_train_step_aborts_on_non_finite(tmp_path, tiny_data):
    cfg = tiny_config(tmp_path, tiny_data)
    state = init_state(cfg)
    with torch.no_grad():
        state.model1.outc.bias.fill_(float("nan"))
    with pytest.raises(FloatingPointError, match="sup1"):
        train_step(state, random_batch(2, 2), cfg)


def test_supervised_loss_decreases_on_fixed_batch(tmp_path, tiny_data):
    cfg = tiny_config(tmp_path, tiny_data, optimizer=OptimizerConfig(lr0=0.01, max_iters=1000), augment=None)
    lab, unl, _ = prepare_data(cfg)
    batch = MixedBatch(lab[:2], unl[:2])
    state = init_state(cfg)
    sup = []
    for _ in range(50):
        state, report = train_step(state, batch, cfg)
        sup.append(report.sup1 + report.sup2)
    assert np.mean(sup[-5:]) < 0.8 * np.mean(sup[:5])


# --- validation and selection ---------------------------------------------

def test_validate_with_oracle_and_background(tmp_path, tiny_data, oracle_model, oracle_samples):
    cfg = tiny_config(tmp_path, tiny_data)
    state = init_state(cfg)
    state.model1 = oracle_model
    state.model2 = build_network(NetworkConfig(kind="mask_oracle"))
    with torch.no_grad():
        state.model2.scale.fill_(-50.0)  # the true class always loses the argmax
    dsc1, dsc2 = validate(state, oracle_samples)
    assert dsc1 == 1.0 and dsc2 == 0.0
    assert validate(state, oracle_samples[::-1]) == (dsc1, dsc2)
    with pytest.raises(ValueError):
        validate(state, [])


def test_validate_leaves_parameters_untouched(tmp_path, tiny_data, oracle_samples):
    state = init_state(tiny_config(tmp_path, tiny_data))
    before = parameter_vector(state.model1)
    buffers = {k: v.clone() for k, v in state.model1.state_dict().items()}
    validate(state, oracle_samples)
    assert torch.equal(before, parameter_vector(state.model1))
    assert all(torch.equal(v, state.model1.state_dict()[k]) for k, v in buffers.items())
    assert state.model1.training


@pytest.mark.parametrize("scores,best,chosen,written", [
    ((0.7, 0.8), 0.75, "net2", True),
    ((0.7, 0.7), 0.6, "net1", True),
    ((0.5, 0.5), 0.75, "net1", False),
])
def test_select_and_checkpoint(tmp_path, tiny_data, scores, best, chosen, written):
    cfg = tiny_config(tmp_path, tiny_data)
    state = init_state(cfg)
    state.best_val_dsc = best
    target = tmp_path / "best.pt"
    record = select_and_checkpoint(state, *scores, cfg, path=target)
    assert record.chosen == chosen
    assert target.exists() == written
    assert (record.path is not None) == written
    assert state.best_val_dsc == max(best, *scores)


def test_checkpoint_round_trip_is_bit_exact(tmp_path, tiny_data):
    cfg = tiny_config(tmp_path, tiny_data)
    state = init_state(cfg)
    state, _ = train_step(state, random_batch(2, 2), cfg)
    a = save_checkpoint(tmp_path / "a.pt", state, cfg)
    restored, cfg2 = restore_state(read_checkpoint(a))
    assert cfg2 == cfg
    assert torch.equal(parameter_vector(restored.model1), parameter_vector(state.model1))
    b = save_checkpoint(tmp_path / "b.pt", restored, cfg2)
    pa, pb = read_checkpoint(a), read_checkpoint(b)
    for key in ("model1", "model2"):
        assert all(torch.equal(pa[key][k], pb[key][k]) for k in pa[key])

    batch = random_batch(2, 2, seed=5)
    _, r1 = train_step(state, batch, cfg)
    _, r2 = train_step(restored, batch, cfg2)
    assert abs(r1.total - r2.total) <= 1e-7


# --- full loop ---------------------------------------------------------------

def read_jsonl(path):
    return [json.loads(line) for line in open(path) if line.strip()]


def test_train_counts_and_logs(tmp_path, tiny_data):
    cfg = tiny_config(tmp_path, tiny_data)
    record = train(cfg)
    out = tmp_path / "run"
    loss_lines = read_jsonl(out / "loss_log.jsonl")
    val_lines = read_jsonl(out / "val_log.jsonl")
    assert len(loss_lines) == 10 and len(val_lines) == 2
    assert [l["iter"] for l in loss_lines] == list(range(10))
    assert set(loss_lines[0]) == {"iter", "total", "sup1", "sup2", "semi1", "semi2", "contra", "lambda", "lr"}
    for line in loss_lines:
        assert line["lr"] == lr_schedule(line["iter"], cfg.optimizer)
        assert line["lambda"] == losses.ramp_up_lambda(line["iter"], cfg.ramp)
    bests = [v["best_val_dsc"] for v in val_lines]
    assert bests == sorted(bests)
    assert (out / "last.pt").exists()
    assert record.iter in (5, 10)


def test_train_labeled_only(tmp_path, tiny_data):
    cfg = tiny_config(tmp_path, tiny_data, batch=BatchConfig(2, 0),
                      contrastive=ContrastiveConfig(enabled=False))
    train(cfg)
    lines = read_jsonl(tmp_path / "run" / "loss_log.jsonl")
    assert all(l["semi1"] == 0 and l["contra"] == 0 for l in lines)
    assert [l["lambda"] for l in lines] == [losses.ramp_up_lambda(i, cfg.ramp) for i in range(10)]


def test_resume_continues_from_stored_iter(tmp_path, tiny_data):
    cfg = tiny_config(tmp_path, tiny_data)
    train(cfg)
    ref = read_jsonl(tmp_path / "run" / "loss_log.jsonl")
    assert read_checkpoint(tmp_path / "run" / "last.pt")["iter"] == 10

    # replay the first five steps exactly as train() does, then checkpoint
    cfg_b = tiny_config(tmp_path / "b", tiny_data)
    state = init_state(cfg_b)
    torch.manual_seed(cfg_b.seed)
    lab, unl, _ = prepare_data(cfg_b)
    state.composer = compose_batches(lab, unl, 2, 2, seed=cfg_b.seed, augment=cfg_b.augment)
    for _ in range(5):
        state, _ = train_step(state, next(state.composer), cfg_b)
    mid = save_checkpoint(tmp_path / "mid.pt", state, cfg_b)

    train(cfg_b, resume=mid)
    resumed = read_jsonl(tmp_path / "b" / "run" / "loss_log.jsonl")
    assert [l["iter"] for l in resumed] == list(range(5, 10))
    for x, y in zip(ref[5:], resumed):
        assert all(abs(x[k] - y[k]) <= 1e-7 for k in x)
