"""Joint optimisation of the two networks, validation and best-network checkpointing."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from crossseg import losses
from crossseg.config import OptimizerConfig, TrainConfig, config_from_dict, config_to_dict
from crossseg.data import (
    LabeledSample,
    UnlabeledSample,
    batch_to_tensors,
    compose_batches,
    load_dataset,
    load_split,
    resize_sample,
    stream_rng,
)
from crossseg.metrics import FOREGROUND, dsc
from crossseg.models import NetworkConfig, build_network

log = logging.getLogger(__name__)


def lr_schedule(iteration: int, cfg: OptimizerConfig) -> float:
    """Poly decay lr0 * (1 - t/T)^p, reaching 0 at T = max_iters."""
    if not 0 <= iteration <= cfg.max_iters:
        raise ValueError(f"iteration {iteration} outside [0, {cfg.max_iters}]")
    return cfg.lr0 * (1.0 - iteration / cfg.max_iters) ** cfg.poly_power


@dataclass
class TrainState:
    iter: int
    model1: torch.nn.Module
    model2: torch.nn.Module
    optimizer: torch.optim.Optimizer
    best_val_dsc: float = 0.0
    best_network: str = "net1"
    composer: object = None


@dataclass
class CheckpointRecord:
    path: str | None
    iter: int
    val_dsc1: float
    val_dsc2: float
    chosen: str


def model_seeds(seed: int) -> tuple[int, int]:
    rng = stream_rng(seed, "init")
    a, b = rng.integers(0, 2**31 - 1, size=2)
    return int(a), int(b)


def make_optimizer(model1, model2, cfg: OptimizerConfig):
    params = list(model1.parameters()) + list(model2.parameters())
    return torch.optim.SGD(params, lr=cfg.lr0, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def init_state(cfg: TrainConfig) -> TrainState:
    s1, s2 = model_seeds(cfg.seed)
    model1 = build_network(replace(cfg.model1, seed=s1))
    model2 = build_network(replace(cfg.model2, seed=s2))
    model1.train()
    model2.train()
    return TrainState(iter=0, model1=model1, model2=model2, optimizer=make_optimizer(model1, model2, cfg.optimizer))


def compute_objective(model1, model2, images, masks, iteration, cfg: TrainConfig, pseudo=None):
    """Forward both networks on one mixed batch and return every loss term as a tensor.

    ``images`` holds the labeled images first (``len(masks)`` of them), then
    the unlabeled ones. ``pseudo`` optionally fixes the pseudo-label pair
    ``(from_net1, from_net2)``; by default they are derived from this forward
    pass. Returns ``(terms, pseudo)``.
    """
    n_lab = masks.shape[0]
    n_unl = images.shape[0] - n_lab
    logits1, z1 = model1(images, with_representation=True)
    logits2, z2 = model2(images, with_representation=True)

    sup1 = losses.supervised_loss(logits1[:n_lab], masks)
    sup2 = losses.supervised_loss(logits2[:n_lab], masks)

    if n_unl > 0:
        if pseudo is None:
            pseudo = (losses.pseudo_label(logits1[n_lab:]), losses.pseudo_label(logits2[n_lab:]))
        semi1 = losses.semi_supervised_loss(logits1[n_lab:], pseudo[1])
        semi2 = losses.semi_supervised_loss(logits2[n_lab:], pseudo[0])
    else:
        semi1 = semi2 = logits1.new_zeros(())

    if cfg.contrastive.enabled:
        contra = losses.contrastive_loss(z1, z2, range(n_lab), range(n_lab, n_lab + n_unl), cfg.contrastive)
    else:
        contra = logits1.new_zeros(())

    lam = losses.ramp_up_lambda(iteration, cfg.ramp)
    total = losses.weighted_total(sup1, sup2, semi1, semi2, contra, lam)
    terms = dict(total=total, sup1=sup1, sup2=sup2, semi1=semi1, semi2=semi2, contra=contra, lambda_t=lam)
    return terms, pseudo


def train_step(state: TrainState, batch, cfg: TrainConfig):
    """One SGD step on the total objective over both networks; returns ``(state, LossReport)``."""
    if state.iter >= cfg.optimizer.max_iters:
        raise ValueError(f"iteration {state.iter} has reached max_iters={cfg.optimizer.max_iters}")
    dtype = next(state.model1.parameters()).dtype
    images, masks = batch_to_tensors(batch, dtype=dtype)
    state.model1.train()
    state.model2.train()
    terms, _ = compute_objective(state.model1, state.model2, images, masks, state.iter, cfg)
    try:
        report = losses.total_loss(terms["sup1"], terms["sup2"], terms["semi1"], terms["semi2"],
                                   terms["contra"], terms["lambda_t"])
    except ValueError as exc:
        dump = {k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in terms.items()}
        raise FloatingPointError(f"training aborted at iter {state.iter}: {exc}; terms={json.dumps(dump)}") from exc
    if not math.isfinite(float(terms["total"].detach())):
        raise FloatingPointError(f"training aborted at iter {state.iter}: non-finite total; {report}")

    lr = lr_schedule(state.iter, cfg.optimizer)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.zero_grad(set_to_none=True)
    terms["total"].backward()
    state.optimizer.step()
    state.iter += 1
    return state, report


@torch.no_grad()
def predict_masks(model, images: np.ndarray, chunk: int = 16) -> np.ndarray:
    dtype = next(model.parameters()).dtype
    out = []
    for i in range(0, len(images), chunk):
        x = torch.from_numpy(images[i:i + chunk]).to(dtype)
        logits, _ = model(x, with_representation=False)
        out.append(logits.argmax(dim=1).numpy())
    return np.concatenate(out).astype(np.uint8)


def mean_foreground_dsc(preds, masks) -> float:
    return float(np.mean([np.mean([dsc(p, g, c) for c in FOREGROUND]) for p, g in zip(preds, masks)]))


def validate(state: TrainState, val: list[LabeledSample]) -> tuple[float, float]:
    """Mean foreground DSC of each network's argmax prediction, in evaluation mode."""
    if not val:
        raise ValueError("validation set is empty")
    images = np.stack([s.image for s in val])
    masks = [s.mask for s in val]
    scores = []
    for model in (state.model1, state.model2):
        was_training = model.training
        model.eval()
        try:
            scores.append(mean_foreground_dsc(predict_masks(model, images), masks))
        finally:
            model.train(was_training)
    return scores[0], scores[1]


def checkpoint_payload(state: TrainState, cfg: TrainConfig, extra: dict | None = None) -> dict:
    payload = {
        "iter": state.iter,
        "model1": state.model1.state_dict(),
        "model2": state.model2.state_dict(),
        "model1_config": config_to_dict(state.model1.config),
        "model2_config": config_to_dict(state.model2.config),
        "optimizer": state.optimizer.state_dict(),
        "composer": state.composer.state_dict() if state.composer is not None else None,
        "torch_rng": torch.get_rng_state(),
        "config": config_to_dict(cfg),
        "best_val_dsc": state.best_val_dsc,
        "best_network": state.best_network,
    }
    payload.update(extra or {})
    return payload


def save_checkpoint(path, state: TrainState, cfg: TrainConfig, extra: dict | None = None) -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(checkpoint_payload(state, cfg, extra), tmp)
    os.replace(tmp, path)
    return str(path)


def read_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    return torch.load(path, map_location="cpu", weights_only=False)


def load_network(ckpt: dict, which: str) -> torch.nn.Module:
    """Rebuild ``model1`` or ``model2`` from a checkpoint payload, in evaluation mode."""
    model = build_network(NetworkConfig(**ckpt[f"{which}_config"]))
    model.load_state_dict(ckpt[which])
    model.eval()
    return model


def load_chosen_network(ckpt: dict) -> torch.nn.Module:
    return load_network(ckpt, "model1" if ckpt["best_network"] == "net1" else "model2")


def restore_state(ckpt: dict) -> tuple[TrainState, TrainConfig]:
    cfg = config_from_dict(ckpt["config"])
    model1 = load_network(ckpt, "model1")
    model2 = load_network(ckpt, "model2")
    model1.train()
    model2.train()
    optimizer = make_optimizer(model1, model2, cfg.optimizer)
    optimizer.load_state_dict(ckpt["optimizer"])
    torch.set_rng_state(ckpt["torch_rng"])
    state = TrainState(iter=ckpt["iter"], model1=model1, model2=model2, optimizer=optimizer,
                       best_val_dsc=ckpt["best_val_dsc"], best_network=ckpt["best_network"])
    return state, cfg


def select_and_checkpoint(state: TrainState, dsc1: float, dsc2: float, cfg: TrainConfig,
                          path=None) -> CheckpointRecord:
    """Keep the better of the two networks if it beats the best validation DSC so far.

    Ties between the networks go to net1. A checkpoint is written only on
    improvement; the record is returned either way.
    """
    chosen = "net1" if dsc1 >= dsc2 else "net2"
    best = max(dsc1, dsc2)
    record = CheckpointRecord(path=None, iter=state.iter, val_dsc1=dsc1, val_dsc2=dsc2, chosen=chosen)
    if best > state.best_val_dsc:
        state.best_val_dsc = best
        state.best_network = chosen
        path = Path(path) if path is not None else Path(cfg.out_dir) / "best.pt"
        record.path = save_checkpoint(path, state, cfg, {"val_dsc1": dsc1, "val_dsc2": dsc2})
    return record


def prepare_data(cfg: TrainConfig):
    labeled, unlabeled = load_dataset(cfg.data_dir)
    val = load_split(cfg.data_dir, "val")
    size = tuple(cfg.image_size)

    def fit(s):
        image, mask = resize_sample(s.image, getattr(s, "mask", None), size)
        if mask is None:
            return UnlabeledSample(image, s.id)
        return LabeledSample(image, mask, s.id)

    return [fit(s) for s in labeled], [fit(s) for s in unlabeled], [fit(s) for s in val]


def _truncate_jsonl(path: Path, before_iter: int) -> None:
    if not path.exists():
        return
    keep = [line for line in path.read_text().splitlines() if line and json.loads(line)["iter"] < before_iter]
    path.write_text("".join(line + "\n" for line in keep))


def train(cfg: TrainConfig, resume=None) -> CheckpointRecord:
    """Run training to ``max_iters``, validating every ``eval_every`` iterations.

    Writes ``loss_log.jsonl``, ``val_log.jsonl``, ``best.pt`` (on improvement)
    and ``last.pt`` (at every validation and at the end) into ``cfg.out_dir``.
    Returns the record of the best checkpoint, or of the last validation if
    no checkpoint was ever written.
    """
    cfg.validate()
    if resume is not None:
        ckpt = read_checkpoint(resume)
        state, _ = restore_state(ckpt)
        max_iters = cfg.optimizer.max_iters
        cfg = replace(config_from_dict(ckpt["config"]), out_dir=cfg.out_dir, data_dir=cfg.data_dir)
        cfg = replace(cfg, optimizer=replace(cfg.optimizer, max_iters=max_iters))
    else:
        state = init_state(cfg)
        torch.manual_seed(cfg.seed)

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    labeled, unlabeled, val = prepare_data(cfg)
    state.composer = compose_batches(labeled, unlabeled, cfg.batch.labeled, cfg.batch.unlabeled,
                                     seed=cfg.seed, augment=cfg.augment)
    if resume is not None and ckpt.get("composer") is not None:
        state.composer.load_state_dict(ckpt["composer"])

    loss_path, val_path = out / "loss_log.jsonl", out / "val_log.jsonl"
    if resume is None:
        loss_path.write_text("")
        val_path.write_text("")
    else:
        _truncate_jsonl(loss_path, state.iter)
        _truncate_jsonl(val_path, state.iter + 1)

    best_record = None
    last_record = None
    with open(loss_path, "a") as loss_log, open(val_path, "a") as val_log:
        while state.iter < cfg.optimizer.max_iters:
            it = state.iter
            lr = lr_schedule(it, cfg.optimizer)
            state, report = train_step(state, next(state.composer), cfg)
            line = {"iter": it, "total": report.total, "sup1": report.sup1, "sup2": report.sup2,
                    "semi1": report.semi1, "semi2": report.semi2, "contra": report.contra,
                    "lambda": report.lambda_t, "lr": lr}
            loss_log.write(json.dumps(line) + "\n")
            loss_log.flush()

            if state.iter % cfg.eval_every == 0 or state.iter == cfg.optimizer.max_iters:
                dsc1, dsc2 = validate(state, val)
                record = select_and_checkpoint(state, dsc1, dsc2, cfg)
                last_record = record
                if record.path is not None:
                    best_record = record
                val_log.write(json.dumps({"iter": state.iter, "dsc1": dsc1, "dsc2": dsc2,
                                          "best_val_dsc": state.best_val_dsc,
                                          "chosen": record.chosen, "checkpoint": record.path}) + "\n")
                val_log.flush()
                save_checkpoint(out / "last.pt", state, cfg)
                log.info("iter %d: dsc1=%.4f dsc2=%.4f best=%.4f (%s)", state.iter, dsc1, dsc2,
                         state.best_val_dsc, state.best_network)
    save_checkpoint(out / "last.pt", state, cfg)
    return best_record or last_record
