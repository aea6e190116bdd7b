"""Training objective: supervised, cross-supervised and contrastive terms, ramp-up weight and total."""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

DICE_EPS = 1e-5
PAIRINGS = ("cross_network_same_image", "labeled_unlabeled_literal")


@dataclass
class RampUpConfig:
    lambda_max: float = 0.1
    ramp_iters: int = 6000

    def validate(self):
        if self.lambda_max < 0:
            raise ValueError(f"lambda_max must be >= 0, got {self.lambda_max}")
        if self.ramp_iters <= 0:
            raise ValueError(f"ramp_iters must be > 0, got {self.ramp_iters}")


@dataclass
class ContrastiveConfig:
    temperature: float = 0.07
    pairing: str = "cross_network_same_image"
    enabled: bool = True

    def validate(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.pairing not in PAIRINGS:
            raise ValueError(f"pairing must be one of {PAIRINGS}, got {self.pairing!r}")


@dataclass
class LossReport:
    total: float
    sup1: float
    sup2: float
    semi1: float
    semi2: float
    contra: float
    lambda_t: float

    def as_dict(self):
        return asdict(self)


def _check_shapes(logits, targets):
    if logits.dim() != 4 or targets.dim() != 3 or logits.shape[0] != targets.shape[0] \
            or logits.shape[2:] != targets.shape[1:]:
        raise ValueError(f"logits {tuple(logits.shape)} and targets {tuple(targets.shape)} do not agree")


def cross_entropy_loss(logits, targets):
    """Mean per-pixel negative log-likelihood of the target class."""
    _check_shapes(logits, targets)
    return F.cross_entropy(logits, targets.long())


def soft_dice_loss(logits, targets, eps=DICE_EPS):
    """1 - mean over classes of (2 sum(p g) + eps) / (sum(p) + sum(g) + eps), summed over the whole batch."""
    _check_shapes(logits, targets)
    num_classes = logits.shape[1]
    probs = logits.softmax(dim=1)
    onehot = F.one_hot(targets.long(), num_classes).permute(0, 3, 1, 2).to(probs.dtype)
    dims = (0, 2, 3)
    inter = (probs * onehot).sum(dims)
    denom = probs.sum(dims) + onehot.sum(dims)
    dice = (2 * inter + eps) / (denom + eps)
    return 1.0 - dice.mean()


def supervised_loss(logits, targets):
    return cross_entropy_loss(logits, targets) + soft_dice_loss(logits, targets)


def pseudo_label(logits):
    """Hard per-pixel argmax, detached from the producer; ties go to the lowest class index."""
    return logits.detach().argmax(dim=1)


def semi_supervised_loss(own_logits, other_pseudo):
    """CE + soft Dice of one network's logits against the other network's pseudo-labels."""
    if own_logits.shape[0] == 0:
        return own_logits.new_zeros(())
    return supervised_loss(own_logits, other_pseudo.detach())


def _check_keys(*tensors):
    for t in tensors:
        if t.numel() == 0:
            continue
        if not torch.isfinite(t).all():
            raise ValueError("representation contains non-finite values")
        norms = t.reshape(-1, t.shape[-1]).norm(dim=-1)
        if (norms == 0).any():
            raise ValueError("representation has zero norm")


def info_nce(q, k_pos, k_negs, tau):
    """-log(exp(q.k+/tau) / (exp(q.k+/tau) + sum exp(q.k-/tau))) for one query.

    ``k_negs`` is ``[K, D]`` (or a list of vectors); with no negatives the loss is 0.
    """
    if not tau > 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    if isinstance(k_negs, (list, tuple)):
        k_negs = torch.stack(list(k_negs)) if len(k_negs) else q.new_zeros((0, q.shape[-1]))
    _check_keys(q, k_pos, k_negs)
    pos = (q * k_pos).sum() / tau
    if k_negs.shape[0] == 0:
        return pos - pos
    logits = torch.cat([pos.reshape(1), (k_negs @ q) / tau])
    return torch.logsumexp(logits, dim=0) - pos


def _cross_network(z1, z2, tau):
    b = z1.shape[0]
    if b < 2:
        warnings.warn("contrastive batch of size 1 has no negatives; loss set to 0", stacklevel=3)
        return (z1 * 0).sum() + (z2 * 0).sum()
    sim = z1 @ z2.t() / tau
    target = torch.arange(b, device=z1.device)
    return 0.5 * (F.cross_entropy(sim, target) + F.cross_entropy(sim.t(), target))


def _literal(z1_lab, z2_unl, tau):
    if z1_lab.shape[0] == 0 or z2_unl.shape[0] == 0:
        return (z1_lab * 0).sum() + (z2_unl * 0).sum()
    sim = z1_lab @ z2_unl.t() / tau
    # mean over (i, j) of logsumexp_j' sim[i, j'] - sim[i, j]
    return (torch.logsumexp(sim, dim=1) - sim.mean(dim=1)).mean()


def contrastive_loss(z1, z2, labeled_idx, unlabeled_idx, cfg: ContrastiveConfig):
    """Contrastive coupling of the two networks' representations of one batch.

    ``cross_network_same_image``: each image's net-1 embedding must pick out
    its own net-2 embedding among all net-2 embeddings in the batch; averaged
    over images and symmetrised over the two networks.

    ``labeled_unlabeled_literal``: net-1 embeddings of labeled images are
    queries, net-2 embeddings of unlabeled images are keys; every
    (labeled, unlabeled) pair is a positive with the remaining unlabeled keys
    as negatives, averaged over pairs.
    """
    cfg.validate()
    _check_keys(z1, z2)
    if z1.shape != z2.shape:
        raise ValueError(f"representation batches differ: {tuple(z1.shape)} vs {tuple(z2.shape)}")
    if cfg.pairing == "cross_network_same_image":
        return _cross_network(z1, z2, cfg.temperature)
    labeled_idx = torch.as_tensor(list(labeled_idx), dtype=torch.long)
    unlabeled_idx = torch.as_tensor(list(unlabeled_idx), dtype=torch.long)
    return _literal(z1[labeled_idx], z2[unlabeled_idx], cfg.temperature)


def ramp_up_lambda(iteration: int, cfg: RampUpConfig) -> float:
    """Gaussian ramp lambda_max * exp(-5 (1 - t/T)^2), flat at lambda_max after T."""
    if iteration < 0:
        raise ValueError(f"iteration must be >= 0, got {iteration}")
    if iteration >= cfg.ramp_iters:
        return float(cfg.lambda_max)
    phase = 1.0 - iteration / cfg.ramp_iters
    return cfg.lambda_max * math.exp(-5.0 * phase * phase)


def weighted_total(sup1, sup2, semi1, semi2, contra, lambda_t):
    return (sup1 + sup2) + lambda_t * (semi1 + semi2) + contra


def total_loss(sup1, sup2, semi1, semi2, contra, lambda_t) -> LossReport:
    """Combine the five terms; lambda weighs only the cross-supervised pair."""
    terms = {"sup1": sup1, "sup2": sup2, "semi1": semi1, "semi2": semi2, "contra": contra, "lambda_t": lambda_t}
    values = {}
    for name, value in terms.items():
        value = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not math.isfinite(value):
            raise ValueError(f"loss term {name} is not finite ({value})")
        values[name] = value
    total = weighted_total(values["sup1"], values["sup2"], values["semi1"], values["semi2"],
                           values["contra"], values["lambda_t"])
    return LossReport(total=total, **values)
