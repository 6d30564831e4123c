"""Adversarial domain losses, classifier diversity, focal loss and the joint objective.

Discriminator outputs are probabilities of "target" (source = 0, target = 1).
The minimax game is folded into one descent objective: gradient reversal puts
the extractor (for D1) and the shared head (for D2) on the ascent side, and
the diversity term enters with a minus sign so descent maximizes diversity.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch

from .networks import DTYPE, ModelBundle, as_tensor, grl, stop_gradient

DOMAIN_MEASURES = ("least_square", "gan", "focal")
DIVERSITY_MEASURES = ("cosine", "l1", "l2", "kl", "js")
CLASSIFICATION_LOSSES = ("focal", "ce")


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.1
    beta: float = 0.1
    gamma: float = 2.0
    domain_measure: str = "least_square"
    diversity_measure: str = "cosine"
    eps: float = 1e-8
    # ablation switches
    classification: str = "focal"
    use_d1: bool = True
    use_d2: bool = True
    use_div: bool = True

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise LossError("alpha, beta and gamma must be nonnegative")
        if self.eps <= 0:
            raise LossError("eps must be positive")
        if self.domain_measure not in DOMAIN_MEASURES:
            raise LossError(f"unknown domain measure {self.domain_measure!r}")
        if self.diversity_measure not in DIVERSITY_MEASURES:
            raise LossError(f"unknown diversity measure {self.diversity_measure!r}")
        if self.classification not in CLASSIFICATION_LOSSES:
            raise LossError(f"unknown classification loss {self.classification!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LossReport:
    focal: float
    d1: float
    d2: float
    div: float
    total: float
    step: int = -1

    def as_record(self) -> dict:
        return {"step": self.step, "L_f": self.focal, "L_d1": self.d1, "L_d2": self.d2,
                "L_div": self.div, "J": self.total}

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in (self.focal, self.d1, self.d2, self.div, self.total))


def _nonempty(*tensors: torch.Tensor) -> None:
    for t in tensors:
        if t.numel() == 0:
            raise LossError("empty batch")


def domain_loss_d1(d_source, d_target) -> torch.Tensor:
    """Least-square domain loss: mean d^2 over source plus mean (1-d)^2 over target."""
    d_source, d_target = as_tensor(d_source), as_tensor(d_target)
    _nonempty(d_source, d_target)
    return (d_source ** 2).mean() + ((1.0 - d_target) ** 2).mean()


def domain_loss_d2(d_source, d_target) -> torch.Tensor:
    # same least-square form, fed with D2 outputs over [f, C_d(f)]
    return domain_loss_d1(d_source, d_target)


def _binary_focal(p_true: torch.Tensor, gamma: float, eps: float) -> torch.Tensor:
    p = p_true.clamp(eps, 1.0)
    return -((1.0 - p) ** gamma * torch.log(p))


def domain_loss_variant(measure: str, d_source, d_target, gamma: float = 2.0,
                        eps: float = 1e-8) -> torch.Tensor:
    d_source, d_target = as_tensor(d_source), as_tensor(d_target)
    _nonempty(d_source, d_target)
    if measure == "least_square":
        return domain_loss_d1(d_source, d_target)
    if measure == "gan":
        ds = d_source.clamp(eps, 1.0 - eps)
        dt = d_target.clamp(eps, 1.0 - eps)
        return (-torch.log(1.0 - ds)).mean() + (-torch.log(dt)).mean()
    if measure == "focal":
        # two-class one-hot on the domain label, prediction [1 - d, d]
        return (_binary_focal(1.0 - d_source, gamma, eps).mean()
                + _binary_focal(d_target, gamma, eps).mean())
    raise LossError(f"unknown domain measure {measure!r}")


def _check_probs(p: torch.Tensor, what: str) -> None:
    if p.dim() != 2:
        raise LossError(f"{what} must be a batch of probability vectors")
    with torch.no_grad():
        if (p < -1e-12).any() or ((p.sum(dim=1) - 1.0).abs() > 1e-6).any():
            raise LossError(f"{what} is not a probability vector")


def pair_similarity(a: torch.Tensor, b: torch.Tensor, measure: str, eps: float = 1e-8) -> torch.Tensor:
    """Per-row similarity in [0, 1], equal to 1 when the two predictions coincide.

    Distances are turned into similarities by their largest possible value on
    probability vectors (2 for L1, sqrt(2) for L2, ln 2 for JS); KL is unbounded
    and mapped through exp(-KL).
    """
    if measure == "cosine":
        num = (a * b).sum(dim=1)
        den = (a.norm(dim=1) * b.norm(dim=1)).clamp_min(eps)
        return num / den
    if measure == "l1":
        return 1.0 - (a - b).abs().sum(dim=1) / 2.0
    if measure == "l2":
        # eps inside the root keeps the gradient finite at a == b
        return 1.0 - torch.sqrt(((a - b) ** 2).sum(dim=1) + eps ** 2) / math.sqrt(2.0)
    la, lb = torch.log(a.clamp_min(eps)), torch.log(b.clamp_min(eps))
    if measure == "kl":
        return torch.exp(-(a * (la - lb)).sum(dim=1))
    if measure == "js":
        m = 0.5 * (a + b)
        lm = torch.log(m.clamp_min(eps))
        js = 0.5 * (a * (la - lm)).sum(dim=1) + 0.5 * (b * (lb - lm)).sum(dim=1)
        return 1.0 - js / math.log(2.0)
    raise LossError(f"unknown diversity measure {measure!r}")


def diversity_loss(shared_source, specific_source, shared_target, specific_target,
                   measure: str = "cosine", eps: float = 1e-8) -> torch.Tensor:
    """Negated mean similarity of shared vs. specific predictions, summed over domains.

    Lies in [-2, 0]; -2 when every pair agrees. Larger means more diverse
    classifiers, for every measure.
    """
    tensors = [as_tensor(t) for t in (shared_source, specific_source, shared_target, specific_target)]
    _nonempty(*tensors)
    for t, name in zip(tensors, ("shared_source", "specific_source", "shared_target", "specific_target")):
        _check_probs(t, name)
    ss, ps, st, pt = tensors
    if ss.shape != ps.shape or st.shape != pt.shape:
        raise LossError("paired predictions differ in shape")
    return (-pair_similarity(ss, ps, measure, eps).mean()
            - pair_similarity(st, pt, measure, eps).mean())


def one_hot(labels, n_classes: int = 2) -> torch.Tensor:
    y = torch.as_tensor(labels)
    if y.dtype.is_floating_point:
        raise LossError("labels must be integers")
    if y.numel() and (y.min() < 0 or y.max() >= n_classes):
        raise LossError("label out of range")
    return torch.nn.functional.one_hot(y.long(), n_classes).to(DTYPE)


def focal_loss(y, y_hat, gamma: float = 2.0, eps: float = 1e-8) -> torch.Tensor:
    """-mean_i sum_c y_ic (1 - p_ic)^gamma log p_ic with p clamped to [eps, 1]."""
    y, y_hat = as_tensor(y), as_tensor(y_hat)
    if y.shape != y_hat.shape:
        raise LossError(f"label shape {tuple(y.shape)} != prediction shape {tuple(y_hat.shape)}")
    if y.numel() == 0:
        raise LossError("no labeled examples")
    if torch.isnan(y).any():
        raise LossError("unlabeled example passed to focal loss")
    p = y_hat.clamp(eps, 1.0)
    return -(y * (1.0 - p) ** gamma * torch.log(p)).sum(dim=1).mean()


def cross_entropy(y, y_hat, eps: float = 1e-8) -> torch.Tensor:
    y, y_hat = as_tensor(y), as_tensor(y_hat)
    return -(y * torch.log(y_hat.clamp(eps, 1.0))).sum(dim=1).mean()


def composite_objective(batch, bundle: ModelBundle, cfg: LossConfig) -> tuple[torch.Tensor, LossReport]:
    """Forward one TriStreamBatch and assemble J = L_f + a(L_d1 + L_d2) - b L_div.

    Returns the differentiable J and a LossReport of detached values. Disabled
    terms are evaluated without a graph so they are reported but carry no
    gradient.
    """
    xs = as_tensor(batch.source_x)
    xl = as_tensor(batch.target_labeled_x)
    xt = as_tensor(batch.target_x)
    n_s, n_l = xs.shape[0], xl.shape[0]
    if n_s + n_l == 0:
        raise LossError("batch holds no labeled examples")
    if xt.shape[0] == 0 or n_s == 0:
        raise LossError("batch needs both source and target examples")

    f_all = bundle.extractor(torch.cat([xs, xt], dim=0))
    f_s, f_t = f_all[:n_s], f_all[n_s:]
    f_l = f_t[:n_l]  # labeled target rows come first in target_x

    # classification on the ensemble predictions
    y_lab = torch.cat([one_hot(batch.source_y), one_hot(batch.target_labeled_y)], dim=0)
    p_src = 0.5 * (bundle.c_d(f_s) + bundle.c_s(f_s))
    p_tgt = 0.5 * (bundle.c_d(f_l) + bundle.c_t(f_l))
    y_hat = torch.cat([p_src, p_tgt], dim=0)
    if cfg.classification == "focal":
        l_f = focal_loss(y_lab, y_hat, cfg.gamma, cfg.eps)
    else:
        l_f = cross_entropy(y_lab, y_hat, cfg.eps)

    total = l_f
    domain_on = cfg.alpha > 0

    def domain(d_src, d_tgt):
        return domain_loss_variant(cfg.domain_measure, d_src, d_tgt, cfg.gamma, cfg.eps)

    # D1 on features; the extractor sees the reversed gradient
    with torch.set_grad_enabled(torch.is_grad_enabled() and cfg.use_d1 and domain_on):
        d1 = bundle.d1(grl(f_all, 1.0))
        l_d1 = domain(d1[:n_s], d1[n_s:])
    if cfg.use_d1 and domain_on:
        total = total + cfg.alpha * l_d1

    # D2 on [f, C_d(f)]; features detached, shared head reversed
    f_det = stop_gradient(f_all)
    with torch.set_grad_enabled(torch.is_grad_enabled() and cfg.use_d2 and domain_on):
        joint = torch.cat([f_det, grl(bundle.c_d(f_det), 1.0)], dim=1)
        d2 = bundle.d2(joint)
        l_d2 = domain(d2[:n_s], d2[n_s:])
    if cfg.use_d2 and domain_on:
        total = total + cfg.alpha * l_d2

    # diversity between shared and specific heads; features detached
    div_on = cfg.use_div and cfg.beta > 0
    with torch.set_grad_enabled(torch.is_grad_enabled() and div_on):
        fs_det, ft_det = f_det[:n_s], f_det[n_s:]
        l_div = diversity_loss(bundle.c_d(fs_det), bundle.c_s(fs_det),
                               bundle.c_d(ft_det), bundle.c_t(ft_det),
                               cfg.diversity_measure, cfg.eps)
    if div_on:
        total = total - cfg.beta * l_div

    report = LossReport(
        focal=float(l_f.detach()), d1=float(l_d1.detach()), d2=float(l_d2.detach()),
        div=float(l_div.detach()), total=float(total.detach()),
    )
    return total, report
