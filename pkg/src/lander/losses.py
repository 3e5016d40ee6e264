"""Training objectives, pure and stateless.

Scalars are returned as 0-dim torch tensors so the same functions serve both
oracle tests (no grad) and training (with grad). Batch reduction is the
arithmetic mean throughout.
"""

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import DimMismatchError, InvalidTaskOneError, LayerMismatchError


@dataclass
class ScaleFactors:
    """Adaptive weights balancing the new-task and old-task loss terms."""

    alpha_cur_t: float
    alpha_pre_t: float
    kappa: float
    delta: float


@dataclass
class LossWeights:
    lambda_bn: float = 1.0
    lambda_oh: float = 0.5
    lambda_ltc: float = 5.0
    radius: float = 0.0
    kd_temperature: float = 1.0

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError("radius must be >= 0")
        if self.kd_temperature <= 0:
            raise ValueError("kd temperature must be > 0")


def _check_same_shape(a, b, what):
    if a.shape != b.shape:
        raise DimMismatchError(f"{what}: {tuple(a.shape)} vs {tuple(b.shape)}")


def bounding_loss(feature, anchor, projector, radius: float):
    """Hinge on the squared distance between projected feature and anchor.

    Zero inside the radius, linear in the squared distance outside; averaged
    over the batch.
    """
    projected = projector(feature)
    _check_same_shape(projected, anchor, "bounding_loss projection vs anchor")
    sq_dist = ((anchor - projected) ** 2).sum(dim=-1)
    return torch.clamp(sq_dist - radius, min=0).mean()


def feature_mse(feat_a, feat_b):
    """Mean squared difference over all elements."""
    _check_same_shape(feat_a, feat_b, "feature_mse")
    return ((feat_a - feat_b) ** 2).mean()


def kd_kl(student_logits, teacher_logits, temperature: float = 1.0):
    """KL from the teacher's softened distribution to the student's, batch mean."""
    _check_same_shape(student_logits, teacher_logits, "kd_kl")
    log_p_t = F.log_softmax(teacher_logits / temperature, dim=-1)
    log_p_s = F.log_softmax(student_logits / temperature, dim=-1)
    return (log_p_t.exp() * (log_p_t - log_p_s)).sum(dim=-1).mean()


def per_sample_kd_kl(student_logits, teacher_logits, temperature: float = 1.0):
    """Per-sample KL (teacher to student), no batch reduction."""
    _check_same_shape(student_logits, teacher_logits, "per_sample_kd_kl")
    log_p_t = F.log_softmax(teacher_logits / temperature, dim=-1)
    log_p_s = F.log_softmax(student_logits / temperature, dim=-1)
    return (log_p_t.exp() * (log_p_t - log_p_s)).sum(dim=-1)


def adaptive_scale_factors(
    n_new: int, n_prev: int, alpha_cur: float, alpha_pre: float
) -> ScaleFactors:
    """Rebalance current vs previous loss as the seen-class ratio grows."""
    if n_prev < 1:
        raise InvalidTaskOneError("scale factors are only defined from the second task on")
    if n_new < 1:
        raise ValueError("n_new must be >= 1")
    kappa = math.log2(n_new / 2 + 1)
    delta = math.sqrt(n_prev / n_new)
    return ScaleFactors(
        alpha_cur_t=(1 + 1 / kappa) / delta * alpha_cur,
        alpha_pre_t=kappa * delta * alpha_pre,
        kappa=kappa,
        delta=delta,
    )


def client_loss_current(logits, labels, feature, anchor, projector, radius, lambda_ltc):
    """Cross-entropy on real data plus the anchor bounding term."""
    if int(labels.max()) >= logits.shape[-1]:
        raise DimMismatchError("label exceeds head width")
    loss = F.cross_entropy(logits, labels)
    if lambda_ltc != 0:
        loss = loss + lambda_ltc * bounding_loss(feature, anchor, projector, radius)
    return loss


def client_loss_previous(client_logits, server_logits, client_feat, server_feat, temperature=1.0):
    """Distillation from the frozen previous server: logit KL plus feature MSE."""
    return kd_kl(client_logits, server_logits, temperature) + feature_mse(
        client_feat, server_feat
    )


def client_total(loss_cur, loss_pre, factors: ScaleFactors):
    return factors.alpha_cur_t * loss_cur + factors.alpha_pre_t * loss_pre


def gen_oh_loss(teacher_logits, pseudo_labels):
    """Push the teacher to classify synthetic images as their pseudo labels."""
    return F.cross_entropy(teacher_logits, pseudo_labels)


def gen_bn_loss(batch_stats, running_stats):
    """Sum over layers of L2 distances between synthetic-batch and running
    batch-norm statistics (means and variances)."""
    if len(batch_stats) != len(running_stats):
        raise LayerMismatchError(
            f"{len(batch_stats)} batch-stat layers vs {len(running_stats)} running"
        )
    total = None
    for (mu_b, var_b), (mu_r, var_r) in zip(batch_stats, running_stats):
        _check_same_shape(mu_b, mu_r, "gen_bn_loss mean")
        _check_same_shape(var_b, var_r, "gen_bn_loss var")
        term = torch.norm(mu_b - mu_r, p=2) + torch.norm(var_b - var_r, p=2)
        total = term if total is None else total + term
    return total


def gen_adv_loss(student_logits, teacher_logits, temperature: float = 1.0):
    """Negative KL, masked to samples where student and teacher disagree.

    Drives the generator toward images the student has not learned yet;
    nonpositive by construction.
    """
    _check_same_shape(student_logits, teacher_logits, "gen_adv_loss")
    disagree = (teacher_logits.argmax(dim=-1) != student_logits.argmax(dim=-1)).float()
    kl = per_sample_kd_kl(student_logits, teacher_logits, temperature)
    return -(disagree * kl).mean()


def gen_ltc_loss(teacher_feature, anchor, teacher_projector, radius):
    """Keep synthetic images inside the anchor neighborhoods of the teacher."""
    return bounding_loss(teacher_feature, anchor, teacher_projector, radius)


def gen_total(adv, bn, oh, ltc, weights: LossWeights):
    return adv + weights.lambda_bn * bn + weights.lambda_oh * oh + weights.lambda_ltc * ltc
