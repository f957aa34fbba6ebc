"""Composite training objective: focal term + soft dice + prompt-excluded
skeleton recall, built on the autodiff tensor so gradients flow end to end.

Sign convention: total = focal - dice - skeleton_recall, so lower is better
(a perfect prediction with no prompts scores -1.5 under the default,
capped, recall denominator).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

_CLAMP = 1e-7


@dataclass
class LossConfig:
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    epsilon: float = 1.0
    soft_skeleton_iterations: int = 10
    # The skeleton-recall denominator carries a factor 2, capping that term
    # at 0.5.  Set False for the uncapped variant (max 1.0).
    keep_paper_denominator: bool = True
    # False drops the skeleton-recall term entirely (focal + dice only);
    # used by the ablation comparison.
    use_skeleton_term: bool = True
    # Include the (1-alpha)*p^gamma*(-log(1-p)) background half of the focal
    # term in the total loss.  Without it nothing but the dice denominator
    # discourages false positives and training falls into an all-foreground
    # basin.
    focal_background: bool = True

    def __post_init__(self):
        if self.focal_gamma < 0:
            raise ValueError("focal_gamma must be >= 0")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.soft_skeleton_iterations < 1:
            raise ValueError("soft_skeleton_iterations must be >= 1")


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


def probs_from_logits(logits):
    """Clamped sigmoid; keeps every log() finite."""
    return _as_tensor(logits).sigmoid().clamp(_CLAMP, 1.0 - _CLAMP)


def focal_loss(y_hat, y, alpha=0.25, gamma=2.0, include_background=False):
    """Focal term, normalized by total pixel count.

    Default form: mean_i alpha * (1 - p_i)^gamma * y_i * (-log p_i); pixels
    with y=0 contribute nothing.  With include_background=True the standard
    negative-class half, (1-alpha) * p^gamma * (1-y) * (-log(1-p)), is added.
    """
    p = _as_tensor(y_hat).clamp(_CLAMP, 1.0 - _CLAMP)
    yv = np.asarray(y, dtype=p.dtype)
    term = ((1.0 - p) ** gamma) * p.log() * Tensor(yv) * (-alpha)
    if include_background:
        term = term + (p**gamma) * (1.0 - p).log() * Tensor(1.0 - yv) * (-(1.0 - alpha))
    return term.mean()


def soft_dice(y_hat, y, epsilon=1.0):
    """(2*sum(p*y) + eps) / (sum(p) + sum(y) + eps); 1.0 for a perfect match."""
    p = _as_tensor(y_hat)
    yv = Tensor(np.asarray(y, dtype=p.dtype))
    inter = (p * yv).sum()
    return (inter * 2.0 + epsilon) / (p.sum() + yv.sum() + epsilon)


def soft_skeleton(y, iterations=10):
    """Differentiable morphological skeleton.

    Repeated soft erosion (3x3 min-pool) with soft opening; the residual
    (eroded - opened) is accumulated as the skeleton response.  Input is
    [H,W] or [N,H,W]; output matches the input shape with values in [0,1].
    """
    t = _as_tensor(y)
    shape = t.shape
    if len(shape) == 2:
        x = t.reshape(1, *shape, 1)
    elif len(shape) == 3:
        x = t.reshape(*shape, 1)
    else:
        raise ValueError(f"expected [H,W] or [N,H,W], got {shape}")
    opened = ad.max_pool3x3(ad.min_pool3x3(x))
    skel = (x - opened).relu()
    for _ in range(iterations):
        x = ad.min_pool3x3(x)
        opened = ad.max_pool3x3(ad.min_pool3x3(x))
        delta = (x - opened).relu()
        skel = skel + (delta - skel * delta).relu()
    return skel.reshape(*shape)


def exclusion_from_prompt_map(prompt_map):
    """Binary map that is 1 wherever no prompt support (soft value >= 0.5) lies."""
    return 1.0 - prompt_map.coverage_mask()


def prompt_excluded_skeleton_recall(y_hat, y, exclusion=None, cfg: LossConfig = None):
    """How much of the label's skeleton the prediction recovers, counting
    only prompt-free pixels.

    Returns (recall_tensor, fully_covered).  fully_covered is True when the
    entire skeleton lies under prompts, in which case the term is ~0 and
    carries no gradient signal.
    """
    cfg = cfg or LossConfig()
    p = _as_tensor(y_hat)
    yv = np.asarray(y, dtype=p.dtype)
    skel = soft_skeleton(Tensor(yv), cfg.soft_skeleton_iterations).data
    if exclusion is None:
        excl = np.ones_like(yv)
    else:
        excl = np.asarray(exclusion, dtype=p.dtype)
        if excl.shape != yv.shape:
            raise ValueError("exclusion mask shape mismatch")
    weight = skel * excl  # constant w.r.t. the prediction
    denom_sum = float(weight.sum())
    fully_covered = denom_sum <= _CLAMP
    factor = 2.0 if cfg.keep_paper_denominator else 1.0
    num = (p * Tensor(weight)).sum()
    denom = cfg.epsilon if fully_covered else factor * denom_sum
    recall = num / denom
    return recall, fully_covered


def total_loss(y_hat, y, exclusion=None, cfg: LossConfig = None):
    """focal - dice - skeleton_recall.  Returns (loss_tensor, parts dict)."""
    cfg = cfg or LossConfig()
    p = _as_tensor(y_hat)
    focal = focal_loss(p, y, cfg.focal_alpha, cfg.focal_gamma,
                       include_background=cfg.focal_background)
    dice = soft_dice(p, y, cfg.epsilon)
    if cfg.use_skeleton_term:
        recall, fully_covered = prompt_excluded_skeleton_recall(p, y, exclusion, cfg)
        loss = focal - dice - recall
    else:
        recall, fully_covered = Tensor(np.zeros((), dtype=p.dtype)), False
        loss = focal - dice
    parts = {
        "focal": float(focal.data),
        "dice": float(dice.data),
        "skeleton_recall": float(recall.data),
        "skeleton_fully_covered": fully_covered,
    }
    return loss, parts
