"""Interactive training loop: simulated correction rounds per batch, composite
loss, AdamW with a cosine learning-rate schedule, light augmentation, per-epoch
checkpoints and a CSV metrics log.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import loss as L
from .loss import LossConfig
from .metrics import dice_and_recall, evaluate_masks
from .network import PromptMap, RoadNet
from .prompts import PromptSimConfig, expert_uncertainty, rasterize, simulate_round


class TrainingDiverged(Exception):
    """Loss went non-finite; message carries the offending batch seed."""


class AdamW:
    """Adam with decoupled weight decay over a named parameter dict."""

    def __init__(self, params, lr=3e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if self.weight_decay:
                p.data -= lr * self.weight_decay * p.data
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            mhat = self.m[k] / (1 - self.b1**self.t)
            vhat = self.v[k] / (1 - self.b2**self.t)
            p.data -= lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def cosine_lr(step, total_steps, base_lr):
    """base_lr at step 0, exactly 0 at the final step."""
    if total_steps <= 1:
        return base_lr if step == 0 else 0.0
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * step / (total_steps - 1)))


@dataclass
class TrainConfig:
    rounds_per_batch: int = 5
    prompts_min: int = 1
    prompts_max: int = 3
    lr: float = 3e-4
    weight_decay: float = 1e-4
    batch_size: int = 4
    epochs: int = 20
    augment_rotate90: bool = True
    augment_flip: bool = True
    augment_brightness_contrast: bool = True
    augment_gaussian_blur: bool = True
    expert_guided_fraction: float = 0.5
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    prompt_sim: PromptSimConfig = field(default_factory=PromptSimConfig)

    def __post_init__(self):
        if self.rounds_per_batch < 1:
            raise ValueError("rounds_per_batch must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if not (0 <= self.expert_guided_fraction <= 1):
            raise ValueError("expert_guided_fraction must be in [0,1]")
        if not (1 <= self.prompts_min <= self.prompts_max):
            raise ValueError("bad prompts range")


def _augment(image, mask, cfg, rng):
    """Jointly rotate/flip; photometric jitter and blur touch the image only."""
    img = image.copy()
    msk = mask.copy()
    if cfg.augment_rotate90:
        k = int(rng.integers(0, 4))
        img = np.rot90(img, k, axes=(0, 1))
        msk = np.rot90(msk, k)
    if cfg.augment_flip and rng.random() < 0.5:
        img = img[:, ::-1]
        msk = msk[:, ::-1]
    if cfg.augment_brightness_contrast and rng.random() < 0.5:
        gain = rng.uniform(0.85, 1.15)
        bias = rng.uniform(-0.08, 0.08)
        img = np.clip(img * gain + bias, 0.0, 1.0)
    if cfg.augment_gaussian_blur and rng.random() < 0.3:
        img = ndimage.gaussian_filter(img, sigma=(rng.uniform(0.4, 1.0),) * 2 + (0,))
    return np.ascontiguousarray(img), np.ascontiguousarray(msk)


def _stack_inputs(images, masks_prev, prompt_maps):
    chans = [
        np.concatenate(
            [
                img,
                m[:, :, None],
                pm.positive[:, :, None],
                pm.negative[:, :, None],
            ],
            axis=2,
        )
        for img, m, pm in zip(images, masks_prev, prompt_maps)
    ]
    return np.stack(chans).astype(np.float32)


def _apply_strokes(prompt_map, strokes):
    h, w = prompt_map.positive.shape
    for s in strokes:
        prompt_map.accumulate(rasterize(s, h, w), s.polarity)


def interaction_rollout(net, images, labels, cfg, rng, experts=None, train=True):
    """Run rounds_per_batch simulated-interaction rounds over one batch.

    Returns (loss_tensor or None, parts dict, final probabilities [N,H,W]).
    The soft mask fed to the next round carries no gradient history.
    """
    n = len(images)
    h, w = labels[0].shape
    prompt_maps = [PromptMap(h, w) for _ in range(n)]
    m_prev = [np.zeros((h, w), dtype=np.float32) for _ in range(n)]
    y_hat = [np.zeros((h, w), dtype=bool) for _ in range(n)]
    unc = None
    if experts:
        unc = [expert_uncertainty(img, lab, experts) for img, lab in zip(images, labels)]
    total = None
    parts_acc = {"focal": 0.0, "dice": 0.0, "skeleton_recall": 0.0}
    probs = None
    n_prompts = lambda: int(rng.integers(cfg.prompts_min, cfg.prompts_max + 1))
    for _ in range(cfg.rounds_per_batch):
        for i in range(n):
            use_eg = unc is not None and rng.random() < cfg.expert_guided_fraction
            strokes = simulate_round(
                labels[i], y_hat[i], rng, cfg.prompt_sim, n_prompts(),
                uncertainty=unc[i] if use_eg else None,
            )
            _apply_strokes(prompt_maps[i], strokes)
        batch = _stack_inputs(images, m_prev, prompt_maps)
        logits = net.forward(batch)
        p = L.probs_from_logits(logits)
        if train:
            for i in range(n):
                excl = 1.0 - prompt_maps[i].coverage_mask()
                sl, parts = L.total_loss(p[i], labels[i], excl, cfg.loss)
                scaled = sl * (1.0 / n)
                total = scaled if total is None else total + scaled
                for k in parts_acc:
                    parts_acc[k] += parts[k] / (n * cfg.rounds_per_batch)
        probs = p.data
        for i in range(n):
            m_prev[i] = (
                probs[i].astype(np.float32)
                if net.config.soft_mask_feedback
                else (probs[i] > net.config.threshold).astype(np.float32)
            )
            y_hat[i] = probs[i] > net.config.threshold
    return total, parts_acc, probs


def train_interactive(net: RoadNet, scenes, cfg: TrainConfig, outdir,
                      val_scenes=None, experts=None, quiet=False):
    """Full training run; writes checkpoints and a CSV log under outdir.

    scenes / val_scenes: sequences of (image [H,W,3], mask [H,W]) pairs or
    objects with .image/.mask.  Returns the log rows.
    """
    os.makedirs(outdir, exist_ok=True)
    pairs = [_as_pair(s) for s in scenes]
    val_pairs = [_as_pair(s) for s in (val_scenes or [])]
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(net.params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    steps_per_epoch = max(1, len(pairs) // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    rows = []
    step = 0
    log_path = os.path.join(outdir, "train_log.csv")
    fieldnames = ["epoch", "step", "lr", "loss", "focal", "dice", "skeleton_recall"] + [
        f"val_dice_round_{r + 1}" for r in range(cfg.rounds_per_batch)
    ]
    with open(log_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(pairs))
            epoch_loss = []
            for b in range(steps_per_epoch):
                idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
                if len(idx) == 0:
                    continue
                batch_seed = int(rng.integers(0, 2**31))
                brng = np.random.default_rng(batch_seed)
                images, labels = [], []
                for i in idx:
                    img, msk = _augment(pairs[i][0], pairs[i][1], cfg, brng)
                    images.append(img)
                    labels.append(msk)
                loss_t, parts, _ = interaction_rollout(
                    net, images, labels, cfg, brng, experts=experts
                )
                if loss_t is None:
                    continue
                if not np.isfinite(loss_t.data):
                    raise TrainingDiverged(f"non-finite loss at batch seed {batch_seed}")
                opt.zero_grad()
                loss_t.backward()
                lr = cosine_lr(step, total_steps, cfg.lr)
                opt.step(lr=lr)
                epoch_loss.append(float(loss_t.data))
                step += 1
            val_dice = _validate(net, val_pairs, cfg)
            row = {
                "epoch": epoch,
                "step": step,
                "lr": cosine_lr(max(step - 1, 0), total_steps, cfg.lr),
                "loss": float(np.mean(epoch_loss)) if epoch_loss else float("nan"),
                **{k: round(v, 6) for k, v in parts.items()},
                **{f"val_dice_round_{r + 1}": val_dice[r] for r in range(cfg.rounds_per_batch)},
            }
            rows.append(row)
            writer.writerow(row)
            f.flush()
            net.save(os.path.join(outdir, f"epoch_{epoch:03d}.rgie"))
            if not quiet:
                print(
                    f"epoch {epoch}: loss {row['loss']:.4f} "
                    f"val_dice {[round(d, 3) for d in val_dice]}"
                )
    net.save(os.path.join(outdir, "final.rgie"))
    return rows


def _as_pair(s):
    if isinstance(s, tuple):
        img, msk = s
    else:
        img, msk = s.image, s.mask
    return np.asarray(img, dtype=np.float32), np.asarray(msk, dtype=bool)


def _validate(net, val_pairs, cfg, max_scenes=16):
    """Per-round mean Dice on the validation split, fixed simulation seed."""
    if not val_pairs:
        return [float("nan")] * cfg.rounds_per_batch
    vrng = np.random.default_rng(1234)
    dices = np.zeros(cfg.rounds_per_batch)
    subset = val_pairs[:max_scenes]
    for img, msk in subset:
        per_round = _rollout_eval(net, img, msk, cfg.rounds_per_batch, vrng,
                                  cfg.prompt_sim, cfg.prompts_min)
        dices += np.array([d["dice"] for d in per_round])
    return list(np.round(dices / len(subset), 6))


def _rollout_eval(model, image, label, n_rounds, rng, sim_cfg, prompts_per_round=1,
                  metrics=("dice",)):
    """Oracle-corrected evaluation rollout for one scene; metric dict per round."""
    h, w = label.shape
    pm = PromptMap(h, w)
    m_prev = np.zeros((h, w), dtype=np.float32)
    y_hat = np.zeros((h, w), dtype=bool)
    out = []
    img_chw = image.transpose(2, 0, 1) if image.ndim == 3 else image
    soft = getattr(getattr(model, "config", None), "soft_mask_feedback", True)
    for _ in range(n_rounds):
        strokes = simulate_round(label, y_hat, rng, sim_cfg, prompts_per_round)
        _apply_strokes(pm, strokes)
        logits, y_hat = model.forward_step(img_chw, m_prev, pm)
        prob = 1.0 / (1.0 + np.exp(-logits))
        m_prev = prob.astype(np.float32) if soft else y_hat.astype(np.float32)
        if metrics == ("dice",):
            d, _ = dice_and_recall(y_hat, label)
            out.append({"dice": d})
        else:
            out.append(evaluate_masks(y_hat, label))
    return out


def evaluate_rounds(model, scenes, prompting_kind, n_rounds, seed=0,
                    prompts_per_round=1, full_metrics=False):
    """Mean metric table per interaction round for one prompting kind.

    prompting_kind: 'point', 'center', 'line' or 'bezier'.  Returns a list
    of dicts, one per round.
    """
    if prompting_kind == "point":
        sim = PromptSimConfig(kinds=("point",))
    elif prompting_kind in ("center", "line", "bezier"):
        sim = PromptSimConfig(kinds=(prompting_kind,))
    else:
        raise ValueError(f"unknown prompting kind {prompting_kind!r}")
    rng = np.random.default_rng(seed)
    pairs = [_as_pair(s) for s in scenes]
    acc = [dict() for _ in range(n_rounds)]
    which = None if full_metrics else ("dice",)
    for img, msk in pairs:
        per_round = _rollout_eval(
            model, img, msk, n_rounds, rng, sim, prompts_per_round,
            metrics=which or "all",
        )
        for r, m in enumerate(per_round):
            for k, v in m.items():
                acc[r][k] = acc[r].get(k, 0.0) + float(v) / len(pairs)
    return acc
