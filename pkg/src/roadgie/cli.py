"""Command-line entry point: dataset generation, training, evaluation,
ablation comparisons and the annotation HTTP server.

Every failure class exits nonzero with a single-line diagnostic on stderr.
"""

from __future__ import annotations

import json
import os
import sys

import click
import numpy as np

from .config import load_kv
from .loss import LossConfig
from .network import NetworkConfig, RoadNet
from .synth import SceneConfig, generate_split, load_split
from .train import TrainConfig, evaluate_rounds, train_interactive


def _fail(msg):
    click.echo(f"error: {msg}", err=True)
    sys.exit(1)


def _load_pairs(data_dir):
    if not os.path.isfile(os.path.join(data_dir, "manifest.json")):
        _fail(f"no dataset manifest in {data_dir}")
    return [(img, mask) for _, img, mask, _ in load_split(data_dir)]


def _train_config_from_kv(kv):
    cfg = TrainConfig()
    scalar = {
        "rounds_per_batch": int, "prompts_min": int, "prompts_max": int,
        "lr": float, "weight_decay": float, "batch_size": int, "epochs": int,
        "expert_guided_fraction": float, "seed": int,
        "augment_rotate90": lambda v: bool(int(v)),
        "augment_flip": lambda v: bool(int(v)),
        "augment_brightness_contrast": lambda v: bool(int(v)),
        "augment_gaussian_blur": lambda v: bool(int(v)),
    }
    for key, cast in scalar.items():
        if key in kv:
            setattr(cfg, key, cast(kv[key]))
    loss_keys = {
        "focal_alpha": float, "focal_gamma": float, "epsilon": float,
        "soft_skeleton_iterations": int,
        "keep_paper_denominator": lambda v: bool(int(v)),
    }
    for key, cast in loss_keys.items():
        if key in kv:
            setattr(cfg.loss, key, cast(kv[key]))
    cfg.__post_init__()
    cfg.loss.__post_init__()
    return cfg


def _network_from_kv(kv, seed=0):
    return RoadNet(NetworkConfig.from_kv(kv), seed=seed)


@click.group()
def main():
    """Interactive road extraction toolkit."""


@main.command()
@click.option("--n", type=int, default=100, help="number of scenes")
@click.option("--seed", type=int, default=0)
@click.option("--size", type=int, default=256)
@click.option("--out", "outdir", required=True, type=click.Path())
def gen(n, seed, size, outdir):
    """Generate a synthetic dataset directory."""
    try:
        cfg = SceneConfig(size=size)
        generate_split(cfg, n, seed, outdir)
    except (ValueError, OSError) as exc:
        _fail(str(exc))
    click.echo(f"wrote {n} scenes to {outdir}")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=False), default=None)
@click.option("--data", "data_dir", required=True, type=click.Path())
@click.option("--val", "val_dir", type=click.Path(), default=None)
@click.option("--out", "outdir", required=True, type=click.Path())
def train(config_path, data_dir, val_dir, outdir):
    """Train from a dataset directory; checkpoints and log go to --out."""
    kv = {}
    if config_path:
        if not os.path.isfile(config_path):
            _fail(f"config file not found: {config_path}")
        try:
            kv = load_kv(config_path)
        except ValueError as exc:
            _fail(f"bad config: {exc}")
    try:
        tcfg = _train_config_from_kv(kv)
    except ValueError as exc:
        _fail(f"bad config: {exc}")
    pairs = _load_pairs(data_dir)
    val_pairs = _load_pairs(val_dir) if val_dir else None
    net = _network_from_kv(kv, seed=tcfg.seed)
    try:
        train_interactive(net, pairs, tcfg, outdir, val_scenes=val_pairs, quiet=False)
    except Exception as exc:
        _fail(f"training failed: {exc}")
    click.echo(f"checkpoints and log written to {outdir}")


class _OracleModel:
    """Ground-truth predictor stub for plumbing checks (eval --oracle)."""

    def __init__(self):
        self.label = None

    def forward_step(self, image, m_prev, prompt_map):
        logits = np.where(self.label, 12.0, -12.0).astype(np.float32)
        return logits, self.label.copy()


@main.command("eval")
@click.option("--checkpoint", type=click.Path(), default=None)
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--data", "data_dir", required=True, type=click.Path())
@click.option("--kind", type=click.Choice(["point", "center", "line", "bezier"]),
              default="point")
@click.option("--rounds", type=int, default=5)
@click.option("--seed", type=int, default=0)
@click.option("--oracle", is_flag=True, help="use the ground-truth stub predictor")
@click.option("--full-metrics", is_flag=True)
@click.option("--out", "out_path", required=True, type=click.Path())
def eval_cmd(checkpoint, config_path, data_dir, kind, rounds, seed, oracle,
             full_metrics, out_path):
    """Per-round metric table for one prompting kind (JSON, plus CSV sibling)."""
    pairs = _load_pairs(data_dir)
    if oracle:
        model = _OracleModel()
        table = []
        acc = None
        for img, mask in pairs:
            model.label = mask
            t = evaluate_rounds(model, [(img, mask)], kind, rounds, seed=seed,
                                full_metrics=full_metrics)
            acc = t if acc is None else [
                {k: a[k] + b[k] for k in a} for a, b in zip(acc, t)
            ]
        table = [{k: v / len(pairs) for k, v in row.items()} for row in acc]
    else:
        kv = load_kv(config_path) if config_path else {}
        net = _network_from_kv(kv)
        if not checkpoint:
            _fail("either --checkpoint or --oracle is required")
        if not os.path.isfile(checkpoint):
            _fail(f"missing checkpoint: {checkpoint}")
        try:
            net.load(checkpoint)
        except ValueError as exc:
            _fail(f"bad checkpoint: {exc}")
        table = evaluate_rounds(net, pairs, kind, rounds, seed=seed,
                                full_metrics=full_metrics)
    payload = {"kind": kind, "rounds": rounds, "table": table}
    with open(out_path, "w") as f:
        json.dump(payload, f, indent=2)
    csv_path = os.path.splitext(out_path)[0] + ".csv"
    keys = sorted(table[0])
    with open(csv_path, "w") as f:
        f.write("round," + ",".join(keys) + "\n")
        for r, row in enumerate(table, 1):
            f.write(f"{r}," + ",".join(f"{row[k]:.6f}" for k in keys) + "\n")
    click.echo(f"wrote {out_path} and {csv_path}")


@main.command()
@click.option("--data", "data_dir", required=True, type=click.Path())
@click.option("--val", "val_dir", required=True, type=click.Path())
@click.option("--out", "outdir", required=True, type=click.Path())
@click.option("--mode", type=click.Choice(["eg-prompt", "skeleton-exclusion"]),
              default="eg-prompt")
@click.option("--epochs", type=int, default=6)
@click.option("--seed", type=int, default=0)
def ablate(data_dir, val_dir, outdir, mode, epochs, seed):
    """Paired desk-scale runs differing in one switch, plus a diff summary."""
    from .prompts import RidgeExpert

    pairs = _load_pairs(data_dir)
    val_pairs = _load_pairs(val_dir)
    size = pairs[0][0].shape[0]
    os.makedirs(outdir, exist_ok=True)
    results = {}
    for label, tweak in _ablation_arms(mode):
        tcfg = TrainConfig(epochs=epochs, seed=seed)
        tweak(tcfg)
        net = RoadNet(NetworkConfig(encoder_widths=[8, 16, 32], image_size=size),
                      seed=seed)
        experts = [RidgeExpert()] if tcfg.expert_guided_fraction > 0 else None
        arm_dir = os.path.join(outdir, label)
        train_interactive(net, pairs, tcfg, arm_dir, val_scenes=val_pairs,
                          experts=experts, quiet=True)
        table = evaluate_rounds(net, val_pairs, "bezier", tcfg.rounds_per_batch,
                                seed=seed + 99)
        results[label] = {
            "per_round_dice": [row["dice"] for row in table],
            "mean_dice": float(np.mean([row["dice"] for row in table])),
        }
        click.echo(f"{label}: mean-of-rounds dice {results[label]['mean_dice']:.4f}")
    labels = list(results)
    summary = {
        "mode": mode,
        "arms": results,
        "delta_mean_dice": results[labels[0]]["mean_dice"] - results[labels[1]]["mean_dice"],
    }
    with open(os.path.join(outdir, "summary.json"), "w") as f:
        json.dump(summary, f, indent=2)
    click.echo(f"summary written to {os.path.join(outdir, 'summary.json')}")


def _ablation_arms(mode):
    if mode == "eg-prompt":
        def on(c):
            c.expert_guided_fraction = 0.5

        def off(c):
            c.expert_guided_fraction = 0.0

        return [("eg_on", on), ("eg_off", off)]

    def with_skeleton(c):
        pass  # default loss already applies the prompt-excluded skeleton term

    def focal_dice_only(c):
        c.loss.use_skeleton_term = False

    return [("skeleton_recall", with_skeleton), ("focal_dice_only", focal_dice_only)]


@main.command()
@click.option("--port", type=int, default=None)
@click.option("--checkpoint", type=click.Path(), default=None)
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--persist-dir", type=click.Path(), default=None)
def serve(port, checkpoint, config_path, persist_dir):
    """Run the annotation HTTP server."""
    from .service import serve as run_server

    kv = load_kv(config_path) if config_path else {}
    net = _network_from_kv(kv)
    if checkpoint:
        if not os.path.isfile(checkpoint):
            _fail(f"missing checkpoint: {checkpoint}")
        try:
            net.load(checkpoint)
        except ValueError as exc:
            _fail(f"bad checkpoint: {exc}")
    try:
        run_server(port=port, net=net, persist_dir=persist_dir)
    except OSError as exc:
        _fail(f"cannot bind server: {exc}")


if __name__ == "__main__":
    main()
