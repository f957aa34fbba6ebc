"""End-to-end acceptance suite.

Every top-level requirement runs here and prints a single PASS/FAIL line.
The three training-based checks share one session-scoped fixture with three
paired-seed runs (reference, no-skeleton-term, no-expert-guidance).  The
default configuration is desk-fast (64x64 scenes, reduced widths); set
ROADGIE_ACCEPTANCE_FULL=1 for the full-scale protocol (500 scenes,
20 epochs, 128x128).
"""

import os
import time

import numpy as np
import pytest
from scipy.stats import chisquare

from roadgie import autodiff as ad
from roadgie.autodiff import Tensor
from roadgie.loss import probs_from_logits, total_loss
from roadgie.metrics import RoadGraph, apls, betti_numbers, skeletonize
from roadgie.network import NetworkConfig, RoadNet
from roadgie.prompts import (
    ErrorRegion,
    RidgeExpert,
    expert_guided_sample,
    sample_point,
    select_error_region,
)
from roadgie.synth import SceneConfig, generate_crossing_scene, generate_scene
from roadgie.train import TrainConfig, evaluate_rounds, train_interactive

from test_metrics import betti_oracle, three_node_fixture

FULL = os.environ.get("ROADGIE_ACCEPTANCE_FULL") == "1"

SIZE = 128 if FULL else 64
N_TRAIN = 500 if FULL else 80
N_VAL = 24 if FULL else 12
N_TEST = 60 if FULL else 30
EPOCHS = 20 if FULL else 12
WIDTHS = (16, 32, 64) if FULL else (8, 16, 32)


def _report(name, ok, detail=""):
    print(f"\n[{'PASS' if ok else 'FAIL'}] {name}" + (f" ({detail})" if detail else ""))
    assert ok, f"{name}: {detail}"


# -- criterion: gradient correctness ------------------------------------------


def _fd(fn, x, step=1e-3):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp, xm = x.copy(), x.copy()
        xp[i] += step
        xm[i] -= step
        g[i] = (fn(xp) - fn(xm)) / (2 * step)
    return g


def _check_grad(make_loss, shape, rng, step=1e-3, x0=None):
    if x0 is None:
        x0 = rng.normal(0, 1, shape).astype(np.float64)
    t = Tensor(x0.copy(), requires_grad=True)
    make_loss(t).backward()
    fd = _fd(lambda arr: float(make_loss(Tensor(arr)).data), x0, step)
    denom = max(np.abs(fd).max(), 1e-8)
    return np.abs(t.grad - fd).max() / denom


def test_acceptance_gradient_correctness():
    t_start = time.time()
    rng = np.random.default_rng(0)
    # keep samples away from non-differentiable kinks
    smooth = lambda t: (t * 0.37 + 0.05)
    ops = {
        "add_mul": lambda t: ((t * 2.0 + 1.0) * t).sum(),
        "exp_log": lambda t: (t.exp() + (t * t + 1.0).log()).sum(),
        "pow": lambda t: ((t * t + 0.5) ** 1.7).sum(),
        "sigmoid": lambda t: t.sigmoid().sum(),
        # no entry within 2 FD steps of the hinge
        "relu": ("kink", lambda t: (t + 0.5).relu().sum()),
        "mean": lambda t: (t * t).mean(),
        "reshape": lambda t: t.reshape(4, 9).transpose((1, 0)).sum(),
        "matvec_like": lambda t: (t.reshape(6, 6) * t.reshape(6, 6)).sum(),
    }
    worst = {}
    for name, fn in ops.items():
        kinked = isinstance(fn, tuple)
        if kinked:
            _, fn = fn
        errs = []
        for _ in range(20):
            x0 = rng.normal(0, 1, (6, 6)).astype(np.float64)
            if kinked:
                near = np.abs(x0 + 0.5) < 5e-3
                x0[near] += np.where(x0[near] + 0.5 >= 0, 0.01, -0.01)
            errs.append(_check_grad(fn, (6, 6), rng, x0=x0))
        worst[name] = max(errs)
    conv_errs = []
    k0 = np.random.default_rng(1).normal(0, 0.5, (2, 2, 3, 3)).astype(np.float64)
    b0 = np.zeros(2, dtype=np.float64)
    for _ in range(20):
        def conv_loss(t):
            x = t.reshape(1, 5, 5, 2)
            return ad.conv2d_nhwc(x, Tensor(k0), Tensor(b0), stride=1, pad=1).sum()
        conv_errs.append(_check_grad(conv_loss, (5, 5, 2), rng))
    worst["conv"] = max(conv_errs)
    pool_errs = []
    for _ in range(20):
        def pool_loss(t):
            x = t.reshape(1, 6, 6, 1)
            return ad.max_pool2d(x).sum() + ad.min_pool3x3(x).sum()
        # well-separated values keep window maxima stable under the FD step
        x0 = rng.permutation(36).astype(np.float64).reshape(6, 6) / 6.0
        x0 += rng.normal(0, 1e-3, (6, 6))
        pool_errs.append(_check_grad(pool_loss, (6, 6), rng, x0=x0))
    worst["pool"] = max(pool_errs)
    loss_errs = []
    for i in range(20):
        y = (np.random.default_rng(i).random((6, 6)) < 0.4).astype(np.float64)
        def loss_fn(t):
            return total_loss(probs_from_logits(t), y)[0]
        loss_errs.append(_check_grad(loss_fn, (6, 6), rng))
    worst["total_loss"] = max(loss_errs)
    elapsed = time.time() - t_start
    bad = {k: v for k, v in worst.items() if v >= 1e-4}
    _report(
        "gradient correctness (<1e-4 rel err, 20 instances/op, <60s)",
        not bad and elapsed < 60.0,
        f"worst {max(worst.values()):.2e}, {elapsed:.1f}s" + (f", fail={bad}" if bad else ""),
    )


# -- criterion: topology oracles ----------------------------------------------


def test_acceptance_topology_oracles():
    rng = np.random.default_rng(7)
    mismatches = 0
    for density in (0.2, 0.4, 0.6):
        for _ in range(334):
            m = rng.random((16, 16)) < density
            if betti_numbers(m) != betti_oracle(m):
                mismatches += 1
    from scipy import ndimage

    checked = broken = 0
    seed = 0
    while checked < 200:
        scene = generate_scene(SceneConfig(size=64), seed)
        seed += 1
        lbl, n = ndimage.label(scene.mask, structure=np.ones((3, 3), int))
        for i in range(1, n + 1):
            comp = lbl == i
            if comp.sum() < 10:
                continue
            if betti_numbers(skeletonize(comp))[0] != 1:
                broken += 1
            checked += 1
            if checked >= 200:
                break
    gt, pred = three_node_fixture()
    apls_err = abs(apls(gt, pred, sample_nodes=True) - 2.0 / 3.0)
    ok = mismatches == 0 and broken == 0 and apls_err < 1e-9
    _report(
        "topology oracles (1000 betti masks, 200 skeletons, 3-node path fixture)",
        ok,
        f"betti mismatches {mismatches}, skeleton b0 breaks {broken}, "
        f"path-metric err {apls_err:.1e}",
    )


# -- criterion: sampler distributions -----------------------------------------


def test_acceptance_sampler_distributions():
    n = 10_000
    rng = np.random.default_rng(3)
    # region choice: areas 9 vs 27
    y = np.zeros((20, 20), bool)
    y[1:4, 1:4] = True
    y[10:13, 10:19] = True
    counts = {9: 0, 27: 0}
    for _ in range(n):
        counts[select_error_region(y, np.zeros_like(y), rng).area()] += 1
    _, p_region = chisquare([counts[9], counts[27]], [n * 0.25, n * 0.75])
    # point sampler on a 1x3 strip with closed-form distance softmax
    from scipy import ndimage

    m = np.zeros((3, 5), bool)
    m[1, 1:4] = True
    region = ErrorRegion(m, "positive")
    edt = ndimage.distance_transform_edt(m)
    e = edt[m] / edt[m].max()
    expect = np.exp(3.0 * e)
    expect = expect / expect.sum() * n
    cols = {1: 0, 2: 0, 3: 0}
    for _ in range(n):
        cols[int(sample_point(region, 3.0, rng).points[0][1])] += 1
    _, p_point = chisquare([cols[1], cols[2], cols[3]], expect)
    # expert-guided sampler on 4 equal-uncertainty pixels
    u = np.zeros((8, 8))
    u[2, 2] = u[2, 3] = u[3, 2] = u[3, 3] = 0.5
    keys = [(2, 2), (2, 3), (3, 2), (3, 3)]
    hits = np.zeros(4)
    for _ in range(n):
        hits[keys.index(expert_guided_sample(u, 2.0, rng))] += 1
    _, p_eg = chisquare(hits)
    # concentration / dominance checks
    big = np.zeros((21, 21), bool)
    big[5:16, 5:16] = True
    center = sum(
        max(abs(r - 10), abs(c - 10)) <= 2
        for r, c in (sample_point(ErrorRegion(big, "positive"), 10.0, rng).points[0]
                     for _ in range(500))
    )
    u2 = np.full((5, 5), 0.1)
    u2[2, 2] = 0.9
    dom = sum(expert_guided_sample(u2, 8.0, rng) == (2, 2) for _ in range(2000))
    ok = (p_region > 0.01 and p_point > 0.01 and p_eg > 0.01
          and center / 500 > 0.8 and dom / 2000 >= 0.99)
    _report(
        "sampler distributions (chi-square p>0.01; alpha=10, beta=8 checks)",
        ok,
        f"p_region {p_region:.3f}, p_point {p_point:.3f}, p_expert {p_eg:.3f}, "
        f"alpha10 {center / 500:.2f}, beta8 {dom / 2000:.3f}",
    )


# -- shared training fixture --------------------------------------------------


@pytest.fixture(scope="session")
def trained(tmp_path_factory):
    base = tmp_path_factory.mktemp("acceptance")
    scenes = [generate_scene(SceneConfig(size=SIZE), seed=i) for i in range(N_TRAIN)]
    val = [generate_scene(SceneConfig(size=SIZE), seed=1000 + i) for i in range(N_VAL)]
    test = [generate_scene(SceneConfig(size=SIZE), seed=2000 + i) for i in range(N_TEST)]
    dense = [generate_scene(SceneConfig(size=SIZE, road_count=(5, 8)), seed=3000 + i)
             for i in range(N_TEST)]
    hard = [generate_scene(SceneConfig(size=SIZE, occlusion_density=0.6), seed=4000 + i)
            for i in range(N_TEST)]
    experts = [RidgeExpert()]
    nets = {}
    for tag, tweak in (
        ("ref", lambda c: None),
        ("noskel", lambda c: setattr(c.loss, "use_skeleton_term", False)),
        ("noeg", lambda c: setattr(c, "expert_guided_fraction", 0.0)),
    ):
        cfg = TrainConfig(epochs=EPOCHS, batch_size=4, seed=0)
        tweak(cfg)
        net = RoadNet(NetworkConfig(encoder_widths=WIDTHS, image_size=SIZE), seed=0)
        train_interactive(net, scenes, cfg, str(base / tag), val_scenes=val,
                          experts=experts, quiet=True)
        nets[tag] = net
    return {"nets": nets, "test": test, "dense": dense, "hard": hard}


# -- criterion: interactive improvement ---------------------------------------


def test_acceptance_interactive_improvement(trained):
    table = evaluate_rounds(trained["nets"]["ref"], trained["test"], "bezier", 5,
                            seed=0)
    dice = [r["dice"] for r in table]
    gain = dice[4] - dice[0]
    drops = max(
        (dice[i] - dice[i + 1] for i in range(4)), default=0.0
    )
    ok = gain >= 0.05 and drops <= 0.005
    _report(
        "interactive improvement (round5 >= round1 + 5pts, non-decreasing +-0.5pt)",
        ok,
        f"rounds {[round(d, 3) for d in dice]}, gain {gain:+.3f}, max drop {drops:.4f}",
    )


# -- criterion: prompt-type ordering ------------------------------------------


def test_acceptance_prompt_type_ordering(trained):
    net = trained["nets"]["ref"]
    bez = evaluate_rounds(net, trained["dense"], "bezier", 10, seed=0)[-1]["dice"]
    pt = evaluate_rounds(net, trained["dense"], "point", 10, seed=0)[-1]["dice"]
    _report(
        "prompt-type ordering (bezier >= point at round 10)",
        bez >= pt,
        f"bezier {bez:.3f} vs point {pt:.3f}",
    )


# -- criterion: loss ablation direction ---------------------------------------


def test_acceptance_loss_ablation_direction(trained):
    stats = {}
    for tag in ("ref", "noskel"):
        t = evaluate_rounds(trained["nets"][tag], trained["test"], "bezier", 5,
                            seed=0, full_metrics=True)
        stats[tag] = (
            float(np.mean([r["dice"] for r in t])),
            float(np.mean([abs(r["beta0_pred"] - r["beta0_gt"]) for r in t])),
        )
    ok = stats["ref"][0] >= stats["noskel"][0] and stats["ref"][1] <= stats["noskel"][1]
    _report(
        "loss ablation (skeleton term improves mean dice AND |b0 error|)",
        ok,
        f"with: dice {stats['ref'][0]:.4f} b0 {stats['ref'][1]:.3f}; "
        f"without: dice {stats['noskel'][0]:.4f} b0 {stats['noskel'][1]:.3f}",
    )


# -- criterion: expert-guided prompting direction -----------------------------


def test_acceptance_expert_guided_direction(trained):
    deltas = {}
    for name in ("test", "hard"):
        a = evaluate_rounds(trained["nets"]["ref"], trained[name], "bezier", 5,
                            seed=0)[-1]["dice"]
        b = evaluate_rounds(trained["nets"]["noeg"], trained[name], "bezier", 5,
                            seed=0)[-1]["dice"]
        deltas[name] = a - b
    ok = deltas["test"] >= 0.0 and deltas["hard"] > 0.0
    _report(
        "expert-guided prompting (round-5 delta >= 0; > 0 on high occlusion)",
        ok,
        f"test {deltas['test']:+.4f}, high-occlusion {deltas['hard']:+.4f}",
    )


# -- criterion: instantiation accuracy ----------------------------------------


def test_acceptance_instantiation_accuracy():
    from roadgie.instantiate import NoRoadStructure, instantiate
    from roadgie.prompts import Stroke

    cfg = SceneConfig(size=64)
    own, other, n = [], [], 0
    seed = 0
    while n < 100 and seed < 200:
        scene = generate_crossing_scene(cfg, seed=seed)
        seed += 1
        for inst_id in (1, 2):
            if n >= 100:
                break
            target = scene.instance_labels == inst_id
            rest = scene.mask & ~target
            ys, xs = np.nonzero(target & ~rest)
            if target.sum() < 60 or len(ys) < 20:
                continue
            order = np.argsort(xs if np.ptp(xs) >= np.ptp(ys) else ys)
            pts = [(float(ys[order[k]]), float(xs[order[k]]))
                   for k in (3, len(order) // 2, -4)]
            try:
                mask, _ = instantiate(scene.image, scene.mask.astype(np.float32),
                                      Stroke("bezier_scribble", "positive", pts, 3.0))
            except NoRoadStructure:
                continue
            own.append(2 * (mask & target).sum() / (mask.sum() + target.sum()))
            other.append(2 * (mask & rest).sum() / max(mask.sum() + rest.sum(), 1))
            n += 1
    own_m, other_m = float(np.mean(own)), float(np.mean(other))
    ok = n >= 100 and own_m >= 0.9 and other_m <= 0.2
    _report(
        "instantiation accuracy (100 crossings: own >= 0.9, other <= 0.2)",
        ok,
        f"n {n}, prompted dice {own_m:.3f}, other dice {other_m:.3f}",
    )


# -- criterion: latency budget ------------------------------------------------


def test_acceptance_latency_budget():
    from roadgie.network import PromptMap

    net = RoadNet(NetworkConfig(), seed=0)
    rng = np.random.default_rng(0)
    img = rng.random((3, 256, 256)).astype(np.float32)
    m_prev = np.zeros((256, 256), np.float32)
    pm = PromptMap(256, 256)
    net.forward_step(img, m_prev, pm)  # warm-up
    times = []
    for _ in range(20):
        t0 = time.perf_counter()
        net.forward_step(img, m_prev, pm)
        times.append(time.perf_counter() - t0)
    p95 = float(np.percentile(times, 95))
    _report(
        "latency budget (256x256 forward_step p95 < 500 ms)",
        p95 < 0.5,
        f"p95 {p95 * 1000:.0f} ms over 20 runs",
    )
