"""Topology metric tests: independent betti oracle, graph-extraction
fixtures, clDice conventions and the hand-computed path-similarity fixture.
"""

import numpy as np
import pytest

from roadgie.metrics import (
    GraphEdge,
    NoGroundTruthError,
    RoadGraph,
    apls,
    betti_numbers,
    cl_dice,
    dice_and_recall,
    evaluate_masks,
    extract_graph,
    skeletonize,
    summarize,
    write_report,
)

# -- independent oracle: union-find over foreground (8-conn) and background
# (4-conn) with a border flood to discard the unbounded face ----------------


class _UnionFind:
    def __init__(self, n):
        self.p = list(range(n))

    def find(self, i):
        while self.p[i] != i:
            self.p[i] = self.p[self.p[i]]
            i = self.p[i]
        return i

    def union(self, a, b):
        self.p[self.find(a)] = self.find(b)


def betti_oracle(mask):
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    idx = lambda r, c: r * w + c
    fg = _UnionFind(h * w)
    bg = _UnionFind(h * w + 1)
    outside = h * w
    for r in range(h):
        for c in range(w):
            if mask[r, c]:
                for dr, dc in ((-1, -1), (-1, 0), (-1, 1), (0, -1)):
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < h and 0 <= cc < w and mask[rr, cc]:
                        fg.union(idx(r, c), idx(rr, cc))
            else:
                for dr, dc in ((-1, 0), (0, -1)):
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < h and 0 <= cc < w and not mask[rr, cc]:
                        bg.union(idx(r, c), idx(rr, cc))
                if r in (0, h - 1) or c in (0, w - 1):
                    bg.union(idx(r, c), outside)
    b0 = len({fg.find(idx(r, c)) for r in range(h) for c in range(w) if mask[r, c]})
    bg_roots = {
        bg.find(idx(r, c)) for r in range(h) for c in range(w) if not mask[r, c]
    }
    b1 = len(bg_roots - {bg.find(outside)})
    return b0, b1


def test_betti_fixtures():
    assert betti_numbers(np.zeros((8, 8), bool)) == (0, 0)
    square = np.zeros((8, 8), bool)
    square[2:6, 2:6] = True
    assert betti_numbers(square) == (1, 0)
    ring = square.copy()
    ring[3:5, 3:5] = False
    assert betti_numbers(ring) == (1, 1)


def test_betti_against_oracle_1000_masks():
    rng = np.random.default_rng(7)
    for density in (0.2, 0.4, 0.6):
        for _ in range(334):
            mask = rng.random((16, 16)) < density
            assert betti_numbers(mask) == betti_oracle(mask)


def test_skeletonize_preserves_beta0_on_connected_masks():
    from roadgie.synth import SceneConfig, generate_scene

    cfg = SceneConfig(size=64)
    checked = 0
    seed = 0
    while checked < 200:
        scene = generate_scene(cfg, seed)
        seed += 1
        from scipy import ndimage

        lbl, n = ndimage.label(scene.mask, structure=np.ones((3, 3), int))
        for i in range(1, n + 1):
            comp = lbl == i
            if comp.sum() < 10:
                continue
            skel = skeletonize(comp)
            assert betti_numbers(skel)[0] == 1
            checked += 1
            if checked >= 200:
                break


def test_dice_recall_conventions():
    empty = np.zeros((4, 4), bool)
    assert dice_and_recall(empty, empty) == (1.0, 1.0)
    full = np.ones((4, 4), bool)
    d, r = dice_and_recall(full, empty)
    assert d == 0.0
    d, r = dice_and_recall(full, full)
    assert d == 1.0 and r == 1.0


def test_cldice_conventions():
    empty = np.zeros((16, 16), bool)
    line = np.zeros((16, 16), bool)
    line[8, 2:14] = True
    assert cl_dice(empty, empty) == 1.0
    assert cl_dice(line, empty) == 0.0
    assert cl_dice(empty, line) == 0.0
    assert cl_dice(line, line) == 1.0


def test_extract_graph_line():
    mask = np.zeros((32, 32), bool)
    mask[16, 1:31] = True
    g = extract_graph(mask)
    assert len(g.edges) == 1
    assert sorted(g.node_kinds) == ["endpoint", "endpoint"]
    assert g.edges[0].length == pytest.approx(29.0, abs=0.5)


def test_extract_graph_cross():
    mask = np.zeros((33, 33), bool)
    mask[16, 2:31] = True
    mask[2:31, 16] = True
    g = extract_graph(mask)
    assert len(g.nodes) == 5
    assert g.node_kinds.count("junction") == 1
    assert g.node_kinds.count("endpoint") == 4
    assert len(g.edges) == 4


def test_extract_graph_isolated_ring():
    mask = np.zeros((32, 32), bool)
    rr, cc = np.ogrid[:32, :32]
    d = np.sqrt((rr - 16) ** 2 + (cc - 16) ** 2)
    mask[(d > 8) & (d < 11)] = True
    g = extract_graph(mask)
    assert len(g.edges) == 1
    assert g.edges[0].a == g.edges[0].b  # cycle closes on a synthetic node


def test_extract_graph_empty():
    g = extract_graph(np.zeros((16, 16), bool))
    assert g.is_empty()


def _straight_edge(a, b, p0, p1, n=11):
    t = np.linspace(0, 1, n)[:, None]
    poly = np.asarray(p0, float) * (1 - t) + np.asarray(p1, float) * t
    length = float(np.hypot(p1[0] - p0[0], p1[1] - p0[1]))
    return GraphEdge(a, b, poly, length)


def three_node_fixture():
    """Ground truth A-B-C (right angle); prediction covers only A-B.

    Hand computation with node control points, snap radius 5:
    forward pairs (A,B): 10 vs 10 -> 1; (A,C) and (B,C): C cannot snap -> 0;
    backward pair (A,B): 10 vs 10 -> 1.  APLS = (1/3 + 1) / 2 = 2/3.
    """
    gt = RoadGraph(
        nodes=[(0.0, 0.0), (0.0, 10.0), (10.0, 10.0)],
        node_kinds=["endpoint", "junction", "endpoint"],
        edges=[
            _straight_edge(0, 1, (0, 0), (0, 10)),
            _straight_edge(1, 2, (0, 10), (10, 10)),
        ],
    )
    pred = RoadGraph(
        nodes=[(0.0, 0.0), (0.0, 10.0)],
        node_kinds=["endpoint", "endpoint"],
        edges=[_straight_edge(0, 1, (0, 0), (0, 10))],
    )
    return gt, pred


def test_apls_three_node_fixture_hand_value():
    gt, pred = three_node_fixture()
    val = apls(gt, pred, sample_nodes=True)
    assert val == pytest.approx(2.0 / 3.0, abs=1e-9)


def test_apls_identity():
    gt, _ = three_node_fixture()
    assert apls(gt, gt, sample_nodes=True) == pytest.approx(1.0, abs=1e-12)
    mask = np.zeros((32, 32), bool)
    mask[16, 1:31] = True
    g = extract_graph(mask)
    assert apls(g, g, control_points=20) == pytest.approx(1.0, abs=1e-12)


def test_apls_empty_cases():
    gt, pred = three_node_fixture()
    with pytest.raises(NoGroundTruthError):
        apls(RoadGraph(), pred)
    assert apls(gt, RoadGraph()) == 0.0


def test_evaluate_and_report(tmp_path):
    mask = np.zeros((32, 32), bool)
    mask[16, 1:31] = True
    rec = evaluate_masks(mask, mask)
    assert rec["dice"] == 1.0 and rec["cldice"] == 1.0
    assert rec["beta0_pred"] == rec["beta0_gt"] == 1
    rec["name"] = "fixture"
    payload = write_report(tmp_path / "r.json", [rec], tmp_path / "r.csv")
    assert payload["summary"]["beta0_abs_err"] == 0.0
    assert (tmp_path / "r.json").exists() and (tmp_path / "r.csv").exists()
