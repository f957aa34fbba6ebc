"""Topology-aware evaluation: Dice, Recall, clDice, APLS and Betti numbers,
plus the skeletonization and mask-to-graph extraction they build on.

Connectivity convention throughout: 8-connected foreground, 4-connected
background.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import networkx as nx
import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from skimage.morphology import skeletonize as _sk_skeletonize

EIGHT = np.ones((3, 3), dtype=int)


@dataclass
class GraphEdge:
    a: int
    b: int
    polyline: np.ndarray  # [(row, col), ...]
    length: float


@dataclass
class RoadGraph:
    nodes: list = field(default_factory=list)  # [(row, col), ...]
    node_kinds: list = field(default_factory=list)  # endpoint | junction
    edges: list = field(default_factory=list)

    def is_empty(self):
        return not self.edges and not self.nodes

    def total_length(self):
        return sum(e.length for e in self.edges)

    def to_networkx(self):
        g = nx.Graph()
        g.add_nodes_from(range(len(self.nodes)))
        for i, e in enumerate(self.edges):
            # MultiGraph semantics are not needed: keep the shortest parallel edge
            if g.has_edge(e.a, e.b):
                if g[e.a][e.b]["weight"] <= e.length:
                    continue
            g.add_edge(e.a, e.b, weight=e.length, index=i)
        return g


class NoGroundTruthError(ValueError):
    """APLS is undefined without a ground-truth graph."""


# -- masks --------------------------------------------------------------------


def skeletonize(mask):
    """1-pixel-wide 8-connected skeleton preserving connectivity."""
    mask = np.asarray(mask, dtype=bool)
    return _sk_skeletonize(mask)


def betti_numbers(mask):
    """(components, holes) of a binary mask."""
    mask = np.asarray(mask, dtype=bool)
    b0 = ndimage.label(mask, structure=EIGHT)[1]
    bg, nbg = ndimage.label(~mask)  # 4-connectivity default
    border = np.unique(
        np.concatenate([bg[0, :], bg[-1, :], bg[:, 0], bg[:, -1]])
    )
    border = set(border[border > 0].tolist())
    b1 = nbg - len(border)
    return int(b0), int(b1)


def dice_and_recall(pred, gt):
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    inter = np.logical_and(pred, gt).sum()
    psum, gsum = pred.sum(), gt.sum()
    if psum == 0 and gsum == 0:
        return 1.0, 1.0
    dice = 2.0 * inter / (psum + gsum) if (psum + gsum) else 0.0
    recall = inter / gsum if gsum else 1.0
    return float(dice), float(recall)


def cl_dice(pred, gt):
    """Harmonic mean of topology precision and sensitivity via skeletons."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    sp, sg = skeletonize(pred), skeletonize(gt)
    if sp.sum() == 0 and sg.sum() == 0:
        return 1.0
    if sp.sum() == 0 or sg.sum() == 0:
        return 0.0
    tprec = np.logical_and(sp, gt).sum() / sp.sum()
    tsens = np.logical_and(sg, pred).sum() / sg.sum()
    if tprec + tsens == 0:
        return 0.0
    return float(2.0 * tprec * tsens / (tprec + tsens))


# -- skeleton -> graph ---------------------------------------------------------

_OFFSETS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


def extract_graph(mask) -> RoadGraph:
    """Skeletonize and trace a node/edge graph.

    Skeleton pixels with one 8-neighbour become endpoints, with three or more
    junctions (adjacent junction pixels merge into one node); isolated cycles
    get a synthetic node.
    """
    skel = skeletonize(mask)
    if not skel.any():
        return RoadGraph()
    h, w = skel.shape
    nbr_count = ndimage.convolve(skel.astype(np.uint8), EIGHT, mode="constant") - skel
    node_pix = skel & ((nbr_count == 1) | (nbr_count >= 3) | (nbr_count == 0))
    node_lbl, n_nodes = ndimage.label(node_pix, structure=EIGHT)

    nodes, kinds = [], []
    for lbl in range(1, n_nodes + 1):
        ys, xs = np.nonzero(node_lbl == lbl)
        nodes.append((float(ys.mean()), float(xs.mean())))
        counts = nbr_count[ys, xs]
        kinds.append("junction" if counts.max() >= 3 else "endpoint")

    def node_at(p):
        return node_lbl[p] if node_lbl[p] > 0 else 0

    def neighbors(p):
        r, c = p
        for dr, dc in _OFFSETS:
            rr, cc = r + dr, c + dc
            if 0 <= rr < h and 0 <= cc < w and skel[rr, cc]:
                yield (rr, cc)

    edges = []
    visited = np.zeros_like(skel, dtype=bool)  # visited corridor pixels
    used_starts = set()

    def trace(start, first):
        """Walk from node pixel `start` through corridor pixel `first`."""
        path = [start, first]
        prev, cur = start, first
        while node_at(cur) == 0:
            visited[cur] = True
            nbrs = sorted(p for p in neighbors(cur) if p != prev)
            node_nbrs = [p for p in nbrs if node_at(p) > 0]
            if len(path) == 2:
                # don't bounce straight back into the cluster we just left
                node_nbrs = [p for p in node_nbrs if node_at(p) != node_at(start)]
            if node_nbrs:
                nxt = node_nbrs[0]
            else:
                corridor = [p for p in nbrs if node_at(p) == 0 and not visited[p]]
                if not corridor:
                    return path, None
                nxt = corridor[0]
            prev, cur = cur, nxt
            path.append(cur)
        return path, node_at(cur)

    node_pixels = list(zip(*np.nonzero(node_pix)))
    for np_pix in node_pixels:
        lbl = node_lbl[np_pix]
        for nb in neighbors(np_pix):
            if node_at(nb) > 0:
                # direct node-to-node contact between different clusters
                if node_at(nb) != lbl:
                    key = (min(np_pix, nb), max(np_pix, nb))
                    if key in used_starts:
                        continue
                    used_starts.add(key)
                    poly = np.array([np_pix, nb], dtype=float)
                    length = float(np.hypot(nb[0] - np_pix[0], nb[1] - np_pix[1]))
                    edges.append(GraphEdge(lbl - 1, node_at(nb) - 1, poly, length))
                continue
            if visited[nb]:
                continue
            path, end_lbl = trace(np_pix, nb)
            if end_lbl is None:
                end_lbl = lbl  # dead-end back into the same cluster
                poly = np.array(path, dtype=float)
            else:
                poly = np.array(path, dtype=float)
            length = float(np.sqrt((np.diff(poly, axis=0) ** 2).sum(axis=1)).sum())
            if length <= 0:
                continue
            edges.append(GraphEdge(lbl - 1, end_lbl - 1, poly, length))

    # isolated cycles: skeleton pixels never visited and not nodes
    remaining = skel & ~visited & ~node_pix
    rem_lbl, n_rem = ndimage.label(remaining, structure=EIGHT)
    for lbl in range(1, n_rem + 1):
        ys, xs = np.nonzero(rem_lbl == lbl)
        start = (ys[0], xs[0])
        nodes.append((float(start[0]), float(start[1])))
        kinds.append("junction")
        nid = len(nodes) - 1
        # walk the loop
        path = [start]
        visited[start] = True
        prev, cur = None, start
        while True:
            cand = [p for p in neighbors(cur) if rem_lbl[p] == lbl and p != prev and not visited[p]]
            if not cand:
                break
            cand.sort()
            prev, cur = cur, cand[0]
            visited[cur] = True
            path.append(cur)
        path.append(start)
        poly = np.array(path, dtype=float)
        length = float(np.sqrt((np.diff(poly, axis=0) ** 2).sum(axis=1)).sum())
        if length > 0:
            edges.append(GraphEdge(nid, nid, poly, length))

    return RoadGraph(nodes=nodes, node_kinds=kinds, edges=edges)


# -- APLS ---------------------------------------------------------------------


def _polyline_points(graph):
    """All polyline samples with (edge index, vertex index)."""
    pts, ids = [], []
    for ei, e in enumerate(graph.edges):
        for vi, p in enumerate(e.polyline):
            pts.append(p)
            ids.append((ei, vi))
    return np.asarray(pts, dtype=float), ids


def _arc_offsets(edge):
    d = np.sqrt((np.diff(edge.polyline, axis=0) ** 2).sum(axis=1))
    return np.concatenate([[0.0], np.cumsum(d)])


def _path_length(graph, nxg, sp_cache, pos1, pos2):
    """Shortest path length between two on-edge positions, or None."""
    (e1, v1), (e2, v2) = pos1, pos2
    ed1, ed2 = graph.edges[e1], graph.edges[e2]
    off1, off2 = _arc_offsets(ed1), _arc_offsets(ed2)
    best = None
    if e1 == e2:
        best = abs(off1[v1] - off1[v2])
    ends1 = [(ed1.a, off1[v1]), (ed1.b, off1[-1] - off1[v1])]
    ends2 = [(ed2.a, off2[v2]), (ed2.b, off2[-1] - off2[v2])]
    for u, du in ends1:
        for v, dv in ends2:
            key = (u, v)
            if key not in sp_cache:
                try:
                    sp_cache[key] = nx.shortest_path_length(nxg, u, v, weight="weight")
                except nx.NetworkXNoPath:
                    sp_cache[key] = None
                sp_cache[(v, u)] = sp_cache[key]
            mid = sp_cache[key]
            if mid is None:
                continue
            total = du + mid + dv
            if best is None or total < best:
                best = total
    return best


def _sample_positions(graph, n, rng):
    lengths = np.array([e.length for e in graph.edges])
    probs = lengths / lengths.sum()
    out = []
    for _ in range(n):
        ei = int(rng.choice(len(graph.edges), p=probs))
        vi = int(rng.integers(0, len(graph.edges[ei].polyline)))
        out.append((ei, vi))
    return out


def _node_positions(graph):
    """One on-edge position per graph node (for enumerable fixtures)."""
    out = {}
    for ei, e in enumerate(graph.edges):
        out.setdefault(e.a, (ei, 0))
        out.setdefault(e.b, (ei, len(e.polyline) - 1))
    return list(out.values())


def _direction_score(src, dst, pairs, snap_radius):
    if not dst.edges:
        return 0.0
    nx_src = src.to_networkx()
    nx_dst = dst.to_networkx()
    dst_pts, dst_ids = _polyline_points(dst)
    tree = cKDTree(dst_pts)
    src_cache, dst_cache = {}, {}
    scores = []
    for pos_a, pos_b in pairs:
        l_src = _path_length(src, nx_src, src_cache, pos_a, pos_b)
        if l_src is None or l_src <= 0:
            continue
        pa = src.edges[pos_a[0]].polyline[pos_a[1]]
        pb = src.edges[pos_b[0]].polyline[pos_b[1]]
        da, ia = tree.query(pa)
        db, ib = tree.query(pb)
        if da > snap_radius or db > snap_radius:
            scores.append(0.0)
            continue
        l_dst = _path_length(dst, nx_dst, dst_cache, dst_ids[ia], dst_ids[ib])
        if l_dst is None:
            scores.append(0.0)
            continue
        cost = min(1.0, abs(l_src - l_dst) / l_src)
        scores.append(1.0 - cost)
    if not scores:
        return 1.0 if not dst.edges and not src.edges else 0.0
    return float(np.mean(scores))


def apls(gt_graph, pred_graph, control_points=50, rng=None, snap_radius=5.0,
         sample_nodes=False):
    """Average path length similarity, symmetric over both directions."""
    if gt_graph.is_empty():
        raise NoGroundTruthError("APLS undefined: empty ground-truth graph")
    if pred_graph.is_empty() or not pred_graph.edges:
        return 0.0
    rng = rng or np.random.default_rng(0)

    def pairs_for(graph):
        if sample_nodes:
            pos = _node_positions(graph)
            return [(a, b) for i, a in enumerate(pos) for b in pos[i + 1 :]]
        pos = _sample_positions(graph, 2 * control_points, rng)
        return [(pos[2 * i], pos[2 * i + 1]) for i in range(control_points)]

    fwd = _direction_score(gt_graph, pred_graph, pairs_for(gt_graph), snap_radius)
    bwd = _direction_score(pred_graph, gt_graph, pairs_for(pred_graph), snap_radius)
    return 0.5 * (fwd + bwd)


# -- reports ------------------------------------------------------------------


def evaluate_masks(pred, gt, control_points=50, seed=0):
    """Per-image metric record used by the evaluation reports."""
    dice, recall = dice_and_recall(pred, gt)
    b0p, b1p = betti_numbers(pred)
    b0g, b1g = betti_numbers(gt)
    gt_graph = extract_graph(gt)
    pred_graph = extract_graph(pred)
    if gt_graph.is_empty():
        apls_val = float("nan")
    else:
        apls_val = apls(gt_graph, pred_graph, control_points,
                        np.random.default_rng(seed))
    return {
        "dice": dice,
        "recall": recall,
        "cldice": cl_dice(pred, gt),
        "apls": apls_val,
        "beta0_pred": b0p,
        "beta0_gt": b0g,
        "beta1_pred": b1p,
        "beta1_gt": b1g,
    }


METRIC_KEYS = ["dice", "recall", "cldice", "apls",
               "beta0_pred", "beta0_gt", "beta1_pred", "beta1_gt"]


def summarize(records):
    out = {}
    for k in METRIC_KEYS:
        vals = [r[k] for r in records if not np.isnan(r[k])]
        out[k] = float(np.mean(vals)) if vals else float("nan")
    out["beta0_abs_err"] = float(
        np.mean([abs(r["beta0_pred"] - r["beta0_gt"]) for r in records])
    ) if records else float("nan")
    out["beta1_abs_err"] = float(
        np.mean([abs(r["beta1_pred"] - r["beta1_gt"]) for r in records])
    ) if records else float("nan")
    return out


def write_report(path, records, csv_path=None):
    payload = {"images": records, "summary": summarize(records)}
    with open(path, "w") as f:
        json.dump(payload, f, indent=1, sort_keys=True)
    if csv_path:
        with open(csv_path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=["name"] + METRIC_KEYS)
            writer.writeheader()
            for r in records:
                writer.writerow({k: r.get(k) for k in ["name"] + METRIC_KEYS})
    return payload
