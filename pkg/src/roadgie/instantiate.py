"""Single-road instance extraction from a full-road prediction and one prompt.

Pipeline: clean the soft mask, thin it to a centerline graph, attach
per-segment attributes, group segments by geometric continuity, score the
groups against the prompt, then grow and re-inflate the winning road.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .metrics import RoadGraph, extract_graph, skeletonize

_EIGHT = np.ones((3, 3), dtype=int)


class NoRoadStructure(Exception):
    """Cleaned prediction contains no road pixels or no traceable centerline."""


@dataclass
class InstantiateConfig:
    theta_cont_deg: float = 30.0  # max orientation difference for continuity
    width_tolerance: float = 2.0  # max width ratio between joined segments
    expand_steps: int = 3
    min_area: int = 20  # components below this are noise
    min_hole: int = 50  # holes below this are filled
    # Thinning a crossing often yields a short connector edge between two
    # nearby junction nodes; segments joined through a connector no longer
    # than this still get the continuity test.
    bridge_length: float = 8.0
    # Linear scorer weights over (negated mean prompt-to-centerline distance,
    # fraction of prompt pixels inside the dilated group, orientation
    # alignment, log total length).
    score_weights: tuple = (1.0, 5.0, 1.0, 0.1)

    def __post_init__(self):
        if not (0 < self.theta_cont_deg <= 90):
            raise ValueError("theta_cont_deg must be in (0, 90]")
        if self.width_tolerance < 1:
            raise ValueError("width_tolerance must be >= 1")
        if self.expand_steps < 0:
            raise ValueError("expand_steps must be >= 0")


@dataclass
class SegmentAttributes:
    segment_id: int
    orientation: float  # radians in [0, pi)
    length: float
    width: float  # mean diameter along the centerline, px
    endpoints: tuple  # two (row, col)
    mean_intensity: float
    end_orientations: dict = field(default_factory=dict)  # node id -> radians


@dataclass
class SegmentGroup:
    group_id: int
    segment_ids: list
    total_length: float = 0.0
    width_mean: float = 0.0
    width_var: float = 0.0


def clean_structure(image, soft_mask, cfg: InstantiateConfig = None):
    """Binarize and denoise a soft prediction.

    3x3 opening, then drop connected components under min_area and fill
    holes under min_hole.
    """
    cfg = cfg or InstantiateConfig()
    mask = np.asarray(soft_mask) >= 0.5
    # cross-shaped 3x3 element: strips isolated salt noise without
    # severing 3-px-wide diagonal roads the way the full square does
    mask = ndimage.binary_opening(mask, structure=ndimage.generate_binary_structure(2, 1))
    lbl, n = ndimage.label(mask, structure=_EIGHT)
    if n:
        sizes = ndimage.sum_labels(np.ones_like(lbl), lbl, index=np.arange(1, n + 1))
        keep = np.concatenate([[False], sizes >= cfg.min_area])
        mask = keep[lbl]
    holes, n = ndimage.label(~mask)
    if n:
        sizes = ndimage.sum_labels(np.ones_like(holes), holes, index=np.arange(1, n + 1))
        border = np.zeros(n + 1, dtype=bool)
        for edge in (holes[0], holes[-1], holes[:, 0], holes[:, -1]):
            border[np.unique(edge)] = True
        fill = np.concatenate([[False], sizes < cfg.min_hole]) & ~border
        mask = mask | fill[holes]
    return mask


def _chord_angle(pts):
    d = pts[-1] - pts[0]
    return float(np.arctan2(d[0], d[1]) % np.pi)


def _ang_diff(a, b):
    d = abs(a - b) % np.pi
    return min(d, np.pi - d)


def segment_attributes(graph: RoadGraph, image, cleaned) -> list:
    """Orientation, length, EDT width, endpoints and intensity per edge."""
    edt = ndimage.distance_transform_edt(cleaned)
    img = np.asarray(image, dtype=np.float32)
    gray = img.mean(axis=0) if img.ndim == 3 and img.shape[0] == 3 else (
        img.mean(axis=2) if img.ndim == 3 else img
    )
    out = []
    for sid, edge in enumerate(graph.edges):
        pts = np.asarray(edge.polyline, dtype=float)
        rr = np.clip(np.round(pts[:, 0]).astype(int), 0, cleaned.shape[0] - 1)
        cc = np.clip(np.round(pts[:, 1]).astype(int), 0, cleaned.shape[1] - 1)
        width = float(2.0 * edt[rr, cc].mean()) if len(rr) else 1.0
        k = min(len(pts), 6)
        attrs = SegmentAttributes(
            segment_id=sid,
            orientation=_chord_angle(pts),
            length=float(edge.length),
            width=max(width, 1.0),
            endpoints=(tuple(pts[0]), tuple(pts[-1])),
            mean_intensity=float(gray[rr, cc].mean()) if len(rr) else 0.0,
            end_orientations={
                edge.a: _chord_angle(pts[:k]),
                edge.b: _chord_angle(pts[-k:]),
            },
        )
        out.append(attrs)
    return out


def _compatible(attr_a, attr_b, node, cfg):
    return _compatible2(attr_a, node, attr_b, node, cfg)


def _compatible2(attr_a, node_a, attr_b, node_b, cfg):
    da = attr_a.end_orientations.get(node_a, attr_a.orientation)
    db = attr_b.end_orientations.get(node_b, attr_b.orientation)
    if _ang_diff(da, db) >= np.deg2rad(cfg.theta_cont_deg):
        return False
    ratio = max(attr_a.width, attr_b.width) / max(min(attr_a.width, attr_b.width), 1e-6)
    return ratio <= cfg.width_tolerance


def _bridge_pairs(graph, attrs, cfg):
    """Segment pairs joined through a short junction connector.

    Yields (sid_a, node_a, sid_b, node_b, connector_sid)."""
    incident = {}
    for sid, edge in enumerate(graph.edges):
        incident.setdefault(edge.a, []).append(sid)
        incident.setdefault(edge.b, []).append(sid)
    for csid, edge in enumerate(graph.edges):
        if attrs[csid].length > cfg.bridge_length or edge.a == edge.b:
            continue
        for a in incident.get(edge.a, []):
            for b in incident.get(edge.b, []):
                if a != csid and b != csid and a != b:
                    yield a, edge.a, b, edge.b, csid


def group_segments(graph: RoadGraph, attrs, cfg: InstantiateConfig = None):
    """Partition edges into roads: transitive closure of per-node continuity."""
    cfg = cfg or InstantiateConfig()
    if len(attrs) != len(graph.edges):
        raise ValueError("attributes must cover every edge")
    parent = list(range(len(attrs)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    incident = {}
    for sid, edge in enumerate(graph.edges):
        incident.setdefault(edge.a, []).append(sid)
        incident.setdefault(edge.b, []).append(sid)
    for node, sids in incident.items():
        for i, a in enumerate(sids):
            for b in sids[i + 1 :]:
                if a != b and _compatible(attrs[a], attrs[b], node, cfg):
                    parent[find(a)] = find(b)
    for a, na, b, nb, _ in _bridge_pairs(graph, attrs, cfg):
        if _compatible2(attrs[a], na, attrs[b], nb, cfg):
            parent[find(a)] = find(b)
    byroot = {}
    for sid in range(len(attrs)):
        byroot.setdefault(find(sid), []).append(sid)
    groups = []
    for gid, members in enumerate(sorted(byroot.values(), key=min)):
        widths = np.array([attrs[s].width for s in members])
        groups.append(
            SegmentGroup(
                group_id=gid,
                segment_ids=sorted(members),
                total_length=float(sum(attrs[s].length for s in members)),
                width_mean=float(widths.mean()),
                width_var=float(widths.var()),
            )
        )
    return groups


def _group_pixels(group, graph, shape):
    rows, cols = [], []
    for sid in group.segment_ids:
        pts = np.asarray(graph.edges[sid].polyline, dtype=float)
        rows.append(np.clip(np.round(pts[:, 0]).astype(int), 0, shape[0] - 1))
        cols.append(np.clip(np.round(pts[:, 1]).astype(int), 0, shape[1] - 1))
    return np.concatenate(rows), np.concatenate(cols)


def _prompt_pixels(prompt, shape):
    strokes = prompt if isinstance(prompt, (list, tuple)) else [prompt]
    pts = []
    for s in strokes:
        p = np.asarray(s.points, dtype=float)
        if len(p) > 1:
            seg = np.linalg.norm(np.diff(p, axis=0), axis=1)
            arclen = np.concatenate([[0.0], np.cumsum(seg)])
            if arclen[-1] > 0:
                t = np.arange(0, arclen[-1], 0.5)
                p = np.stack(
                    [np.interp(t, arclen, p[:, 0]), np.interp(t, arclen, p[:, 1])], axis=1
                )
        pts.append(p)
    pts = np.concatenate(pts)
    rr = np.clip(np.round(pts[:, 0]).astype(int), 0, shape[0] - 1)
    cc = np.clip(np.round(pts[:, 1]).astype(int), 0, shape[1] - 1)
    return rr, cc


def score_groups(groups, graph, attrs, prompt, shape, cfg: InstantiateConfig = None):
    """Linear score of each group against the prompt; higher is better."""
    cfg = cfg or InstantiateConfig()
    if not groups:
        raise ValueError("need at least one group")
    pr, pc = _prompt_pixels(prompt, shape)
    if len(pr) == 0:
        raise ValueError("empty prompt")
    ppts = np.stack([pr, pc], axis=1).astype(float)
    pdir = _chord_angle(ppts) if len(ppts) > 1 else None
    w = np.asarray(cfg.score_weights, dtype=float)
    scores = []
    for g in groups:
        gr, gc = _group_pixels(g, graph, shape)
        gpts = np.stack([gr, gc], axis=1).astype(float)
        d = np.sqrt(((ppts[:, None, :] - gpts[None, :, :]) ** 2).sum(-1)).min(axis=1)
        near_frac = float((d <= g.width_mean / 2.0 + 1.5).mean())
        if pdir is None:
            align = 0.5
        else:
            lens = np.array([attrs[s].length for s in g.segment_ids])
            oris = np.array([attrs[s].orientation for s in g.segment_ids])
            gdir = oris[np.argmax(lens)]
            align = 1.0 - _ang_diff(pdir, gdir) / (np.pi / 2)
        feats = np.array([-float(d.mean()), near_frac, align, np.log(g.total_length + 1.0)])
        scores.append(float(w @ feats))
    return scores


def fit_score_weights(feature_rows, labels, lr=0.1, steps=2000):
    """Logistic-regression fit of the scorer weights on labeled examples.

    feature_rows: [n,4] array; labels: 1 for the group matching the prompted
    instance, else 0.  Returns the fitted 4-vector.
    """
    X = np.asarray(feature_rows, dtype=float)
    t = np.asarray(labels, dtype=float)
    w = np.zeros(X.shape[1])
    for _ in range(steps):
        p = 1.0 / (1.0 + np.exp(-(X @ w)))
        w -= lr * (X.T @ (p - t)) / len(t)
    return w


def expand_region(seed_group, graph, attrs, shape, cfg: InstantiateConfig = None,
                  steps=None):
    """Grow the selected road by absorbing compatible neighbouring segments.

    Each step adds segments that share a node with the current set and pass
    the same continuity test used for grouping.  Returns (segment id set,
    centerline mask inflated to per-segment width).
    """
    cfg = cfg or InstantiateConfig()
    steps = cfg.expand_steps if steps is None else steps
    current = set(seed_group.segment_ids)
    incident = {}
    for sid, edge in enumerate(graph.edges):
        incident.setdefault(edge.a, []).append(sid)
        incident.setdefault(edge.b, []).append(sid)
    bridges = list(_bridge_pairs(graph, attrs, cfg))
    for _ in range(steps):
        added = set()
        for node, sids in incident.items():
            inside = [s for s in sids if s in current]
            if not inside:
                continue
            for cand in sids:
                if cand in current or cand in added:
                    continue
                if any(_compatible(attrs[a], attrs[cand], node, cfg) for a in inside):
                    added.add(cand)
        for a, na, b, nb, csid in bridges:
            if a in current and b not in current and b not in added:
                if _compatible2(attrs[a], na, attrs[b], nb, cfg):
                    added.add(b)
                    added.add(csid)  # keep the instance contiguous
            elif b in current and a not in current and a not in added:
                if _compatible2(attrs[a], na, attrs[b], nb, cfg):
                    added.add(a)
                    added.add(csid)
        if not added:
            break
        current |= added
    mask = np.zeros(shape, dtype=bool)
    for sid in sorted(current):
        pts = np.asarray(graph.edges[sid].polyline, dtype=float)
        rr = np.clip(np.round(pts[:, 0]).astype(int), 0, shape[0] - 1)
        cc = np.clip(np.round(pts[:, 1]).astype(int), 0, shape[1] - 1)
        line = np.zeros(shape, dtype=bool)
        line[rr, cc] = True
        radius = max(attrs[sid].width / 2.0, 1.0)
        mask |= ndimage.distance_transform_edt(~line) <= radius
    return current, mask


def refine_instance(region, image, cleaned):
    """Re-inflate the region's centerline to the local road width.

    Width comes from the cleaned full-road mask's distance transform; the
    result is clipped to the cleaned mask and closed.
    """
    region = np.asarray(region, dtype=bool)
    if not region.any():
        return region
    center = skeletonize(region & cleaned) if (region & cleaned).any() else skeletonize(region)
    if not center.any():
        return region & cleaned
    edt = ndimage.distance_transform_edt(cleaned)
    ys, xs = np.nonzero(center)
    out = np.zeros_like(region)
    h, w = region.shape
    for r, c, rad in zip(ys, xs, edt[ys, xs] + 0.75):
        ir = int(np.ceil(rad))
        r0, r1 = max(0, r - ir), min(h, r + ir + 1)
        c0, c1 = max(0, c - ir), min(w, c + ir + 1)
        yy, xx = np.ogrid[r0:r1, c0:c1]
        out[r0:r1, c0:c1] |= (yy - r) ** 2 + (xx - c) ** 2 <= rad * rad
    out = ndimage.binary_closing(out, structure=_EIGHT) & cleaned
    return out


def instantiate(image, soft_mask, prompt, cfg: InstantiateConfig = None):
    """Full pipeline: one road-instance mask for one prompt.

    Returns (mask, info dict).  Raises NoRoadStructure when the cleaned
    prediction has no traceable road.
    """
    cfg = cfg or InstantiateConfig()
    cleaned = clean_structure(image, soft_mask, cfg)
    if not cleaned.any():
        raise NoRoadStructure("cleaned mask is empty")
    graph = extract_graph(skeletonize(cleaned))
    if not graph.edges:
        raise NoRoadStructure("no centerline segments")
    attrs = segment_attributes(graph, image, cleaned)
    groups = group_segments(graph, attrs, cfg)
    scores = score_groups(groups, graph, attrs, prompt, cleaned.shape, cfg)
    best = int(np.argmax(scores))  # ties: lowest group_id wins via argmax
    members, region = expand_region(groups[best], graph, attrs, cleaned.shape, cfg)
    mask = refine_instance(region, image, cleaned)
    info = {
        "group_id": groups[best].group_id,
        "length_px": float(sum(attrs[s].length for s in members)),
        "mean_width_px": float(np.mean([attrs[s].width for s in members])),
        "segment_count": len(members),
    }
    return mask, info


def export_instance(path_png, path_json, mask, info):
    """PNG mask plus the JSON attribute sidecar."""
    from PIL import Image as PILImage

    PILImage.fromarray((np.asarray(mask, dtype=np.uint8)) * 255).save(path_png)
    with open(path_json, "w") as f:
        json.dump(info, f, indent=2)
