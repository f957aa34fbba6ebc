"""Procedural road-scene generator with exact ground truth.

Scenes are built from smooth random centerlines rendered as constant-width
tubes over a textured background.  Occluder blobs hide road pixels in the
image but never in the mask, so a trained model has to bridge visual gaps.
Everything is deterministic under the scene seed.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy import interpolate, ndimage
from shapely.geometry import LineString

from .metrics import RoadGraph, GraphEdge


@dataclass
class SceneConfig:
    size: int = 256
    road_count: tuple = (1, 4)
    width_range: tuple = (3.0, 9.0)
    curvature: float = 0.35
    crossing_prob: float = 0.5
    occlusion_density: float = 0.15
    texture_octaves: int = 4
    pixel_noise: float = 0.03

    def __post_init__(self):
        if self.road_count[0] < 1:
            raise ValueError("road_count must allow at least one road")


@dataclass
class SyntheticScene:
    image: np.ndarray  # H x W x 3 float32 in [0,1]
    mask: np.ndarray  # H x W bool
    instance_labels: np.ndarray  # H x W int32, 0 = background
    truth_graph: RoadGraph
    centerlines: list  # per-road float polylines [(r,c), ...]
    widths: list
    component_count: int
    seed: int


def _value_noise(rng, size, octaves):
    out = np.zeros((size, size), dtype=np.float32)
    amp = 1.0
    cells = 4
    for _ in range(octaves):
        grid = rng.random((cells + 1, cells + 1)).astype(np.float32)
        zoom = size / cells
        layer = ndimage.zoom(grid, zoom, order=1)[:size, :size]
        out += amp * layer
        amp *= 0.5
        cells *= 2
    out -= out.min()
    rngspan = out.max() or 1.0
    return out / rngspan


def _smooth_polyline(rng, size, curvature):
    """Random smooth open curve crossing a good part of the image."""
    margin = size * 0.08
    p0 = rng.uniform(margin, size - margin, 2)
    ang = rng.uniform(0, 2 * np.pi)
    length = rng.uniform(0.7, 1.3) * size
    p1 = p0 + length * np.array([np.sin(ang), np.cos(ang)])
    n_way = rng.integers(3, 6)
    t = np.linspace(0, 1, n_way)
    base = p0[None, :] * (1 - t[:, None]) + p1[None, :] * t[:, None]
    normal = np.array([np.cos(ang), -np.sin(ang)])
    wiggle = rng.normal(0, curvature * size * 0.12, size=n_way)
    wiggle[0] = wiggle[-1] = 0.0
    pts = base + wiggle[:, None] * normal[None, :]
    pts = np.clip(pts, 1.0, size - 2.0)
    if n_way >= 4:
        try:
            tck, _ = interpolate.splprep([pts[:, 0], pts[:, 1]], s=0, k=3)
            u = np.linspace(0, 1, 40)
            pts = np.stack(interpolate.splev(u, tck), axis=1)
            pts = np.clip(pts, 1.0, size - 2.0)
        except Exception:
            pass
    return pts


def _crossing_pair(rng, size):
    """Two near-straight roads guaranteed to cross around the image center."""
    c = np.array([size / 2, size / 2]) + rng.uniform(-size * 0.1, size * 0.1, 2)
    a0 = rng.uniform(0, np.pi)
    a1 = a0 + rng.uniform(np.pi / 3, 2 * np.pi / 3)
    out = []
    for a in (a0, a1):
        d = np.array([np.sin(a), np.cos(a)])
        half = size
        pts = np.stack([c - half * d, c, c + half * d])
        # clip end points into the frame along the direction
        line = []
        for t in np.linspace(-1, 1, 60):
            p = c + t * half * d
            if 1.0 <= p[0] <= size - 2 and 1.0 <= p[1] <= size - 2:
                line.append(p)
        out.append(np.array(line))
    return out


def _densify(pts, step=0.4):
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    arclen = np.concatenate([[0.0], np.cumsum(seg)])
    total = arclen[-1]
    if total <= 0:
        return pts
    s = np.arange(0, total, step)
    r = np.interp(s, arclen, pts[:, 0])
    cc = np.interp(s, arclen, pts[:, 1])
    return np.stack([r, cc], axis=1)


def _render_tube(size, pts, width):
    center = np.zeros((size, size), dtype=bool)
    dense = _densify(pts)
    idx = np.round(dense).astype(int)
    idx = idx[(idx[:, 0] >= 0) & (idx[:, 0] < size) & (idx[:, 1] >= 0) & (idx[:, 1] < size)]
    center[idx[:, 0], idx[:, 1]] = True
    if not center.any():
        return center, center
    dist = ndimage.distance_transform_edt(~center)
    # small radius trim keeps the EDT-measured width within +-1 px of `width`
    return dist <= width / 2.0 - 0.3, center


def _road_components(masks):
    """Union-find over per-road masks; roads join when 8-adjacent."""
    n = len(masks)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    grown = [ndimage.binary_dilation(m, structure=np.ones((3, 3))) for m in masks]
    for i in range(n):
        for j in range(i + 1, n):
            if (grown[i] & masks[j]).any():
                parent[find(i)] = find(j)
    return len({find(i) for i in range(n)})


def _truth_graph(centerlines):
    """Planar graph: road endpoints plus pairwise crossing junctions."""
    lines = [LineString(np.asarray(p)[:, ::-1]) for p in centerlines]  # (x, y) order
    cuts = [set() for _ in lines]
    for i in range(len(lines)):
        for j in range(i + 1, len(lines)):
            inter = lines[i].intersection(lines[j])
            geoms = getattr(inter, "geoms", [inter] if not inter.is_empty else [])
            for g in geoms:
                if g.geom_type != "Point":
                    g = g.representative_point()
                cuts[i].add(lines[i].project(g))
                cuts[j].add(lines[j].project(g))
    nodes = []
    edges = []

    def add_node(pt):
        for k, existing in enumerate(nodes):
            if np.hypot(existing[0] - pt[0], existing[1] - pt[1]) < 1.5:
                return k
        nodes.append(pt)
        return len(nodes) - 1

    for li, line in enumerate(lines):
        stops = sorted({0.0, line.length} | {c for c in cuts[li] if 0 < c < line.length})
        for a, b in zip(stops[:-1], stops[1:]):
            if b - a < 1e-6:
                continue
            ts = np.linspace(a, b, max(int(b - a), 2))
            poly = [line.interpolate(t) for t in ts]
            poly_rc = np.asarray([(p.y, p.x) for p in poly])
            na = add_node(poly_rc[0])
            nb = add_node(poly_rc[-1])
            length = float(np.sqrt((np.diff(poly_rc, axis=0) ** 2).sum(axis=1)).sum())
            edges.append(GraphEdge(na, nb, poly_rc, length))
    degrees = {}
    for e in edges:
        degrees[e.a] = degrees.get(e.a, 0) + 1
        degrees[e.b] = degrees.get(e.b, 0) + 1
    kinds = ["junction" if degrees.get(i, 0) >= 3 else "endpoint" for i in range(len(nodes))]
    return RoadGraph(nodes=[tuple(n) for n in nodes], node_kinds=kinds, edges=edges)


def generate_scene(cfg: SceneConfig, seed: int) -> SyntheticScene:
    rng = np.random.default_rng(seed)
    size = cfg.size
    lo, hi = cfg.road_count
    n_roads = int(rng.integers(lo, hi + 1))

    centerlines = []
    if n_roads >= 2 and rng.random() < cfg.crossing_prob:
        centerlines.extend(_crossing_pair(rng, size))
    while len(centerlines) < n_roads:
        centerlines.append(_smooth_polyline(rng, size, cfg.curvature))
    centerlines = centerlines[:n_roads]

    widths = [float(rng.uniform(*cfg.width_range)) for _ in centerlines]
    masks, centers = [], []
    for pts, w in zip(centerlines, widths):
        m, c = _render_tube(size, pts, w)
        masks.append(m)
        centers.append(c)

    labels = np.zeros((size, size), dtype=np.int32)
    for i, m in enumerate(masks):
        labels[m] = i + 1
    mask = labels > 0

    # image: textured background, darker roads, occluders, pixel noise
    tex = _value_noise(rng, size, cfg.texture_octaves)
    base = 0.45 + 0.35 * tex
    img = np.stack([base * 0.95, base, base * 0.85], axis=2)
    for i, m in enumerate(masks):
        shade = rng.uniform(0.15, 0.35)
        road_col = np.array([shade, shade, shade * 1.05])
        img[m] = 0.25 * img[m] + 0.75 * road_col[None, :]
    n_occ = rng.poisson(cfg.occlusion_density * 12)
    for _ in range(n_occ):
        cy, cx = rng.uniform(0, size, 2)
        rad = rng.uniform(size * 0.02, size * 0.08)
        yy, xx = np.ogrid[:size, :size]
        blob = (yy - cy) ** 2 + (xx - cx) ** 2 <= rad**2
        col = rng.uniform(0.3, 0.9, 3)
        img[blob] = col
    img += rng.normal(0, cfg.pixel_noise, img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)

    return SyntheticScene(
        image=img,
        mask=mask,
        instance_labels=labels,
        truth_graph=_truth_graph(centerlines),
        centerlines=[np.asarray(p) for p in centerlines],
        widths=widths,
        component_count=_road_components(masks),
        seed=int(seed),
    )


def generate_crossing_scene(cfg: SceneConfig, seed: int) -> SyntheticScene:
    """Exactly two roads crossing near the center (instantiation fixtures)."""
    sub = SceneConfig(
        size=cfg.size,
        road_count=(2, 2),
        width_range=cfg.width_range,
        curvature=0.0,
        crossing_prob=1.0,
        occlusion_density=cfg.occlusion_density,
        texture_octaves=cfg.texture_octaves,
        pixel_noise=cfg.pixel_noise,
    )
    return generate_scene(sub, seed)


# -- dataset directories -------------------------------------------------------


def _graph_to_json(g: RoadGraph):
    return {
        "nodes": [[float(r), float(c)] for r, c in g.nodes],
        "node_kinds": list(g.node_kinds),
        "edges": [
            {
                "a": e.a,
                "b": e.b,
                "polyline": [[float(r), float(c)] for r, c in e.polyline],
                "length": float(e.length),
            }
            for e in g.edges
        ],
    }


def save_scene(scene: SyntheticScene, root, name):
    Image.fromarray((scene.image * 255).astype(np.uint8)).save(
        os.path.join(root, "images", f"{name}.png")
    )
    Image.fromarray((scene.mask * 255).astype(np.uint8)).save(
        os.path.join(root, "masks", f"{name}.png")
    )
    Image.fromarray(scene.instance_labels.astype(np.uint8)).save(
        os.path.join(root, "instances", f"{name}.png")
    )
    with open(os.path.join(root, "graphs", f"{name}.json"), "w") as f:
        json.dump(_graph_to_json(scene.truth_graph), f)


def generate_split(cfg: SceneConfig, n: int, seed: int, outdir) -> str:
    """Write n scenes (PNG image/mask/instances + JSON graph) plus a manifest."""
    for sub in ("images", "masks", "instances", "graphs"):
        os.makedirs(os.path.join(outdir, sub), exist_ok=True)
    entries = []
    for i in range(n):
        scene_seed = seed + i
        scene = generate_scene(cfg, scene_seed)
        name = f"scene_{scene_seed:08d}"
        save_scene(scene, outdir, name)
        entries.append({"name": name, "seed": scene_seed})
    manifest = {
        "size": cfg.size,
        "count": n,
        "base_seed": seed,
        "scenes": entries,
    }
    with open(os.path.join(outdir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return outdir


def load_split(outdir):
    """Iterate (name, image, mask, instance_labels) from a dataset directory."""
    with open(os.path.join(outdir, "manifest.json")) as f:
        manifest = json.load(f)
    items = []
    for entry in manifest["scenes"]:
        name = entry["name"]
        img = np.asarray(Image.open(os.path.join(outdir, "images", f"{name}.png")))
        mask = np.asarray(Image.open(os.path.join(outdir, "masks", f"{name}.png"))) > 127
        inst = np.asarray(Image.open(os.path.join(outdir, "instances", f"{name}.png")))
        items.append((name, img.astype(np.float32) / 255.0, mask, inst.astype(np.int32)))
    return items
