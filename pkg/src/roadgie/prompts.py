"""Simulated user corrections: error-region selection, center-biased clicks,
scribble families with smooth warping, and expert-guided placement.

All sampling goes through an explicit numpy Generator, so a fixed seed
reproduces the exact stroke sequence.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from skimage.morphology import skeletonize as _thin

SCRIBBLE_KINDS = ("center", "line", "bezier")


class ConvergedError(Exception):
    """Prediction matches the label exactly; no correction region exists."""


class NoUncertaintyError(Exception):
    """Expert uncertainty map is identically zero."""


@dataclass
class Stroke:
    kind: str  # point | center_scribble | line_scribble | bezier_scribble | freehand
    polarity: str  # positive | negative
    points: np.ndarray  # [(row, col), ...] floats
    width: float = 3.0

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if self.points.size == 0:
            raise ValueError("stroke needs at least one point")
        if self.kind == "point" and len(self.points) != 1:
            raise ValueError("point stroke must have exactly one point")
        if self.width <= 0:
            raise ValueError("stroke width must be positive")
        if self.polarity not in ("positive", "negative"):
            raise ValueError(f"bad polarity {self.polarity!r}")

    def to_json(self):
        return {
            "kind": self.kind,
            "polarity": self.polarity,
            "width": float(self.width),
            "points": [[float(r), float(c)] for r, c in self.points],
        }

    @staticmethod
    def from_json(obj):
        try:
            return Stroke(
                kind=str(obj["kind"]),
                polarity=str(obj["polarity"]),
                points=np.asarray(obj["points"], dtype=float),
                width=float(obj["width"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"malformed stroke JSON: {exc}") from exc


@dataclass
class ErrorRegion:
    mask: np.ndarray  # bool, one connected component of the error map
    polarity: str  # positive: false negative (y=1, pred=0); negative: false positive

    def area(self):
        return int(self.mask.sum())


_EIGHT = np.ones((3, 3), dtype=int)


def error_regions(y, y_hat):
    """All sign-consistent connected components of the error map y - y_hat."""
    y = np.asarray(y, dtype=bool)
    y_hat = np.asarray(y_hat, dtype=bool)
    out = []
    for err, polarity in (((y & ~y_hat), "positive"), ((~y & y_hat), "negative")):
        lbl, n = ndimage.label(err, structure=_EIGHT)
        for i in range(1, n + 1):
            out.append(ErrorRegion(lbl == i, polarity))
    return out


def select_error_region(y, y_hat, rng) -> ErrorRegion:
    """One error component, chosen with probability proportional to its area."""
    if np.asarray(y).shape != np.asarray(y_hat).shape:
        raise ValueError("mask shapes differ")
    regions = error_regions(y, y_hat)
    if not regions:
        raise ConvergedError("prediction equals label")
    areas = np.array([r.area() for r in regions], dtype=float)
    idx = rng.choice(len(regions), p=areas / areas.sum())
    return regions[idx]


def sample_point(region: ErrorRegion, alpha: float, rng) -> Stroke:
    """Center-biased click inside the region.

    Pixel probability is exp(alpha * E) over the region, with E the
    Euclidean distance transform normalized to [0, 1].
    """
    if not (1.0 <= alpha <= 10.0):
        raise ValueError("alpha must be in [1, 10]")
    ys, xs = np.nonzero(region.mask)
    if len(ys) == 0:
        raise ValueError("empty error region")
    edt = ndimage.distance_transform_edt(region.mask)
    e = edt[ys, xs]
    if e.max() > 0:
        e = e / e.max()
    p = np.exp(alpha * e)
    p /= p.sum()
    i = rng.choice(len(ys), p=p)
    return Stroke("point", region.polarity, [(float(ys[i]), float(xs[i]))])


# -- scribbles ----------------------------------------------------------------


def _skeleton_longest_path(mask):
    """Ordered pixel path along the longest branch of the skeleton."""
    skel = _thin(mask)
    pts = list(zip(*np.nonzero(skel)))
    if len(pts) < 2:
        return None
    index = {p: i for i, p in enumerate(pts)}
    adj = [[] for _ in pts]
    for (r, c), i in index.items():
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                if dr == dc == 0:
                    continue
                j = index.get((r + dr, c + dc))
                if j is not None:
                    adj[i].append(j)

    def bfs(src):
        prev = {src: None}
        order = [src]
        for node in order:
            for nb in adj[node]:
                if nb not in prev:
                    prev[nb] = node
                    order.append(nb)
        far = order[-1]
        path = [far]
        while prev[path[-1]] is not None:
            path.append(prev[path[-1]])
        return far, path[::-1]

    a, _ = bfs(0)
    _, path = bfs(a)
    return np.array([pts[i] for i in path], dtype=float)


def sample_scribble(region: ErrorRegion, kind: str, rng, width=3.0,
                    warp_amplitude=2.0, warp_smoothness=16.0) -> Stroke:
    """One scribble of the requested family, warped and clipped.

    center: random contiguous sub-path (30-100%) of the region skeleton;
    line: straight segment between two region pixels; bezier: quadratic
    curve over three region control points.  Degenerate regions fall back
    to a center-biased point.
    """
    if kind not in SCRIBBLE_KINDS:
        raise ValueError(f"unknown scribble kind {kind!r}")
    ys, xs = np.nonzero(region.mask)
    if len(ys) == 0:
        raise ValueError("empty error region")

    if kind == "center":
        path = _skeleton_longest_path(region.mask)
        if path is None or len(path) < 2:
            return sample_point(region, 5.0, rng)
        frac = rng.uniform(0.3, 1.0)
        seg = max(2, int(round(frac * len(path))))
        start = rng.integers(0, len(path) - seg + 1)
        pts = path[start : start + seg]
        stroke = Stroke("center_scribble", region.polarity, pts, width)
    elif kind == "line":
        i, j = rng.integers(0, len(ys), 2)
        p0 = np.array([ys[i], xs[i]], dtype=float)
        p1 = np.array([ys[j], xs[j]], dtype=float)
        t = np.linspace(0, 1, 32)[:, None]
        pts = p0[None, :] * (1 - t) + p1[None, :] * t
        stroke = Stroke("line_scribble", region.polarity, pts, width)
    else:
        idx = rng.integers(0, len(ys), 3)
        cp = np.stack([ys[idx], xs[idx]], axis=1).astype(float)
        t = np.linspace(0, 1, 48)[:, None]
        pts = (1 - t) ** 2 * cp[0] + 2 * (1 - t) * t * cp[1] + t**2 * cp[2]
        stroke = Stroke("bezier_scribble", region.polarity, pts, width)

    stroke = warp_stroke(stroke, warp_amplitude, warp_smoothness, rng)
    rmin, rmax = ys.min() - width, ys.max() + width
    cmin, cmax = xs.min() - width, xs.max() + width
    stroke.points[:, 0] = np.clip(stroke.points[:, 0], rmin, rmax)
    stroke.points[:, 1] = np.clip(stroke.points[:, 1], cmin, cmax)
    h, w = region.mask.shape
    stroke.points[:, 0] = np.clip(stroke.points[:, 0], 0, h - 1)
    stroke.points[:, 1] = np.clip(stroke.points[:, 1], 0, w - 1)
    return stroke


def warp_stroke(stroke: Stroke, amplitude: float, smoothness: float, rng) -> Stroke:
    """Perturb stroke points by a smooth random displacement field.

    The field is a sum of four low-frequency sinusoidal modes per axis
    (wavelengths >= 2*pi*smoothness), each bounded by amplitude/4, so the
    total displacement per axis never exceeds the amplitude.
    """
    if amplitude < 0:
        raise ValueError("amplitude must be >= 0")
    if amplitude == 0:
        return Stroke(stroke.kind, stroke.polarity, stroke.points.copy(), stroke.width)
    pts = stroke.points.copy()
    disp = np.zeros_like(pts)
    for axis in range(2):
        for _ in range(4):
            lam = rng.uniform(2 * np.pi * smoothness, 4 * np.pi * smoothness)
            direction = rng.uniform(0, 2 * np.pi)
            kvec = np.array([np.sin(direction), np.cos(direction)]) * (2 * np.pi / lam)
            phase = rng.uniform(0, 2 * np.pi)
            disp[:, axis] += (amplitude / 4.0) * np.sin(pts @ kvec + phase)
    return Stroke(stroke.kind, stroke.polarity, pts + disp, stroke.width)


def snap_into(stroke: Stroke, mask) -> Stroke:
    """Pull every stroke point onto the nearest pixel of `mask`.

    Keeps simulated prompts polarity-consistent after warping (positive on
    foreground, negative on background).
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return stroke
    _, (ir, ic) = ndimage.distance_transform_edt(~mask, return_indices=True)
    pts = stroke.points.copy()
    rr = np.clip(np.round(pts[:, 0]).astype(int), 0, mask.shape[0] - 1)
    cc = np.clip(np.round(pts[:, 1]).astype(int), 0, mask.shape[1] - 1)
    off = ~mask[rr, cc]
    pts[off, 0] = ir[rr[off], cc[off]]
    pts[off, 1] = ic[rr[off], cc[off]]
    return Stroke(stroke.kind, stroke.polarity, pts, stroke.width)


# -- rasterization ------------------------------------------------------------


def rasterize(stroke: Stroke, height: int, width: int) -> np.ndarray:
    """Soft mask in [0,1].

    Points become a Gaussian disk with peak 1 and support radius equal to
    the stroke width; scribbles stamp soft disks of radius width/2 along the
    densified polyline, max-combined.
    """
    out = np.zeros((height, width), dtype=np.float32)
    pts = stroke.points
    if stroke.kind == "point":
        radius = stroke.width
        sigma = stroke.width / 2.0
    else:
        radius = stroke.width / 2.0
        sigma = 0.425 * stroke.width
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        if len(pts) > 1 and seg.sum() > 0:
            arclen = np.concatenate([[0.0], np.cumsum(seg)])
            s = np.arange(0, arclen[-1], 0.35)
            pts = np.stack(
                [np.interp(s, arclen, pts[:, 0]), np.interp(s, arclen, pts[:, 1])],
                axis=1,
            ) if len(s) >= 2 else pts

    r0 = max(0, int(np.floor(pts[:, 0].min() - radius)))
    r1 = min(height - 1, int(np.ceil(pts[:, 0].max() + radius)))
    c0 = max(0, int(np.floor(pts[:, 1].min() - radius)))
    c1 = min(width - 1, int(np.ceil(pts[:, 1].max() + radius)))
    if r1 < r0 or c1 < c0:
        return out
    yy, xx = np.mgrid[r0 : r1 + 1, c0 : c1 + 1]
    grid = np.stack([yy.ravel(), xx.ravel()], axis=1).astype(float)
    tree = cKDTree(pts)
    d, _ = tree.query(grid)
    val = np.exp(-(d**2) / (2 * sigma**2))
    val[d > radius] = 0.0
    out[r0 : r1 + 1, c0 : c1 + 1] = val.reshape(yy.shape).astype(np.float32)
    return out


# -- expert-guided placement ---------------------------------------------------


def expert_uncertainty(image, y, experts) -> np.ndarray:
    """Mean absolute disagreement between expert soft masks and the label."""
    if not experts:
        raise ValueError("need at least one expert")
    y = np.asarray(y, dtype=np.float32)
    acc = np.zeros_like(y)
    for expert in experts:
        pred = np.asarray(expert(image), dtype=np.float32)
        if pred.shape != y.shape:
            raise ValueError("expert prediction shape mismatch")
        acc += np.abs(pred - y)
    return acc / len(experts)


def expert_guided_sample(uncertainty, beta: float, rng):
    """Pixel drawn with probability proportional to uncertainty**beta."""
    if beta <= 1.0:
        raise ValueError("beta must be > 1")
    u = np.asarray(uncertainty, dtype=np.float64)
    weights = u**beta
    total = weights.sum()
    if total <= 0:
        raise NoUncertaintyError("uncertainty map is identically zero")
    flat = weights.ravel() / total
    idx = rng.choice(flat.size, p=flat)
    return np.unravel_index(idx, u.shape)


class RidgeExpert:
    """Classical dark-ridge detector used as a cheap ensemble member."""

    def __init__(self, sigmas=(1.0, 2.0, 3.0)):
        self.sigmas = sigmas

    def __call__(self, image):
        from skimage.filters import sato

        img = np.asarray(image, dtype=np.float32)
        gray = img.mean(axis=0) if img.ndim == 3 and img.shape[0] == 3 else (
            img.mean(axis=2) if img.ndim == 3 else img
        )
        resp = sato(1.0 - gray, sigmas=self.sigmas, black_ridges=False)
        top = np.percentile(resp, 99) or 1.0
        return np.clip(resp / max(top, 1e-6), 0.0, 1.0)


class NetworkExpert:
    """Wraps a parameter snapshot as a prompt-free single-shot predictor."""

    def __init__(self, net):
        self.net = net

    def __call__(self, image):
        from .network import PromptMap

        img = np.asarray(image, dtype=np.float32)
        if img.ndim == 3 and img.shape[2] == 3:
            img = img.transpose(2, 0, 1)
        h, w = img.shape[1:]
        logits, _ = self.net.forward_step(img, np.zeros((h, w), np.float32), PromptMap(h, w))
        return 1.0 / (1.0 + np.exp(-logits))


# -- round-level driver --------------------------------------------------------


@dataclass
class PromptSimConfig:
    alpha: float = 5.0  # center-bias exponent for clicks
    beta: float = 2.0  # expert-guided sharpness
    stroke_width: float = 3.0
    kinds: tuple = ("point", "center", "line", "bezier")
    warp_amplitude: float = 2.0
    warp_smoothness: float = 16.0


def simulate_round(y, y_hat, rng, cfg: PromptSimConfig, n_prompts,
                   uncertainty=None):
    """Corrective strokes for one interaction round.

    When `uncertainty` is given, placement follows the expert-guided
    distribution; otherwise an error region is drawn area-proportionally.
    Returns [] when the prediction already matches the label.
    """
    y = np.asarray(y, dtype=bool)
    y_hat = np.asarray(y_hat, dtype=bool)
    strokes = []
    for _ in range(n_prompts):
        regions = error_regions(y, y_hat)
        if not regions:
            break
        region = None
        if uncertainty is not None:
            err = y != y_hat
            masked = np.where(err, uncertainty, 0.0)
            try:
                pix = expert_guided_sample(masked, cfg.beta, rng)
                for cand in regions:
                    if cand.mask[pix]:
                        region = cand
                        break
            except NoUncertaintyError:
                region = None
        if region is None:
            areas = np.array([r.area() for r in regions], dtype=float)
            region = regions[rng.choice(len(regions), p=areas / areas.sum())]
        kind = cfg.kinds[rng.integers(0, len(cfg.kinds))]
        if kind == "point" or region.area() < 4:
            stroke = sample_point(region, cfg.alpha, rng)
        else:
            stroke = sample_scribble(region, kind, rng, cfg.stroke_width,
                                     cfg.warp_amplitude, cfg.warp_smoothness)
        target = y if region.polarity == "positive" else ~y
        strokes.append(snap_into(stroke, target))
    return strokes
