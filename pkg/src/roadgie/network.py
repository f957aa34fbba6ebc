"""Segmentation network: lightweight encoder-decoder with a directional
aggregation head.

The network consumes a 6-channel input (RGB image, previous soft mask,
positive prompt map, negative prompt map) and emits per-pixel logits.  The
head runs four learnable 1D strip convolutions (vertical, horizontal,
diagonal, anti-diagonal), concatenates the responses channel-wise and fuses
them with a 1x1 convolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import STRIP_DIRECTIONS, Tensor
from .checkpoint import load_checkpoint, save_checkpoint


@dataclass
class NetworkConfig:
    input_channels: int = 6
    encoder_widths: list = field(default_factory=lambda: [16, 32, 64])
    dam_kernel_halfwidth: int = 4
    image_size: int = 256
    threshold: float = 0.5
    # Feed the previous prediction to the next round as a probability map
    # rather than the thresholded binary mask.
    soft_mask_feedback: bool = True
    tile_overlap: int = 32

    def __post_init__(self):
        if self.input_channels < 3:
            raise ValueError("input_channels must be >= 3")
        if not self.encoder_widths or any(w <= 0 for w in self.encoder_widths):
            raise ValueError("encoder_widths must be non-empty and positive")
        if self.dam_kernel_halfwidth < 1:
            raise ValueError("dam_kernel_halfwidth must be >= 1")
        if not (0.0 < self.threshold < 1.0):
            raise ValueError("threshold must be in (0,1)")

    def to_kv(self):
        return {
            "input_channels": self.input_channels,
            "encoder_widths": ",".join(str(w) for w in self.encoder_widths),
            "dam_kernel_halfwidth": self.dam_kernel_halfwidth,
            "image_size": self.image_size,
            "threshold": self.threshold,
            "soft_mask_feedback": int(self.soft_mask_feedback),
            "tile_overlap": self.tile_overlap,
        }

    @staticmethod
    def from_kv(kv):
        cfg = NetworkConfig()
        if "input_channels" in kv:
            cfg.input_channels = int(kv["input_channels"])
        if "encoder_widths" in kv:
            cfg.encoder_widths = [int(w) for w in str(kv["encoder_widths"]).split(",")]
        if "dam_kernel_halfwidth" in kv:
            cfg.dam_kernel_halfwidth = int(kv["dam_kernel_halfwidth"])
        if "image_size" in kv:
            cfg.image_size = int(kv["image_size"])
        if "threshold" in kv:
            cfg.threshold = float(kv["threshold"])
        if "soft_mask_feedback" in kv:
            cfg.soft_mask_feedback = bool(int(kv["soft_mask_feedback"]))
        if "tile_overlap" in kv:
            cfg.tile_overlap = int(kv["tile_overlap"])
        return cfg


class PromptMap:
    """Accumulated positive/negative prompt channels for one session.

    Values live in [0,1] and only ever grow: a rasterized prompt is never
    erased by later rounds.
    """

    def __init__(self, height, width):
        self.positive = np.zeros((height, width), dtype=np.float32)
        self.negative = np.zeros((height, width), dtype=np.float32)

    def accumulate(self, raster, polarity):
        target = self.positive if polarity == "positive" else self.negative
        np.maximum(target, raster, out=target)

    def coverage_mask(self):
        """Binary union of all prompt supports (soft disks cut at 0.5)."""
        return ((self.positive >= 0.5) | (self.negative >= 0.5)).astype(np.float32)

    def copy(self):
        out = PromptMap(*self.positive.shape)
        out.positive = self.positive.copy()
        out.negative = self.negative.copy()
        return out


class RoadNet:
    """The iterative-refinement segmentation function."""

    def __init__(self, config=None, seed=0):
        self.config = config or NetworkConfig()
        self.params = {}
        self._build(np.random.default_rng(seed))

    # -- parameters -----------------------------------------------------------

    def _add_conv(self, rng, name, cin, cout, k):
        fan_in = cin * k * k
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, k, k))
        self.params[f"{name}.w"] = Tensor.param(w, name=f"{name}.w")
        self.params[f"{name}.b"] = Tensor.param(np.zeros(cout), name=f"{name}.b")

    def _build(self, rng):
        cfg = self.config
        widths = cfg.encoder_widths
        cin = cfg.input_channels
        for i, w in enumerate(widths):
            self._add_conv(rng, f"enc{i}", cin, w, 3)
            cin = w
        for i in range(len(widths) - 2, -1, -1):
            self._add_conv(rng, f"dec{i}", widths[i + 1] + widths[i], widths[i], 3)
        taps = 2 * cfg.dam_kernel_halfwidth + 1
        for d, _ in enumerate(STRIP_DIRECTIONS):
            w = np.zeros(taps)
            w[cfg.dam_kernel_halfwidth] = 1.0
            w += rng.normal(0.0, 0.05, size=taps)
            self.params[f"strip{d}.w"] = Tensor.param(w, name=f"strip{d}.w")
            self.params[f"strip{d}.b"] = Tensor.param(np.zeros(()), name=f"strip{d}.b")
        self._add_conv(rng, "fuse", 4 * widths[0], 1, 1)
        # start from a background prior: roads are a small fraction of the
        # image, and a near-zero init otherwise drifts into the all-foreground
        # basin (the focal term only sees positives)
        self.params["fuse.b"].data[:] = -2.0

    def param_count(self):
        return sum(int(np.prod(p.data.shape)) for p in self.params.values())

    def save(self, path):
        save_checkpoint(path, {k: v.data for k, v in self.params.items()})

    def load(self, path):
        state = load_checkpoint(path)
        for name, p in self.params.items():
            if name not in state:
                raise ValueError(f"checkpoint missing parameter {name}")
            if tuple(state[name].shape) != tuple(p.data.shape):
                raise ValueError(
                    f"checkpoint parameter {name} has shape {state[name].shape}, "
                    f"expected {p.data.shape}"
                )
            p.data = state[name].copy()
            p.grad = None

    def snapshot(self):
        """Copy-on-read parameter snapshot for concurrent inference."""
        clone = RoadNet.__new__(RoadNet)
        clone.config = self.config
        clone.params = {k: Tensor(v.data.copy()) for k, v in self.params.items()}
        return clone

    # -- forward --------------------------------------------------------------

    def _conv(self, name, x, stride=1, pad=1):
        return ad.conv2d_nhwc(x, self.params[f"{name}.w"], self.params[f"{name}.b"],
                              stride=stride, pad=pad)

    def forward(self, batch):
        """batch: Tensor or array [N, H, W, input_channels] -> logits Tensor [N,H,W]."""
        x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=np.float32))
        n, h, w, c = x.shape
        if c != self.config.input_channels:
            raise ValueError(f"expected {self.config.input_channels} input channels, got {c}")
        levels = len(self.config.encoder_widths)
        div = 2 ** (levels - 1)
        if h % div or w % div:
            raise ValueError(f"spatial dims {h}x{w} must be divisible by {div}")
        skips = []
        cur = x
        for i in range(levels):
            if i > 0:
                cur = ad.max_pool2d(cur)
            cur = self._conv(f"enc{i}", cur).relu()
            skips.append(cur)
        cur = skips[-1]
        for i in range(levels - 2, -1, -1):
            cur = ad.concat([ad.nearest_upsample2d(cur), skips[i]], axis=3)
            cur = self._conv(f"dec{i}", cur).relu()
        logits = self.dam_head(cur)
        return logits.reshape(n, h, w)

    def dam_head(self, feat):
        """Directional aggregation over the final decoder feature map.

        feat: Tensor [N,H,W,C].  Returns pre-sigmoid logits [N,H,W,1].
        Concatenation order is the fixed STRIP_DIRECTIONS order.
        """
        responses = [
            ad.strip_conv_nhwc(feat, d, self.params[f"strip{i}.w"], self.params[f"strip{i}.b"])
            for i, d in enumerate(STRIP_DIRECTIONS)
        ]
        fused = ad.concat(responses, axis=3)
        return self._conv("fuse", fused, pad=0)

    # -- inference-facing step ------------------------------------------------

    def forward_step(self, image, m_prev, prompt_map):
        """One refinement round.

        image: [3,H,W] floats in [0,1]; m_prev: [H,W] soft mask (all zeros on
        round 0); prompt_map: PromptMap.  Returns (logits [H,W] float array,
        y_hat [H,W] bool array).
        """
        image = np.asarray(image, dtype=np.float32)
        h, w = image.shape[1:]
        if m_prev.shape != (h, w) or prompt_map.positive.shape != (h, w):
            raise ValueError(
                f"spatial size mismatch: image {h}x{w}, mask {m_prev.shape}, "
                f"prompts {prompt_map.positive.shape}"
            )
        stacked = np.concatenate(
            [
                image.transpose(1, 2, 0),
                m_prev[:, :, None],
                prompt_map.positive[:, :, None],
                prompt_map.negative[:, :, None],
            ],
            axis=2,
        ).astype(np.float32)
        if max(h, w) > self.config.image_size:
            logits = self._tiled_forward(stacked)
        else:
            logits = self.forward(stacked[None]).data[0]
        prob = 1.0 / (1.0 + np.exp(-logits))
        return logits, prob > self.config.threshold

    def _tiled_forward(self, stacked):
        """Sliding-tile inference for images beyond the configured size.

        Tiles of config.image_size with config.tile_overlap overlap; logits
        averaged where tiles overlap.
        """
        h, w, c = stacked.shape
        tile = self.config.image_size
        step = tile - self.config.tile_overlap
        acc = np.zeros((h, w), dtype=np.float64)
        cnt = np.zeros((h, w), dtype=np.float64)
        rows = list(range(0, max(h - tile, 0) + 1, step)) or [0]
        cols = list(range(0, max(w - tile, 0) + 1, step)) or [0]
        if rows[-1] + tile < h:
            rows.append(h - tile)
        if cols[-1] + tile < w:
            cols.append(w - tile)
        for r in rows:
            for cpos in cols:
                patch = stacked[r : r + tile, cpos : cpos + tile]
                ph, pw = patch.shape[:2]
                if ph < tile or pw < tile:
                    padded = np.zeros((tile, tile, c), dtype=np.float32)
                    padded[:ph, :pw] = patch
                    patch = padded
                out = self.forward(patch[None]).data[0]
                acc[r : r + ph, cpos : cpos + pw] += out[:ph, :pw]
                cnt[r : r + ph, cpos : cpos + pw] += 1.0
        return (acc / np.maximum(cnt, 1.0)).astype(np.float32)
