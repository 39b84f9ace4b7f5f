"""SPiN segmentation network.

Three parts:

* subpixel guidance (SPG): two residual blocks, depth-to-space to 2x resolution,
  then 1x1 and 3x3 convolutions giving an 8-channel embedding at 2H x 2W, plus
  two projections of it used as decoder skips at 1x and 2x resolution;
* a U-Net encoder-decoder whose last stage upsamples to 2H x 2W, giving the
  latent ``g`` (16 decoder channels + 8 guidance channels) and, through a single
  3x3 filter and a sigmoid, the subpixel prediction ``f0``;
* the learnable downsampler (LD): per-pixel softmax weights ``h`` over the four
  subpixels of each 2x2 block of ``f0``; the output ``f`` is their weighted sum.

Ablation variants swap SPG for convolutions on an interpolated centre image, or
LD for fixed bilinear/nearest weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import NamedTuple

import numpy as np

from .ops import (
    ConvParams,
    channel_slice,
    channel_softmax,
    concat_channels,
    conv2d,
    crop_to,
    max_pool2d,
    pad_to,
    relu,
    sigmoid,
    transposed_conv2d,
    upsample2x,
    weighted_block_sum,
)
from .subpixel import depth_to_space, space_to_depth
from .tensor import Tensor, as_tensor

GUIDANCE_MODES = ("spg", "bilinear_input", "nearest_input", "none")
DOWNSAMPLER_MODES = ("learnable", "bilinear", "nearest")

SPG_WIDTH = 16
EMBED_WIDTH = 8
LD_WIDTH = 16


@dataclass
class ModelConfig:
    input_slices: int = 5
    encoder_channels: tuple[int, ...] = (32, 64, 128, 256)
    decoder_width: int = 16
    guidance_mode: str | None = None
    downsampler_mode: str = "learnable"
    spg_enabled: bool | None = None
    output_classes: int = 1

    def __post_init__(self):
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        if self.guidance_mode is None:
            self.guidance_mode = "none" if self.spg_enabled is False else "spg"
        if self.spg_enabled is None:
            self.spg_enabled = self.guidance_mode == "spg"
        if self.guidance_mode not in GUIDANCE_MODES:
            raise ValueError(f"guidance_mode must be one of {GUIDANCE_MODES}, got {self.guidance_mode!r}")
        if self.downsampler_mode not in DOWNSAMPLER_MODES:
            raise ValueError(
                f"downsampler_mode must be one of {DOWNSAMPLER_MODES}, got {self.downsampler_mode!r}"
            )
        if self.spg_enabled != (self.guidance_mode == "spg"):
            raise ValueError(
                f"spg_enabled={self.spg_enabled} contradicts guidance_mode={self.guidance_mode!r}"
            )
        if self.input_slices < 1 or self.input_slices % 2 == 0:
            raise ValueError(f"input_slices must be a positive odd integer, got {self.input_slices}")
        if len(self.encoder_channels) < 2 or min(self.encoder_channels) < 1:
            raise ValueError(
                f"encoder_channels needs at least two positive widths, got {self.encoder_channels}"
            )
        if self.decoder_width < 1:
            raise ValueError(f"decoder_width must be positive, got {self.decoder_width}")
        if self.output_classes != 1:
            raise ValueError("only binary segmentation (output_classes=1) is supported")

    @property
    def depth(self) -> int:
        """Number of 2x2 max-pool stages in the encoder."""
        return len(self.encoder_channels) - 1

    @property
    def guidance_channels(self) -> int:
        return 0 if self.guidance_mode == "none" else EMBED_WIDTH

    @property
    def latent_channels(self) -> int:
        return self.decoder_width + self.guidance_channels

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        kw = {}
        for k, v in d.items():
            if k not in known:
                raise KeyError(k)
            if k == "encoder_channels":
                kw[k] = tuple(int(x) for x in str(v).split(",") if x.strip())
            elif k in ("input_slices", "decoder_width", "output_classes"):
                kw[k] = int(v)
            elif k == "spg_enabled":
                kw[k] = str(v).lower() in ("1", "true", "yes")
            else:
                kw[k] = v
        return cls(**kw)


class SpinOutput(NamedTuple):
    f: Tensor
    f0: Tensor
    h: Tensor
    g: Tensor
    features: dict


@dataclass
class _ConvSpec:
    stride: int = 1
    padding: int = 0
    transposed: bool = False


class SpinModel:
    """Parameters and forward pass of one SPiN variant."""

    def __init__(self, config: ModelConfig | None = None, seed: int = 0, dtype=np.float32):
        self.config = config if config is not None else ModelConfig()
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self._specs: dict[str, _ConvSpec] = {}
        rng = np.random.default_rng(seed)
        self._build(rng)

    # ------------------------------------------------------------------ build
    def _add_conv(self, name, cin, cout, k, rng, transposed=False):
        fan_in = cin if transposed else cin * k * k
        w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(cout, cin, k, k))
        self.params[f"{name}.weight"] = Tensor(w, requires_grad=True, name=f"{name}.weight", dtype=self.dtype)
        self.params[f"{name}.bias"] = Tensor(
            np.zeros(cout), requires_grad=True, name=f"{name}.bias", dtype=self.dtype
        )
        if transposed:
            self._specs[name] = _ConvSpec(stride=2, padding=0, transposed=True)
        else:
            self._specs[name] = _ConvSpec(stride=1, padding=k // 2)

    def _build(self, rng):
        cfg = self.config
        c = cfg.input_slices
        if cfg.guidance_mode == "spg":
            self._add_conv("spg.res1.conv1", c, SPG_WIDTH, 3, rng)
            self._add_conv("spg.res1.conv2", SPG_WIDTH, SPG_WIDTH, 3, rng)
            self._add_conv("spg.res1.proj", c, SPG_WIDTH, 1, rng)
            self._add_conv("spg.res2.conv1", SPG_WIDTH, SPG_WIDTH, 3, rng)
            self._add_conv("spg.res2.conv2", SPG_WIDTH, SPG_WIDTH, 3, rng)
            self._add_conv("spg.embed1x1", SPG_WIDTH // 4, EMBED_WIDTH, 1, rng)
            self._add_conv("spg.embed3x3", EMBED_WIDTH, EMBED_WIDTH, 3, rng)
            self._add_conv("spg.skip1x", 4 * EMBED_WIDTH, EMBED_WIDTH, 3, rng)
            self._add_conv("spg.skip2x", EMBED_WIDTH, EMBED_WIDTH, 3, rng)
        elif cfg.guidance_mode in ("bilinear_input", "nearest_input"):
            self._add_conv("guide.skip1x", 4, EMBED_WIDTH, 3, rng)
            self._add_conv("guide.skip2x", 1, EMBED_WIDTH, 3, rng)

        ch = cfg.encoder_channels
        prev = c
        for i, w in enumerate(ch):
            self._add_conv(f"unet.enc{i}.conv1", prev, w, 3, rng)
            self._add_conv(f"unet.enc{i}.conv2", w, w, 3, rng)
            prev = w
        for i in range(len(ch) - 2, -1, -1):
            self._add_conv(f"unet.up{i}", ch[i + 1], ch[i], 2, rng, transposed=True)
            extra = cfg.guidance_channels if i == 0 else 0
            self._add_conv(f"unet.dec{i}.conv1", 2 * ch[i] + extra, ch[i], 3, rng)
            self._add_conv(f"unet.dec{i}.conv2", ch[i], ch[i], 3, rng)
        self._add_conv("unet.up_out", ch[0], cfg.decoder_width, 2, rng, transposed=True)
        self._add_conv("unet.out", cfg.decoder_width, cfg.decoder_width, 3, rng)

        self._add_conv("head", cfg.latent_channels, 1, 3, rng)

        if cfg.downsampler_mode == "learnable":
            self._add_conv("ld.conv1", 4 * (cfg.latent_channels + 1), LD_WIDTH, 3, rng)
            self._add_conv("ld.conv2", LD_WIDTH, LD_WIDTH, 3, rng)
            self._add_conv("ld.conv3", LD_WIDTH, 4, 1, rng)

    # ------------------------------------------------------------- utilities
    def conv_params(self, name: str) -> ConvParams:
        s = self._specs[name]
        return ConvParams(self.params[f"{name}.weight"], self.params[f"{name}.bias"], s.stride, s.padding)

    def _conv(self, name: str, x: Tensor) -> Tensor:
        p = self.conv_params(name)
        if self._specs[name].transposed:
            return transposed_conv2d(x, p)
        return conv2d(x, p)

    def astype(self, dtype) -> "SpinModel":
        self.dtype = np.dtype(dtype)
        for p in self.params.values():
            p.data = p.data.astype(self.dtype)
            p.grad = None
        return self

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grads(self) -> dict[str, np.ndarray | None]:
        return {k: p.grad for k, p in self.params.items()}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = sorted(set(self.params) - set(state))
        unexpected = sorted(set(state) - set(self.params))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for k, p in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"{k}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = np.ascontiguousarray(arr, dtype=self.dtype)

    @property
    def size_multiple(self) -> int:
        return max(2**self.config.depth, 2)

    # --------------------------------------------------------------- forward
    def spg_forward(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Subpixel embedding: returns (embed2x, skip1x, skip2x)."""
        if self.config.guidance_mode != "spg":
            raise ValueError(f"model variant {self.config.guidance_mode!r} has no SPG branch")
        H, W = x.shape[2:]
        if H < 4 or W < 4 or H % 2 or W % 2:
            raise ValueError(f"spg_forward needs even spatial extents >= 4, got {(H, W)}")
        r = relu(self._conv("spg.res1.conv1", x))
        r = self._conv("spg.res1.conv2", r)
        a = relu(r + self._conv("spg.res1.proj", x))
        r = relu(self._conv("spg.res2.conv1", a))
        r = self._conv("spg.res2.conv2", r)
        a = relu(r + a)
        e = depth_to_space(a)
        e = relu(self._conv("spg.embed1x1", e))
        embed2x = self._conv("spg.embed3x3", e)
        skip1x = self._conv("spg.skip1x", space_to_depth(embed2x))
        skip2x = self._conv("spg.skip2x", embed2x)
        return embed2x, skip1x, skip2x

    def _guidance(self, x: Tensor):
        mode = self.config.guidance_mode
        if mode == "none":
            return None, None, None
        if mode == "spg":
            return self.spg_forward(x)
        c = self.config.input_slices
        centre = channel_slice(x, c // 2, c // 2 + 1)
        up = upsample2x(centre, "bilinear" if mode == "bilinear_input" else "nearest")
        skip1x = self._conv("guide.skip1x", space_to_depth(up))
        skip2x = self._conv("guide.skip2x", up)
        return up, skip1x, skip2x

    def encoder_decoder_forward(self, x: Tensor, skip1x: Tensor | None = None, skip2x: Tensor | None = None) -> Tensor:
        """U-Net pass returning the latent g at 2H x 2W."""
        H, W = x.shape[2:]
        m = 2**self.config.depth
        if H % m or W % m:
            raise ValueError(
                f"encoder_decoder_forward: spatial extents {(H, W)} must be divisible by {m}"
            )
        if (skip1x is None) != (self.config.guidance_channels == 0):
            raise ValueError("skip tensors must be given exactly when the variant uses guidance")
        n = len(self.config.encoder_channels)
        feats = []
        h = x
        for i in range(n):
            if i:
                h = max_pool2d(h)
            h = relu(self._conv(f"unet.enc{i}.conv1", h))
            h = relu(self._conv(f"unet.enc{i}.conv2", h))
            feats.append(h)
        for i in range(n - 2, -1, -1):
            h = self._conv(f"unet.up{i}", h)
            h = concat_channels(h, feats[i])
            if i == 0 and skip1x is not None:
                h = concat_channels(h, skip1x)
            h = relu(self._conv(f"unet.dec{i}.conv1", h))
            h = relu(self._conv(f"unet.dec{i}.conv2", h))
        h = self._conv("unet.up_out", h)
        h = relu(self._conv("unet.out", h))
        if skip2x is not None:
            h = concat_channels(h, skip2x)
        return h

    def subpixel_head(self, g: Tensor) -> Tensor:
        return sigmoid(self._conv("head", g))

    def learnable_downsampler(self, g: Tensor, f0: Tensor) -> tuple[Tensor, Tensor]:
        """Returns (h, f): softmax weights over each 2x2 block and the combined output."""
        if g.shape[0] != f0.shape[0] or g.shape[2:] != f0.shape[2:]:
            raise ValueError(f"learnable_downsampler: g {g.shape} and f0 {f0.shape} disagree")
        z = space_to_depth(concat_channels(g, f0))
        z = relu(self._conv("ld.conv1", z))
        z = relu(self._conv("ld.conv2", z))
        h = channel_softmax(self._conv("ld.conv3", z))
        return h, weighted_block_sum(h, space_to_depth(f0))

    def fixed_downsampler(self, f0: Tensor, mode: str) -> tuple[Tensor, Tensor]:
        B, _, H2, W2 = f0.shape
        w = np.zeros((B, 4, H2 // 2, W2 // 2), dtype=f0.dtype)
        if mode == "bilinear":
            w[:] = 0.25
        elif mode == "nearest":
            w[:, 0] = 1.0
        else:
            raise ValueError(f"unknown downsampler mode {mode!r}")
        h = Tensor(w)
        return h, weighted_block_sum(h, space_to_depth(f0))

    def forward(self, x) -> SpinOutput:
        x = as_tensor(x, self.dtype)
        if x.ndim != 4 or x.shape[1] != self.config.input_slices:
            raise ValueError(
                f"expected input (B, {self.config.input_slices}, H, W), got {x.shape}"
            )
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype))
        H, W = x.shape[2:]
        m = self.size_multiple
        Hp = -(-max(H, 4) // m) * m
        Wp = -(-max(W, 4) // m) * m
        xp = pad_to(x, Hp, Wp)
        embed, skip1x, skip2x = self._guidance(xp)
        g = self.encoder_decoder_forward(xp, skip1x, skip2x)
        f0 = self.subpixel_head(g)
        if self.config.downsampler_mode == "learnable":
            h, f = self.learnable_downsampler(g, f0)
        else:
            h, f = self.fixed_downsampler(f0, self.config.downsampler_mode)
        features = {} if embed is None else {"embed2x": crop_to(embed, 2 * H, 2 * W)}
        return SpinOutput(
            f=crop_to(f, H, W),
            f0=crop_to(f0, 2 * H, 2 * W),
            h=crop_to(h, H, W),
            g=crop_to(g, 2 * H, 2 * W),
            features=features,
        )

    __call__ = forward

    # ------------------------------------------------------------ accounting
    def count_parameters(self) -> dict[str, int]:
        groups = {"spg": "spg.", "guidance": "guide.", "encoder_decoder": "unet.", "head": "head.", "downsampler": "ld."}
        counts = {k: 0 for k in groups}
        for name, p in self.params.items():
            for k, prefix in groups.items():
                if name.startswith(prefix):
                    counts[k] += int(p.data.size)
        counts["total"] = sum(counts[k] for k in groups)
        return counts


def forward_full(model: SpinModel, x) -> SpinOutput:
    return model.forward(x)


def count_parameters(model: SpinModel) -> dict[str, int]:
    return model.count_parameters()
