"""Frozen 3D-feature extraction and zero-conv fusion into text-embedding space.

The extractor is a fixed-seed random convolutional map standing in for a
pretrained geometry encoder: deterministic, never trainable, but fully
differentiable with respect to its input so downstream feature losses can
steer generation. The fusion net projects feature volumes to the text width,
pools them down to the token count, and injects them through a convolution
initialized to exactly zero, so an untrained fusion is the identity on the
text embedding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import serialize
from .autograd import Tensor
from .errors import ShapeError

EXTRACTOR_VERSION = "frozen-conv-v1"


@dataclass
class TextEmbedding:
    tokens: Tensor  # [n_tokens, dim]

    def __post_init__(self):
        if self.tokens.data.ndim != 2 or self.tokens.data.shape[0] < 1:
            raise ShapeError(f"text embedding must be [n_tokens >= 1, dim], got {self.tokens.data.shape}")


@dataclass
class Feature3D:
    data: Tensor  # [channels, h, w, temporal_extent]
    extractor_version: str = EXTRACTOR_VERSION

    @property
    def temporal_extent(self) -> int:
        return self.data.data.shape[3]


@dataclass
class FusedEmbedding:
    tokens: Tensor
    provenance: str  # "text_only" | "fused"


def upsample_temporal(latent: Tensor) -> Tensor:
    """Expand d latent frames to the 4(d-1)+1 decoded-frame extent by repetition.

    The first latent stands for one decoded frame, every later latent for four.
    Linear in the input, so gradients pass straight through.
    """
    d = latent.data.shape[3]
    pieces = [ag.slice_axis(latent, 3, 0, 1)]
    for i in range(1, d):
        frame = ag.slice_axis(latent, 3, i, i + 1)
        pieces.extend([frame] * 4)
    return ag.concat(pieces, axis=3) if len(pieces) > 1 else pieces[0]


class Extractor3D:
    """Deterministic frozen feature extractor over decoded-frame volumes."""

    def __init__(self, in_channels: int, feature_channels: int, seed: int = 7):
        rng = np.random.default_rng(seed)
        scale1 = 1.0 / np.sqrt(in_channels * 9)
        scale2 = 1.0 / np.sqrt(feature_channels * 9)
        self.w1 = ag.constant(rng.standard_normal((feature_channels, in_channels, 3, 3)) * scale1)
        self.b1 = ag.constant(rng.standard_normal(feature_channels) * 0.1)
        self.w2 = ag.constant(rng.standard_normal((feature_channels, feature_channels, 3, 3)) * scale2)
        self.b2 = ag.constant(rng.standard_normal(feature_channels) * 0.1)
        self.in_channels = in_channels
        self.feature_channels = feature_channels
        self.seed = seed

    def extract(self, latent) -> Feature3D:
        """Map a latent volume [c, h, w, d] to features [c', h, w, 4(d-1)+1]."""
        x = latent.data if hasattr(latent, "data") and isinstance(latent.data, Tensor) else latent
        if x.data.shape[0] != self.in_channels:
            raise ShapeError(f"extractor expects {self.in_channels} channels, got {x.data.shape}")
        up = upsample_temporal(x)
        h = ag.silu(ag.conv2d(up, self.w1, self.b1))
        return Feature3D(ag.conv2d(h, self.w2, self.b2))


class FusionNet:
    """Project features to text width, pool to token count, inject via zero conv."""

    def __init__(self, feature_channels: int, text_dim: int, n_tokens: int,
                 temporal_extent: int, rng: np.random.Generator):
        self.feature_channels = feature_channels
        self.text_dim = text_dim
        self.n_tokens = n_tokens
        self.temporal_extent = temporal_extent
        proj_scale = 1.0 / np.sqrt(feature_channels)
        self.params: dict[str, Tensor] = {
            "proj_w": ag.param(rng.standard_normal((text_dim, feature_channels, 1, 1)) * proj_scale),
            "proj_b": ag.param(np.zeros(text_dim)),
            "temporal_w": ag.param(rng.standard_normal((temporal_extent, n_tokens)) / np.sqrt(temporal_extent)),
            "zero_w": ag.param(np.zeros((text_dim, text_dim, 1, 1))),
            "zero_b": ag.param(np.zeros(text_dim)),
        }

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    def fuse(self, e_text: TextEmbedding, f3d: Feature3D) -> FusedEmbedding:
        """e_text + zero_conv(pool(proj(f3d))); exact identity while the zero conv is zero."""
        if f3d.temporal_extent != self.temporal_extent:
            raise ShapeError(
                f"feature temporal extent {f3d.temporal_extent} vs configured {self.temporal_extent}")
        if e_text.tokens.data.shape != (self.n_tokens, self.text_dim):
            raise ShapeError(
                f"text embedding {e_text.tokens.data.shape} vs configured ({self.n_tokens}, {self.text_dim})")
        p = self.params
        projected = ag.conv2d(f3d.data, p["proj_w"], p["proj_b"])  # [text_dim, h, w, d']
        pooled = ag.tmean(projected, axis=(1, 2))                  # [text_dim, d']
        tokens = ag.matmul(pooled, p["temporal_w"])                # [text_dim, n_tokens]
        grid = ag.reshape(tokens, (self.text_dim, self.n_tokens, 1))
        injected = ag.conv2d(grid, p["zero_w"], p["zero_b"])
        injected = ag.transpose(ag.reshape(injected, (self.text_dim, self.n_tokens)), (1, 0))
        return FusedEmbedding(ag.add(e_text.tokens, injected), provenance="fused")

    def fuse_optional(self, e_text: TextEmbedding, f3d: Feature3D | None) -> FusedEmbedding:
        if f3d is None:
            return FusedEmbedding(e_text.tokens, provenance="text_only")
        return self.fuse(e_text, f3d)

    # -- persistence ---------------------------------------------------------

    def save(self, path):
        serialize.save_params(path, serialize.MAGIC_FUSION,
                              {k: v.data for k, v in self.params.items()})

    def load_state(self, arrays: dict[str, np.ndarray]):
        for name, tensor in self.params.items():
            if name not in arrays or arrays[name].shape != tensor.data.shape:
                raise ShapeError(f"fusion parameter {name} missing or mis-shaped in state file")
            tensor.data = np.ascontiguousarray(arrays[name])

    def load(self, path):
        self.load_state(serialize.load_params(path, serialize.MAGIC_FUSION))
