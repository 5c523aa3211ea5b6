"""Chunked few-step denoiser over latent frames with a sink-window KV cache.

Each generation unit is a chunk of 3 latent frames. A chunk is denoised in a
small fixed number of steps; every step patchifies the noisy chunk into
tokens, runs block-causal attention over the cache plus the chunk itself, and
predicts the clean chunk as a residual correction of the noisy input (so a
zero-initialized output projection passes the noisy input through untouched).
After the final step one extra zero-noise pass computes the clean chunk's K/V,
which is what the cache keeps: cached context always represents clean latents.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import serialize
from .attention import AttentionConfig, KVCache, RotaryEmbedding, attend
from .autograd import Tensor
from .errors import ConfigError, ShapeError
from .losses import DiffusionSchedule

CHUNK_LATENTS = 3


@dataclass
class VideoLatent:
    """Latent video volume [channels, height, width, latent_frames]."""

    data: Tensor

    def __post_init__(self):
        if self.data.data.ndim != 4 or self.data.data.shape[3] < 1:
            raise ShapeError(f"video latent must be [c, h, w, d >= 1], got {self.data.data.shape}")

    @property
    def latent_frames(self) -> int:
        return self.data.data.shape[3]


@dataclass
class LatentChunk:
    """Exactly CHUNK_LATENTS consecutive latent frames: the generation unit."""

    data: Tensor

    def __post_init__(self):
        if self.data.data.ndim != 4 or self.data.data.shape[3] != CHUNK_LATENTS:
            raise ShapeError(f"chunk must have {CHUNK_LATENTS} latent frames, got {self.data.data.shape}")


@dataclass
class GeneratorConfig:
    channels: int = 4
    height: int = 8
    width: int = 8
    patch: int = 4
    model_dim: int = 32
    n_heads: int = 4
    n_layers: int = 2
    denoise_steps: int = 4
    text_dim: int = 16
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.height % self.patch or self.width % self.patch:
            raise ConfigError(f"spatial dims {self.height}x{self.width} not divisible by patch {self.patch}")
        if self.model_dim % self.n_heads:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by n_heads {self.n_heads}")

    @property
    def frame_tokens(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)

    @property
    def chunk_tokens(self) -> int:
        return self.frame_tokens * CHUNK_LATENTS

    @property
    def token_dim(self) -> int:
        return self.channels * self.patch * self.patch

    def attention_config(self, window_tokens: int) -> AttentionConfig:
        return AttentionConfig(n_heads=self.n_heads, model_dim=self.model_dim,
                               window_tokens=window_tokens, sink_tokens=self.frame_tokens,
                               rope_base=self.rope_base)

    def make_cache(self, window_tokens: int, capacity_tokens: int | None = None) -> KVCache:
        return KVCache(self.n_layers, self.model_dim, self.frame_tokens,
                       window_tokens, self.frame_tokens, capacity_tokens=capacity_tokens)


class GeneratorNet:
    """Token embedder + transformer layers + zero-initialized output projection."""

    def __init__(self, cfg: GeneratorConfig, rng: np.random.Generator, zero_out_proj: bool = True):
        self.cfg = cfg
        self.rope = RotaryEmbedding(cfg.model_dim // cfg.n_heads, cfg.rope_base)
        self.attn_cfg = cfg.attention_config(window_tokens=cfg.frame_tokens)
        d, td = cfg.model_dim, cfg.token_dim
        k = cfg.denoise_steps

        def init(*shape, fan_in=None):
            fan = fan_in if fan_in is not None else shape[0]
            return ag.param(rng.standard_normal(shape) / np.sqrt(fan))

        p: dict[str, Tensor] = {
            "embed_w": init(td, d),
            "embed_b": ag.param(np.zeros(d)),
            "t_embed": ag.param(rng.standard_normal((k + 1, d)) * 0.02),
            "cond_w": init(cfg.text_dim, d),
            "cond_b": ag.param(np.zeros(d)),
            "final_ln_g": ag.param(np.ones(d)),
            "final_ln_b": ag.param(np.zeros(d)),
            "out_w": ag.param(np.zeros((d, td))) if zero_out_proj else init(d, td),
            "out_b": ag.param(np.zeros(td)),
        }
        for i in range(cfg.n_layers):
            p[f"l{i}.ln1_g"] = ag.param(np.ones(d))
            p[f"l{i}.ln1_b"] = ag.param(np.zeros(d))
            p[f"l{i}.wq"] = init(d, d)
            p[f"l{i}.wk"] = init(d, d)
            p[f"l{i}.wv"] = init(d, d)
            p[f"l{i}.wo"] = init(d, d)
            p[f"l{i}.ln2_g"] = ag.param(np.ones(d))
            p[f"l{i}.ln2_b"] = ag.param(np.zeros(d))
            p[f"l{i}.mlp_w1"] = init(d, 4 * d)
            p[f"l{i}.mlp_b1"] = ag.param(np.zeros(4 * d))
            p[f"l{i}.mlp_w2"] = init(4 * d, d)
            p[f"l{i}.mlp_b2"] = ag.param(np.zeros(d))
        self.params = p

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    # -- token plumbing ------------------------------------------------------

    def patchify(self, x: Tensor) -> Tensor:
        """[c, h, w, d] chunk -> [d * hp * wp, c * p * p] tokens, frame-major."""
        c, h, w, p = self.cfg.channels, self.cfg.height, self.cfg.width, self.cfg.patch
        d = x.data.shape[3]
        hp, wp = h // p, w // p
        t = ag.reshape(x, (c, hp, p, wp, p, d))
        t = ag.transpose(t, (5, 1, 3, 0, 2, 4))  # [d, hp, wp, c, p, p]
        return ag.reshape(t, (d * hp * wp, c * p * p))

    def unpatchify(self, tokens: Tensor, d: int) -> Tensor:
        c, h, w, p = self.cfg.channels, self.cfg.height, self.cfg.width, self.cfg.patch
        hp, wp = h // p, w // p
        t = ag.reshape(tokens, (d, hp, wp, c, p, p))
        t = ag.transpose(t, (3, 1, 4, 2, 5, 0))  # [c, hp, p, wp, p, d]
        return ag.reshape(t, (c, h, w, d))

    # -- forward -------------------------------------------------------------

    def _forward_tokens(self, x: Tensor, t_idx: int, cache: KVCache, cond, append: bool) -> Tensor:
        p = self.params
        cfg = self.cfg
        tok = ag.add(ag.matmul(self.patchify(x), p["embed_w"]), p["embed_b"])
        tok = ag.add(tok, ag.slice_axis(p["t_embed"], 0, t_idx, t_idx + 1))
        if cond is not None:
            pooled = ag.tmean(cond.tokens, axis=0, keepdims=True)  # [1, text_dim]
            tok = ag.add(tok, ag.add(ag.matmul(pooled, p["cond_w"]), p["cond_b"]))
        n_frames = x.data.shape[3]
        for i in range(cfg.n_layers):
            h1 = ag.layer_norm(tok, p[f"l{i}.ln1_g"], p[f"l{i}.ln1_b"])
            q = ag.matmul(h1, p[f"l{i}.wq"])
            k = ag.matmul(h1, p[f"l{i}.wk"])
            v = ag.matmul(h1, p[f"l{i}.wv"])
            att = attend(cache, i, q, k, v, self.attn_cfg, self.rope)
            if append:
                ft = cfg.frame_tokens
                for f in range(n_frames):
                    kf = ag.slice_axis(k, 0, f * ft, (f + 1) * ft)
                    vf = ag.slice_axis(v, 0, f * ft, (f + 1) * ft)
                    cache.append(i, kf, vf, is_sink=not cache.sink_sealed(i))
            tok = ag.add(tok, ag.matmul(att, p[f"l{i}.wo"]))
            h2 = ag.layer_norm(tok, p[f"l{i}.ln2_g"], p[f"l{i}.ln2_b"])
            mlp = ag.matmul(ag.silu(ag.add(ag.matmul(h2, p[f"l{i}.mlp_w1"]), p[f"l{i}.mlp_b1"])),
                            p[f"l{i}.mlp_w2"])
            tok = ag.add(tok, ag.add(mlp, p[f"l{i}.mlp_b2"]))
        return ag.layer_norm(tok, p["final_ln_g"], p["final_ln_b"])

    def predict_clean(self, x_t: Tensor, t_idx: int, cache: KVCache, cond) -> Tensor:
        """Residual clean-chunk prediction from a noisy chunk at grid index t_idx."""
        tok = self._forward_tokens(x_t, t_idx, cache, cond, append=False)
        p = self.params
        correction = ag.add(ag.matmul(tok, p["out_w"]), p["out_b"])
        return ag.add(x_t, self.unpatchify(correction, x_t.data.shape[3]))

    def condition(self, cache: KVCache, chunk: Tensor, cond):
        """Append this clean chunk's K/V (zero-noise pass) to the cache."""
        self._forward_tokens(chunk, 0, cache, cond, append=True)


def denoise_chunk(net: GeneratorNet, noisy: LatentChunk, cache: KVCache, cond,
                  rng: np.random.Generator, steps: int | None = None,
                  detach_cache: bool = False) -> LatentChunk:
    """Run the few-step denoising loop for one chunk and append its clean K/V.

    ``noisy`` sits at the top of the noise grid (pure noise when the schedule
    endpoints are standard). Each step predicts the clean chunk, then re-noises
    it to the next grid point with fresh noise from ``rng``; the last
    prediction is returned and conditions the cache. With ``detach_cache`` the
    chunk enters the cache through a gradient wall: later chunks still see its
    values but backward passes never reach the chunk or anything upstream of
    it, which is how conditioning context is inserted under detached training.
    """
    k = steps if steps is not None else net.cfg.denoise_steps
    if k < 1:
        raise ConfigError(f"denoise steps must be >= 1, got {k}")
    if cache.kv_dim != net.cfg.model_dim or cache.frame_tokens != net.cfg.frame_tokens:
        raise ConfigError(
            f"cache dims (kv_dim {cache.kv_dim}, frame {cache.frame_tokens}) do not match net "
            f"(model_dim {net.cfg.model_dim}, frame {net.cfg.frame_tokens})")
    schedule = DiffusionSchedule(k + 1)
    x = noisy.data
    x0_hat = x
    for t_idx in range(k, 0, -1):
        x0_hat = net.predict_clean(x, t_idx, cache, cond)
        if t_idx > 1:
            fresh = ag.constant(rng.standard_normal(x0_hat.data.shape))
            x = schedule.forward_diffuse(x0_hat, t_idx - 1, fresh)
    net.condition(cache, ag.detach(x0_hat) if detach_cache else x0_hat, cond)
    return LatentChunk(x0_hat)


def chunk_noise(rng: np.random.Generator, cfg: GeneratorConfig) -> LatentChunk:
    shape = (cfg.channels, cfg.height, cfg.width, CHUNK_LATENTS)
    return LatentChunk(ag.constant(rng.standard_normal(shape)))


def rollout(net: GeneratorNet, cache: KVCache, n_chunks: int, cond,
            rng: np.random.Generator, mode: str = "inference",
            detach_cache: bool = False) -> list[LatentChunk]:
    """Generate n_chunks sequentially, each conditioned on the cache so far.

    ``train`` keeps generated chunks on the active tape (gradients flow between
    chunks through the cache) unless ``detach_cache`` marks them as pure
    conditioning context; ``inference`` runs without a tape, so everything is
    detached by construction. Values are identical either way.
    """
    if mode not in ("train", "inference"):
        raise ConfigError(f"rollout mode must be train or inference, got {mode}")
    if n_chunks == 0:
        return []

    def run():
        out = []
        for _ in range(n_chunks):
            noisy = chunk_noise(rng, net.cfg)
            out.append(denoise_chunk(net, noisy, cache, cond, rng, detach_cache=detach_cache))
        return out

    if mode == "inference":
        with ag.no_grad():
            return run()
    return run()


def chunks_to_latent(chunks: list[LatentChunk]) -> VideoLatent:
    if not chunks:
        raise ShapeError("cannot assemble a latent from zero chunks")
    return VideoLatent(ag.concat([c.data for c in chunks], axis=3))


def save_generator(net: GeneratorNet, path):
    serialize.save_params(path, serialize.MAGIC_NET, {k: v.data for k, v in net.params.items()})


def load_generator(net: GeneratorNet, path):
    arrays = serialize.load_params(path, serialize.MAGIC_NET)
    for name, tensor in net.params.items():
        if name not in arrays or arrays[name].shape != tensor.data.shape:
            raise ShapeError(f"generator parameter {name} missing or mis-shaped in state file")
        tensor.data = np.ascontiguousarray(arrays[name])
