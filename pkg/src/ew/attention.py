"""Causal multi-head attention over a sink+window KV cache, rotary positions on read.

The cache keeps two segments per layer: a persistent sink (the tokens of the
first latent frame, never evicted) and a rolling window of recent frames.
Keys are stored UN-rotated; rotary rotation happens at attention time with
positions assigned over the live cache order, so the first query token's
position always equals the live token count no matter how much history was
evicted. That keeps rotary phases bounded over unbounded generation and makes
attention logits depend only on relative live-cache offsets.

Window storage is preallocated at a fixed token capacity (ring buffer), so the
cache's allocated footprint is constant for the life of a rollout even as the
live window budget changes; eviction frees nothing, it just recycles slots.
Frames evict as whole token groups, never partially.
"""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import NEG_INF, Tensor
from .errors import ConfigError, ShapeError, StateError

EWKV_MAGIC = b"EWKV"
EWKV_VERSION = 1


@dataclass
class AttentionConfig:
    """Head layout and cache budgets for one attention stack."""

    n_heads: int
    model_dim: int
    window_tokens: int
    sink_tokens: int
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.model_dim % self.n_heads != 0:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by n_heads {self.n_heads}")
        if self.head_dim % 2 != 0:
            raise ConfigError(f"head_dim {self.head_dim} must be even for rotary pairs")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.n_heads


class RotaryEmbedding:
    """Per-channel-pair rotation by position-scaled frequencies.

    Pair j rotates by angle p * base^(-2j/head_dim) at position p. Rotation is
    orthonormal, so norms are preserved and q.k dot products depend only on
    relative position.
    """

    def __init__(self, head_dim: int, base: float = 10000.0):
        if head_dim % 2 != 0:
            raise ConfigError(f"rotary head_dim must be even, got {head_dim}")
        self.head_dim = head_dim
        self.base = base
        self._freqs = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)

    def angles(self, positions) -> tuple[np.ndarray, np.ndarray]:
        pos = np.asarray(positions, dtype=np.float64)
        ang = pos[:, None] * self._freqs[None, :]
        return np.cos(ang), np.sin(ang)

    def rotate(self, x: Tensor, positions) -> Tensor:
        """Rotate x[tokens, head_dim] by each token's position."""
        if len(positions) != x.data.shape[0]:
            raise ShapeError(f"positions length {len(positions)} vs {x.data.shape[0]} tokens")
        cos, sin = self.angles(positions)
        return ag.rotate_pairs(x, cos, sin)


class _Frame:
    """One cached frame group: raw rows in the ring plus optional grad handles."""

    __slots__ = ("slot", "k", "v")

    def __init__(self, slot: int, k: Tensor | None, v: Tensor | None):
        self.slot = slot
        self.k = k
        self.v = v


class _LayerStore:
    def __init__(self, sink_tokens: int, capacity_tokens: int, kv_dim: int):
        self.sink_k = np.zeros((sink_tokens, kv_dim))
        self.sink_v = np.zeros((sink_tokens, kv_dim))
        self.win_k = np.zeros((capacity_tokens, kv_dim))
        self.win_v = np.zeros((capacity_tokens, kv_dim))
        self.sink_filled = 0
        self.sink_handles: list[tuple[Tensor, Tensor]] = []
        self.frames: deque[_Frame] = deque()
        self.total_appended = 0
        self.next_slot = 0


class KVCache:
    """Per-layer sink + rolling-window K/V store with frame-aligned eviction.

    Appends are in whole frame groups of ``frame_tokens`` tokens. The sink
    segment seals once it holds ``sink_tokens`` tokens; sink appends after the
    seal are a state error. Window appends beyond the live budget evict the
    oldest frames. When the active tape requires gradients, per-frame tensor
    handles are kept so attention stays differentiable through cached content.
    """

    def __init__(self, n_layers: int, kv_dim: int, sink_tokens: int,
                 window_tokens: int, frame_tokens: int, capacity_tokens: int | None = None):
        if sink_tokens % frame_tokens != 0 or window_tokens % frame_tokens != 0:
            raise ConfigError(
                f"sink {sink_tokens} and window {window_tokens} must be multiples of frame_tokens {frame_tokens}")
        self.n_layers = n_layers
        self.kv_dim = kv_dim
        self.sink_tokens = sink_tokens
        self.frame_tokens = frame_tokens
        self.window_budget = window_tokens
        self.capacity_tokens = capacity_tokens if capacity_tokens is not None else window_tokens
        if self.capacity_tokens < window_tokens:
            raise ConfigError(f"capacity {self.capacity_tokens} below window budget {window_tokens}")
        if self.capacity_tokens % frame_tokens != 0:
            raise ConfigError("capacity must be frame-aligned")
        self._capacity_frames = self.capacity_tokens // frame_tokens
        self.layers = [_LayerStore(sink_tokens, self.capacity_tokens, kv_dim) for _ in range(n_layers)]

    # -- write side ---------------------------------------------------------

    def append(self, layer: int, k: Tensor, v: Tensor, is_sink: bool = False):
        """Append one frame group of K/V tokens to a layer."""
        store = self.layers[layer]
        if k.data.shape != v.data.shape or k.data.ndim != 2 or k.data.shape[1] != self.kv_dim:
            raise ShapeError(f"cache append shapes {k.data.shape}/{v.data.shape} vs kv_dim {self.kv_dim}")
        n = k.data.shape[0]
        keep_handle = k.requires_grad or v.requires_grad or ag.active_tape() is not None
        if is_sink:
            if self.sink_sealed(layer):
                raise StateError("sink append after the sink segment was sealed")
            if store.sink_filled + n > self.sink_tokens:
                raise ShapeError(f"sink append of {n} tokens overflows sink size {self.sink_tokens}")
            store.sink_k[store.sink_filled:store.sink_filled + n] = k.data
            store.sink_v[store.sink_filled:store.sink_filled + n] = v.data
            store.sink_filled += n
            if keep_handle:
                store.sink_handles.append((k, v))
        else:
            if n != self.frame_tokens:
                raise ShapeError(f"window append must be one frame group of {self.frame_tokens} tokens, got {n}")
            slot = store.next_slot
            store.next_slot = (store.next_slot + 1) % self._capacity_frames
            rows = slice(slot * self.frame_tokens, (slot + 1) * self.frame_tokens)
            store.win_k[rows] = k.data
            store.win_v[rows] = v.data
            store.frames.append(_Frame(slot, k if keep_handle else None, v if keep_handle else None))
            self._evict_layer(store)
        store.total_appended += n

    def _evict_layer(self, store: _LayerStore):
        max_frames = self.window_budget // self.frame_tokens
        while len(store.frames) > max_frames:
            store.frames.popleft()

    def set_window_budget(self, window_tokens: int):
        """Eagerly re-trim the live window to a new budget (frame-aligned)."""
        if window_tokens % self.frame_tokens != 0:
            raise ConfigError(f"window budget {window_tokens} not frame-aligned")
        if window_tokens > self.capacity_tokens:
            raise ConfigError(f"window budget {window_tokens} exceeds capacity {self.capacity_tokens}")
        self.window_budget = window_tokens
        for store in self.layers:
            self._evict_layer(store)

    # -- read side ----------------------------------------------------------

    def sink_sealed(self, layer: int = 0) -> bool:
        return self.layers[layer].sink_filled == self.sink_tokens

    def live_tokens(self, layer: int = 0) -> int:
        store = self.layers[layer]
        return store.sink_filled + len(store.frames) * self.frame_tokens

    @property
    def total_appended(self) -> int:
        return self.layers[0].total_appended

    def live_kv(self, layer: int) -> tuple[Tensor, Tensor]:
        """Live K and V as [n_live, kv_dim] tensors in cache order (sink first).

        Uses graph-linked tensor handles when present (training) so gradients
        reach cached content built from non-detached tensors; otherwise reads
        raw ring rows as constants.
        """
        store = self.layers[layer]
        has_handles = bool(store.sink_handles) or any(f.k is not None for f in store.frames)
        if has_handles:
            ks: list[Tensor] = []
            vs: list[Tensor] = []
            if store.sink_filled:
                if store.sink_handles:
                    ks.extend(k for k, _ in store.sink_handles)
                    vs.extend(v for _, v in store.sink_handles)
                else:
                    ks.append(ag.constant(store.sink_k[:store.sink_filled]))
                    vs.append(ag.constant(store.sink_v[:store.sink_filled]))
            for f in store.frames:
                rows = slice(f.slot * self.frame_tokens, (f.slot + 1) * self.frame_tokens)
                ks.append(f.k if f.k is not None else ag.constant(store.win_k[rows]))
                vs.append(f.v if f.v is not None else ag.constant(store.win_v[rows]))
            if not ks:
                empty = ag.constant(np.zeros((0, self.kv_dim)))
                return empty, empty
            return ag.concat(ks, axis=0), ag.concat(vs, axis=0)
        idx = np.concatenate([f.slot * self.frame_tokens + np.arange(self.frame_tokens)
                              for f in store.frames]) if store.frames else np.array([], dtype=int)
        k = np.concatenate([store.sink_k[:store.sink_filled], store.win_k[idx]], axis=0)
        v = np.concatenate([store.sink_v[:store.sink_filled], store.win_v[idx]], axis=0)
        return ag.constant(k), ag.constant(v)

    def footprint_bytes(self) -> int:
        """Allocated storage held by the cache (constant for a rollout's life)."""
        total = 0
        for store in self.layers:
            total += store.sink_k.nbytes + store.sink_v.nbytes
            total += store.win_k.nbytes + store.win_v.nbytes
        return total

    def live_bytes(self) -> int:
        """Bytes of live tokens only; constant once a fixed window has filled."""
        row = self.kv_dim * 8 * 2
        return sum((s.sink_filled + len(s.frames) * self.frame_tokens) * row for s in self.layers)

    # -- snapshot -----------------------------------------------------------

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    def to_bytes(self) -> bytes:
        store0 = self.layers[0]
        head = struct.pack(
            "<4sIIIIIIIIQ", EWKV_MAGIC, EWKV_VERSION,
            self.sink_tokens, self.window_budget, self.capacity_tokens,
            self.n_layers, self.kv_dim, self.frame_tokens,
            store0.sink_filled, store0.total_appended)
        parts = [head, struct.pack("<II", len(store0.frames), store0.next_slot)]
        for store in self.layers:
            parts.append(store.sink_k[:store.sink_filled].astype("<f8").tobytes())
            parts.append(store.sink_v[:store.sink_filled].astype("<f8").tobytes())
            for f in store.frames:
                rows = slice(f.slot * self.frame_tokens, (f.slot + 1) * self.frame_tokens)
                parts.append(store.win_k[rows].astype("<f8").tobytes())
                parts.append(store.win_v[rows].astype("<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def load(cls, path) -> "KVCache":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    @classmethod
    def from_bytes(cls, blob: bytes) -> "KVCache":
        head_size = struct.calcsize("<4sIIIIIIIIQ")
        magic, version, sink, window, capacity, n_layers, kv_dim, frame_tokens, sink_filled, total = \
            struct.unpack_from("<4sIIIIIIIIQ", blob)
        if magic != EWKV_MAGIC:
            raise StateError(f"bad cache snapshot magic {magic!r}")
        if version != EWKV_VERSION:
            raise StateError(f"unsupported cache snapshot version {version}")
        n_frames, next_slot = struct.unpack_from("<II", blob, head_size)
        cache = cls(n_layers, kv_dim, sink, window, frame_tokens, capacity_tokens=capacity)
        off = head_size + 8
        row = kv_dim * 8

        def take(n_rows):
            nonlocal off
            arr = np.frombuffer(blob, dtype="<f8", count=n_rows * kv_dim, offset=off).reshape(n_rows, kv_dim)
            off += n_rows * row
            return arr.astype(np.float64)

        for store in cache.layers:
            store.sink_k[:sink_filled] = take(sink_filled)
            store.sink_v[:sink_filled] = take(sink_filled)
            store.sink_filled = sink_filled
            store.total_appended = total
            store.next_slot = next_slot
            for i in range(n_frames):
                slot = (next_slot - n_frames + i) % cache._capacity_frames
                rows = slice(slot * frame_tokens, (slot + 1) * frame_tokens)
                store.win_k[rows] = take(frame_tokens)
                store.win_v[rows] = take(frame_tokens)
                store.frames.append(_Frame(slot, None, None))
        return cache


def attend(cache: KVCache, layer: int, q: Tensor, k: Tensor, v: Tensor,
           cfg: AttentionConfig, rope: RotaryEmbedding | None = None) -> Tensor:
    """Attend the current block's queries over [sink | live window | block].

    q/k/v are the block's projections, [tokens, model_dim]. Cached keys and
    the block's keys are rotated at read time with positions numbered over the
    live cache order; queries continue that numbering. Queries see every live
    cached token plus block tokens at or before their own index.
    """
    rope = rope or RotaryEmbedding(cfg.head_dim, cfg.rope_base)
    n_q = q.data.shape[0]
    live_k, live_v = cache.live_kv(layer)
    n_live = live_k.data.shape[0]
    if n_q == 0 and n_live == 0:
        raise StateError("attend called with an empty query block over an empty cache")
    k_all = ag.concat([live_k, k], axis=0) if n_live else k
    v_all = ag.concat([live_v, v], axis=0) if n_live else v
    key_pos = np.arange(n_live + n_q)
    q_pos = np.arange(n_live, n_live + n_q)
    cos_k, sin_k = rope.angles(key_pos)
    cos_q, sin_q = rope.angles(q_pos)

    mask = np.zeros((n_q, n_live + n_q))
    block = np.triu(np.full((n_q, n_q), NEG_INF), k=1)
    mask[:, n_live:] = block
    mask_t = ag.constant(mask)

    hd, n_heads = cfg.head_dim, cfg.n_heads
    scale = 1.0 / np.sqrt(hd)

    def split_heads(x, tokens):
        return ag.transpose(ag.reshape(x, (tokens, n_heads, hd)), (1, 0, 2))

    qh = ag.rotate_pairs(split_heads(q, n_q), cos_q, sin_q)  # angles broadcast over heads
    kh = ag.rotate_pairs(split_heads(k_all, n_live + n_q), cos_k, sin_k)
    vh = split_heads(v_all, n_live + n_q)
    logits = ag.add(ag.mul(ag.batched_matmul(qh, ag.transpose(kh, (0, 2, 1))), scale), mask_t)
    weights = ag.softmax(logits, axis=2)
    out = ag.batched_matmul(weights, vh)  # [heads, n_q, hd]
    return ag.reshape(ag.transpose(out, (1, 0, 2)), (n_q, cfg.model_dim))


def chunked_equals_reference(rng: np.random.Generator) -> float:
    """Max abs diff between chunk-cached attention and one-shot full causal attention.

    Draws a random configuration whose sequence fits inside sink+window, runs
    the cache path frame by frame, and compares against the independent
    full-recompute oracle.
    """
    from .verify import reference_causal_attention

    n_heads = int(rng.integers(1, 5))
    head_dim = 2 * int(rng.integers(1, 5))
    model_dim = n_heads * head_dim
    frame_tokens = int(rng.integers(1, 4))
    n_frames = int(rng.integers(2, 7))
    total = frame_tokens * n_frames
    cfg = AttentionConfig(n_heads=n_heads, model_dim=model_dim,
                          window_tokens=frame_tokens * (n_frames - 1),
                          sink_tokens=frame_tokens)
    cache = KVCache(1, model_dim, cfg.sink_tokens, cfg.window_tokens, frame_tokens)
    rope = RotaryEmbedding(head_dim, cfg.rope_base)
    qs = rng.standard_normal((total, model_dim))
    ks = rng.standard_normal((total, model_dim))
    vs = rng.standard_normal((total, model_dim))

    outs = []
    with ag.no_grad():
        for f in range(n_frames):
            rows = slice(f * frame_tokens, (f + 1) * frame_tokens)
            q, k, v = (ag.constant(a[rows]) for a in (qs, ks, vs))
            outs.append(attend(cache, 0, q, k, v, cfg, rope).data)
            cache.append(0, k, v, is_sink=(f == 0))
    chunked = np.concatenate(outs, axis=0)
    reference = reference_causal_attention(qs, ks, vs, np.arange(total), n_heads, cfg.rope_base)
    return float(np.abs(chunked - reference).max())
