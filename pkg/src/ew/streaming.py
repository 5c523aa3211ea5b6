"""Infinite-horizon generation: alternating context schedule, bounded cache, resumable state.

Two conditioning phases alternate strictly, starting long:

- long context: 18 latents of context (1 sink + 17 recent), generate 3 latents;
- short context: 3 latents of context (sink + 2 recent), generate 18 latents.

Phase entry eagerly re-trims the live window to the phase budget; the cache's
allocated storage is sized once to the larger budget, so the rollout's memory
footprint is constant for its whole life. Everything needed to resume -- cache
contents, counters, phase progress, RNG state, the fused embedding in force --
round-trips through a single snapshot file bit-exactly.
"""

from __future__ import annotations

import json
import queue
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import serialize
from .errors import ConfigError, StateError
from .fusion import Extractor3D, FusionNet, TextEmbedding
from .generator import CHUNK_LATENTS, GeneratorConfig, GeneratorNet, chunk_noise, denoise_chunk


def frames_for_latents(d: int) -> int:
    """Decoded frame count for d latent frames: 4(d-1)+1."""
    if d < 1:
        raise ConfigError(f"latent count must be >= 1, got {d}")
    return 4 * (d - 1) + 1


@dataclass(frozen=True)
class SchedulePhase:
    mode: str  # "long" | "short"
    context_latents: int
    generate_latents: int

    @property
    def chunks(self) -> int:
        return self.generate_latents // CHUNK_LATENTS


@dataclass(frozen=True)
class ScheduleConfig:
    long_context_latents: int = 18
    long_generate_latents: int = 3
    short_context_latents: int = 3
    short_generate_latents: int = 18

    def __post_init__(self):
        for n in (self.long_generate_latents, self.short_generate_latents):
            if n % CHUNK_LATENTS:
                raise ConfigError(f"generate budget {n} not a multiple of chunk size {CHUNK_LATENTS}")

    def phase_for_index(self, index: int) -> SchedulePhase:
        if index % 2 == 0:
            return SchedulePhase("long", self.long_context_latents, self.long_generate_latents)
        return SchedulePhase("short", self.short_context_latents, self.short_generate_latents)

    def window_tokens(self, phase: SchedulePhase, frame_tokens: int) -> int:
        # context counts include the sink latent; the window holds the rest
        return (phase.context_latents - 1) * frame_tokens

    def max_window_tokens(self, frame_tokens: int) -> int:
        longest = max(self.long_context_latents, self.short_context_latents) - 1
        return longest * frame_tokens


def phase_budgets(cfg: ScheduleConfig | None = None) -> list[tuple[int, int]]:
    cfg = cfg or ScheduleConfig()
    return [(cfg.long_context_latents, cfg.long_generate_latents),
            (cfg.short_context_latents, cfg.short_generate_latents)]


class RolloutState:
    """Everything needed to resume a stream: cache, counters, phase, RNG, embedding."""

    def __init__(self, net_cfg: GeneratorConfig, schedule: ScheduleConfig, seed: int):
        self.schedule = schedule
        self.net_cfg = net_cfg
        w_max = schedule.max_window_tokens(net_cfg.frame_tokens)
        w_long = schedule.window_tokens(schedule.phase_for_index(0), net_cfg.frame_tokens)
        self.cache = net_cfg.make_cache(window_tokens=w_long, capacity_tokens=w_max)
        self.rng = np.random.default_rng(seed)
        self.chunk_index = 0
        self.latents_generated = 0
        self.latents_emitted = 0
        self.phase_index = 0  # number of next_phase calls so far
        self.chunks_done_in_phase = 0
        self.fused_tokens: np.ndarray | None = None
        self.fused_provenance = "text_only"
        self.ref_feature: np.ndarray | None = None
        self.last_chunk: np.ndarray | None = None

    @property
    def current_phase(self) -> SchedulePhase | None:
        if self.phase_index == 0:
            return None
        return self.schedule.phase_for_index(self.phase_index - 1)

    # -- snapshot ------------------------------------------------------------

    def save(self, path):
        meta = {
            "chunk_index": self.chunk_index,
            "latents_generated": self.latents_generated,
            "latents_emitted": self.latents_emitted,
            "phase_index": self.phase_index,
            "chunks_done_in_phase": self.chunks_done_in_phase,
            "fused_provenance": self.fused_provenance,
            "rng_state": self.rng.bit_generator.state,
        }
        arrays = {}
        if self.fused_tokens is not None:
            arrays["fused_tokens"] = self.fused_tokens
        if self.ref_feature is not None:
            arrays["ref_feature"] = self.ref_feature
        if self.last_chunk is not None:
            arrays["last_chunk"] = self.last_chunk
        blob = b"".join([
            struct.pack("<4sI", serialize.MAGIC_STATE, serialize.VERSION),
            serialize.pack_blob(b"CACH", self.cache.to_bytes()),
            serialize.pack_blob(b"META", json.dumps(meta, sort_keys=True).encode("utf-8")),
            serialize.pack_blob(b"ARRS", serialize.params_to_bytes(serialize.MAGIC_STATE, arrays)),
        ])
        with open(path, "wb") as fh:
            fh.write(blob)

    @classmethod
    def load(cls, path, net_cfg: GeneratorConfig, schedule: ScheduleConfig) -> "RolloutState":
        from .attention import KVCache
        with open(path, "rb") as fh:
            blob = fh.read()
        magic, version = struct.unpack_from("<4sI", blob)
        if magic != serialize.MAGIC_STATE or version != serialize.VERSION:
            raise StateError(f"bad rollout snapshot header ({magic!r}, v{version})")
        sections = serialize.unpack_blobs(blob, struct.calcsize("<4sI"))
        state = cls(net_cfg, schedule, seed=0)
        state.cache = KVCache.from_bytes(sections[b"CACH"])
        meta = json.loads(sections[b"META"].decode("utf-8"))
        state.chunk_index = meta["chunk_index"]
        state.latents_generated = meta["latents_generated"]
        state.latents_emitted = meta["latents_emitted"]
        state.phase_index = meta["phase_index"]
        state.chunks_done_in_phase = meta["chunks_done_in_phase"]
        state.fused_provenance = meta["fused_provenance"]
        rng_state = meta["rng_state"]
        state.rng = np.random.default_rng()
        state.rng.bit_generator.state = rng_state
        arrays = serialize.params_from_bytes(sections[b"ARRS"], serialize.MAGIC_STATE)
        state.fused_tokens = arrays.get("fused_tokens")
        state.ref_feature = arrays.get("ref_feature")
        state.last_chunk = arrays.get("last_chunk")
        return state


def next_phase(state: RolloutState) -> SchedulePhase:
    """Advance the strict long/short alternation and return the phase just entered."""
    phase = state.schedule.phase_for_index(state.phase_index)
    state.phase_index += 1
    state.chunks_done_in_phase = 0
    return phase


@dataclass
class StreamReport:
    rows: list[dict] = field(default_factory=list)
    latents_emitted: int = 0
    frames_emitted: int = 0
    chunks_generated: int = 0
    phases_entered: int = 0
    config_hash: str = ""
    collected: list | None = None  # emitted latents, only when no sink is given

    def to_json(self) -> str:
        return json.dumps({
            "config_hash": self.config_hash,
            "latents_emitted": self.latents_emitted,
            "frames_emitted": self.frames_emitted,
            "chunks_generated": self.chunks_generated,
            "phases_entered": self.phases_entered,
            "rows": self.rows,
        }, indent=2)


def stream(net: GeneratorNet, fusion: FusionNet, extractor: Extractor3D,
           e_text: TextEmbedding, state: RolloutState, n_latents_target: int | None,
           sink=None, stop_flag=None, snapshot_every: int | None = None,
           snapshot_fn=None) -> StreamReport:
    """Emit latents until the target is reached (or a stop flag fires).

    ``sink(chunk_index, latent)`` receives one [c, h, w, 1] array per emitted
    latent. ``n_latents_target=None`` streams until ``stop_flag()`` returns
    true, checked at chunk boundaries so the current chunk always completes.
    The fused embedding refreshes from the newest chunk's features at every
    long-phase entry; before anything is generated it is the bare text
    embedding.
    """
    if n_latents_target is not None and n_latents_target < 0:
        raise ConfigError(f"latent target must be >= 0, got {n_latents_target}")
    report = StreamReport()
    collected = [] if sink is None else None

    def emit(latent_col):
        report.latents_emitted += 1
        state.latents_emitted += 1
        if collected is not None:
            collected.append(latent_col)
        else:
            sink(state.chunk_index, latent_col)

    cfg = state.net_cfg
    while True:
        if n_latents_target is not None and report.latents_emitted >= n_latents_target:
            break
        if n_latents_target is None and stop_flag is not None and stop_flag():
            break
        phase = state.current_phase
        if phase is None or state.chunks_done_in_phase >= phase.chunks:
            phase = next_phase(state)
            report.phases_entered += 1
            state.cache.set_window_budget(state.schedule.window_tokens(phase, cfg.frame_tokens))
            if phase.mode == "long":
                _refresh_fused(state, fusion, extractor, e_text)
        fused = _fused_embedding(state, e_text)
        t0 = time.perf_counter()
        with ag.no_grad():
            noisy = chunk_noise(state.rng, cfg)
            chunk = denoise_chunk(net, noisy, state.cache, fused, state.rng)
            feats = extractor.extract(chunk.data).data.data
        wall = time.perf_counter() - t0
        if state.ref_feature is None:
            state.ref_feature = feats.copy()
        drift = _cosine_distance(feats, state.ref_feature)
        state.last_chunk = chunk.data.data.copy()
        state.latents_generated += CHUNK_LATENTS
        remaining = (None if n_latents_target is None
                     else n_latents_target - report.latents_emitted)
        for i in range(CHUNK_LATENTS):
            if remaining is not None and i >= remaining:
                break
            emit(chunk.data.data[:, :, :, i:i + 1].copy())
        report.rows.append({
            "chunk": state.chunk_index,
            "phase": phase.mode,
            "wall_time_s": wall,
            "live_tokens": state.cache.live_tokens(),
            "tokens_attended": state.cache.live_tokens() + cfg.chunk_tokens,
            "footprint_bytes": state.cache.footprint_bytes(),
            "feature_drift": drift,
        })
        report.chunks_generated += 1
        state.chunk_index += 1
        state.chunks_done_in_phase += 1
        if snapshot_every and snapshot_fn and state.chunk_index % snapshot_every == 0:
            snapshot_fn(state)
    report.frames_emitted = frames_for_latents(report.latents_emitted) if report.latents_emitted else 0
    report.collected = collected
    return report


def _refresh_fused(state: RolloutState, fusion: FusionNet, extractor: Extractor3D,
                   e_text: TextEmbedding):
    if state.last_chunk is None:
        fused = fusion.fuse_optional(e_text, None)
    else:
        with ag.no_grad():
            feats = extractor.extract(ag.constant(state.last_chunk))
            fused = fusion.fuse_optional(e_text, feats)
    state.fused_tokens = fused.tokens.data.copy()
    state.fused_provenance = fused.provenance


def _fused_embedding(state: RolloutState, e_text: TextEmbedding):
    from .fusion import FusedEmbedding
    if state.fused_tokens is None:
        return FusedEmbedding(e_text.tokens, "text_only")
    return FusedEmbedding(ag.constant(state.fused_tokens), state.fused_provenance)


def _cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return float(1.0 - (a.ravel() @ b.ravel()) / (na * nb))


def stream_to_queue(q: "queue.Queue", *args, **kwargs) -> StreamReport:
    """Producer half of the bounded-queue contract: q.put blocks when full.

    Each emitted latent is put as (chunk_index, latent); a final ``None``
    marks the end of the stream.
    """
    def sink(chunk_index, latent):
        q.put((chunk_index, latent))

    report = stream(*args, sink=sink, **kwargs)
    q.put(None)
    return report


# ---------------------------------------------------------------------------
# latent stream file format: one record per latent


def write_stream_record(fh, chunk_index: int, latent: np.ndarray):
    c, h, w, d = latent.shape
    fh.write(struct.pack("<QIIII", chunk_index, c, h, w, d))
    fh.write(np.ascontiguousarray(latent, dtype="<f8").tobytes())


def read_stream_file(path) -> list[tuple[int, np.ndarray]]:
    out = []
    head = struct.calcsize("<QIIII")
    with open(path, "rb") as fh:
        blob = fh.read()
    off = 0
    while off < len(blob):
        chunk_index, c, h, w, d = struct.unpack_from("<QIIII", blob, off)
        off += head
        n = c * h * w * d
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(c, h, w, d)
        off += n * 8
        out.append((chunk_index, arr.astype(np.float64)))
    return out
