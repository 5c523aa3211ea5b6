"""Rotary positions applied on cache read, sink persistence, eviction, equivalence.

The cache stores raw keys; positions are assigned over the live cache order at
attention time. So the rotary phase never grows without bound, and logits
between nearby tokens look the same no matter how much history was evicted.

Run: python demos/02_rotary_sink_cache.py
"""

import numpy as np

from ew import autograd as ag
from ew.attention import AttentionConfig, KVCache, RotaryEmbedding, attend, chunked_equals_reference


def main():
    rng = np.random.default_rng(0)
    rope = RotaryEmbedding(head_dim=8)

    print("== rotation facts ==")
    x = rng.standard_normal((1, 8))
    same = np.array_equal(rope.rotate(ag.constant(x), [0]).data, x)
    print(f"position 0 is the identity: {same}")
    q, k = rng.standard_normal((1, 8)), rng.standard_normal((1, 8))
    base = rope.rotate(ag.constant(q), [9]).data @ rope.rotate(ag.constant(k), [2]).data.T
    for delta in (1, 7, 100):
        moved = rope.rotate(ag.constant(q), [9 + delta]).data @ \
            rope.rotate(ag.constant(k), [2 + delta]).data.T
        print(f"q.k drift under global offset {delta:>3}: {abs((base - moved).item()):.2e}")

    print("\n== sink + rolling window ==")
    cfg = AttentionConfig(n_heads=2, model_dim=8, window_tokens=4, sink_tokens=2)
    cache = KVCache(n_layers=1, kv_dim=8, sink_tokens=2, window_tokens=4, frame_tokens=2)
    for f in range(8):
        kf = ag.constant(rng.standard_normal((2, 8)))
        vf = ag.constant(rng.standard_normal((2, 8)))
        cache.append(0, kf, vf, is_sink=(f == 0))
        print(f"after frame {f}: live tokens = {cache.live_tokens()} "
              f"(sink 2 + window <= 4), total appended = {cache.total_appended}")
    print("the first frame's tokens are still there, frames 1..4 were evicted")

    print("\n== chunked cached attention == one-shot full attention ==")
    worst = max(chunked_equals_reference(rng) for _ in range(30))
    print(f"max abs difference over 30 random configurations: {worst:.2e}")

    print("\n== a query over the live cache ==")
    q_blk = ag.constant(rng.standard_normal((2, 8)))
    k_blk = ag.constant(rng.standard_normal((2, 8)))
    v_blk = ag.constant(rng.standard_normal((2, 8)))
    out = attend(cache, 0, q_blk, k_blk, v_blk, cfg)
    print(f"attend output shape {out.data.shape}, attended {cache.live_tokens() + 2} tokens")


if __name__ == "__main__":
    main()
