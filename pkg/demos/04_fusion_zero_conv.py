"""Feature fusion through a zero convolution: exact identity until trained.

Run: python demos/04_fusion_zero_conv.py
"""

import numpy as np

from ew import autograd as ag
from ew.fusion import Extractor3D, FusionNet, TextEmbedding
from ew.generator import VideoLatent


def main():
    rng = np.random.default_rng(0)
    extractor = Extractor3D(in_channels=2, feature_channels=3, seed=7)
    fusion = FusionNet(feature_channels=3, text_dim=8, n_tokens=4, temporal_extent=9, rng=rng)
    text = TextEmbedding(ag.constant(rng.standard_normal((4, 8))))
    latent = VideoLatent(ag.constant(rng.standard_normal((2, 4, 4, 3))))

    print("== frozen deterministic extractor ==")
    with ag.no_grad():
        f1 = extractor.extract(latent)
        f2 = extractor.extract(latent)
    print(f"feature shape {f1.data.data.shape} (temporal extent 4(d-1)+1 = {f1.temporal_extent})")
    print("same latent twice -> identical features:", np.array_equal(f1.data.data, f2.data.data))

    print("\n== zero-conv identity before training ==")
    with ag.no_grad():
        fused = fusion.fuse(text, f1)
    print("fused tokens == text tokens exactly:",
          np.array_equal(fused.tokens.data, text.tokens.data))
    print("bypass path (no features):", fusion.fuse_optional(text, None).provenance)

    print("\n== one gradient step opens the pathway ==")
    with ag.record() as tape:
        out = fusion.fuse(text, extractor.extract(latent))
        loss = ag.tsum(ag.mul(out.tokens, out.tokens))
    tape.backward(loss)
    for p in fusion.params.values():
        if p.grad is not None:
            p.data = p.data - 0.05 * p.grad
    with ag.no_grad():
        after = fusion.fuse(text, extractor.extract(latent))
    delta = np.abs(after.tokens.data - text.tokens.data).max()
    print(f"max |fused - text| after one update: {delta:.4f} (no longer the identity)")


if __name__ == "__main__":
    main()
