"""Independent oracles and the named verification suites behind `ew verify`.

Oracles here deliberately avoid the code paths they check: gradients are
estimated by central finite differences, attention by a direct full-sequence
recomputation in plain numpy.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import Tensor


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}" + (f"  ({self.detail})" if self.detail else "")


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient estimate of a scalar function, elementwise."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = g.ravel()
    xf = x.ravel()
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + h
        fp = f(x)
        xf[i] = orig - h
        fm = f(x)
        xf[i] = orig
        flat[i] = (fp - fm) / (2.0 * h)
    return g


def gradcheck(build: Callable[[list[Tensor]], Tensor], arrays: list[np.ndarray],
              h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``build`` maps leaf tensors to a scalar loss tensor and must be pure (seed
    any randomness internally). Relative error is measured per input as
    ||g - g_fd||_inf / max(||g_fd||_inf, 1e-8).
    """
    leaves = [ag.param(np.asarray(a, dtype=np.float64).copy()) for a in arrays]
    with ag.record() as tape:
        loss = build(leaves)
    tape.backward(loss)
    # FD probes share their buffers with central_difference's in-place wiggles.
    probes = [ag.constant(leaf.data.copy()) for leaf in leaves]

    def f(_x):
        with ag.no_grad():
            return float(build(probes).data)

    worst = 0.0
    for i, leaf in enumerate(leaves):
        fd = central_difference(f, probes[i].data, h=h)
        got = leaf.grad if leaf.grad is not None else np.zeros_like(fd)
        err = np.abs(got - fd).max() / max(np.abs(fd).max(), 1e-8)
        worst = max(worst, float(err))
    return worst


def reference_causal_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                               positions: np.ndarray, n_heads: int,
                               rope_base: float) -> np.ndarray:
    """One-shot full causal multi-head attention with rotary positions.

    Direct numpy recomputation (no cache, no tape): token i attends to tokens
    j <= i. Shapes: q/k/v [tokens, model_dim], positions [tokens].
    """
    t, d = q.shape
    hd = d // n_heads
    freqs = rope_base ** (-np.arange(0, hd, 2, dtype=np.float64) / hd)
    ang = positions[:, None] * freqs[None, :]
    cos, sin = np.cos(ang), np.sin(ang)

    def rot(x):
        out = np.empty_like(x)
        out[:, 0::2] = x[:, 0::2] * cos - x[:, 1::2] * sin
        out[:, 1::2] = x[:, 0::2] * sin + x[:, 1::2] * cos
        return out

    out = np.zeros_like(q)
    mask = np.triu(np.full((t, t), -np.inf), k=1)
    for h in range(n_heads):
        sl = slice(h * hd, (h + 1) * hd)
        qh, kh, vh = rot(q[:, sl]), rot(k[:, sl]), v[:, sl]
        logits = qh @ kh.T / np.sqrt(hd) + mask
        w = np.exp(logits - logits.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        out[:, sl] = w @ vh
    return out


def gaussian_kl(mean_a: float, var_a: float, mean_b: float, var_b: float) -> float:
    """Closed-form KL(N(mean_a, var_a) || N(mean_b, var_b))."""
    return 0.5 * (np.log(var_b / var_a) + (var_a + (mean_a - mean_b) ** 2) / var_b - 1.0)


# ---------------------------------------------------------------------------
# named suites (imported lazily to keep this module cheap to load)


def suite_grads(rng: np.random.Generator | None = None) -> list[CheckResult]:
    rng = rng or np.random.default_rng(0)
    results = []

    def check(name, build, arrays, tol=1e-5, h=1e-5):
        err = gradcheck(build, arrays, h=h)
        results.append(CheckResult(f"grads/{name}", err < tol, f"rel err {err:.2e} < {tol:g}"))

    check("matmul", lambda p: ag.tsum(ag.matmul(p[0], p[1])),
          [rng.standard_normal((5, 4)), rng.standard_normal((4, 3))], tol=1e-6)
    w34 = ag.constant(rng.standard_normal((3, 4)))
    check("softmax", lambda p: ag.tsum(ag.mul(ag.softmax(p[0], axis=1), w34)),
          [rng.standard_normal((3, 4))], tol=1e-6)
    check("cosine", lambda p: ag.cosine_similarity(p[0], p[1]),
          [rng.standard_normal(16), rng.standard_normal(16)], tol=1e-6)
    check("add_mul", lambda p: ag.tsum(ag.mul(ag.add(p[0], p[1]), p[0])),
          [rng.standard_normal((3, 3)), rng.standard_normal((3, 3))])
    w46 = ag.constant(rng.standard_normal((4, 6)))
    check("layer_norm", lambda p: ag.tsum(ag.mul(ag.layer_norm(p[0], p[1], p[2]), w46)),
          [rng.standard_normal((4, 6)), rng.standard_normal(6), rng.standard_normal(6)])
    check("silu", lambda p: ag.tsum(ag.silu(p[0])), [rng.standard_normal((3, 5))])
    check("conv3x3", lambda p: ag.tsum(ag.conv2d(p[0], p[1], p[2])),
          [rng.standard_normal((2, 4, 4)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)])
    check("conv1x1", lambda p: ag.tsum(ag.conv2d(p[0], p[1], p[2])),
          [rng.standard_normal((2, 3, 3, 2)), rng.standard_normal((3, 2, 1, 1)), rng.standard_normal(3)])

    from .attention import RotaryEmbedding
    rope = RotaryEmbedding(head_dim=8)
    pos = np.arange(5)
    w58 = ag.constant(rng.standard_normal((5, 8)))
    check("rope_rotate", lambda p: ag.tsum(ag.mul(rope.rotate(p[0], pos), w58)),
          [rng.standard_normal((5, 8))], tol=1e-6)

    from .losses import DiffusionSchedule, loss_3d
    sched = DiffusionSchedule(8)
    ones22 = ag.constant(np.ones((2, 2)))
    w22 = ag.constant(rng.standard_normal((2, 2)))
    check("forward_diffuse", lambda p: ag.tsum(ag.mul(sched.forward_diffuse(p[0], 3, ones22), w22)),
          [rng.standard_normal((2, 2))], tol=1e-6)
    feats = rng.standard_normal((4, 2, 2, 3))
    check("loss_3d", lambda p: loss_3d(p[0], p[1]), [feats, rng.standard_normal((4, 2, 2, 3))])
    return results


def suite_cache(rng: np.random.Generator | None = None, configs: int = 25) -> list[CheckResult]:
    from .attention import chunked_equals_reference
    rng = rng or np.random.default_rng(1)
    worst = 0.0
    for _ in range(configs):
        worst = max(worst, chunked_equals_reference(rng))
    return [CheckResult("cache/chunked_vs_full", worst < 1e-9,
                        f"max abs diff {worst:.2e} over {configs} random configs")]


def suite_rope(rng: np.random.Generator | None = None) -> list[CheckResult]:
    from .attention import RotaryEmbedding
    rng = rng or np.random.default_rng(2)
    rope = RotaryEmbedding(head_dim=8)
    x = rng.standard_normal((3, 8))
    results = []
    with ag.no_grad():
        ident = np.abs(rope.rotate(ag.constant(x), np.zeros(3, dtype=int)).data - x).max()
        results.append(CheckResult("rope/position0_identity", ident == 0.0, f"max abs diff {ident:.1e}"))
        norms_in = np.linalg.norm(x, axis=1)
        norms_out = np.linalg.norm(rope.rotate(ag.constant(x), np.array([5, 90, 1234])).data, axis=1)
        nerr = np.abs(norms_in - norms_out).max()
        results.append(CheckResult("rope/norm_preserved", nerr < 1e-12, f"max norm drift {nerr:.1e}"))
        q, k = rng.standard_normal(8), rng.standard_normal(8)
        worst = 0.0
        for delta in (1, 7, 100):
            base = rope.rotate(ag.constant(q[None]), np.array([11])).data @ \
                rope.rotate(ag.constant(k[None]), np.array([4])).data.T
            moved = rope.rotate(ag.constant(q[None]), np.array([11 + delta])).data @ \
                rope.rotate(ag.constant(k[None]), np.array([4 + delta])).data.T
            worst = max(worst, float(np.abs(base - moved).max()))
        results.append(CheckResult("rope/relative_offset_invariance", worst < 1e-9, f"max drift {worst:.1e}"))
    return results


def suite_schedule() -> list[CheckResult]:
    from .streaming import frames_for_latents, phase_budgets
    results = []
    ok = [frames_for_latents(d) for d in (1, 3, 21)] == [1, 9, 81]
    results.append(CheckResult("schedule/frame_arithmetic", ok, "d' = 4(d-1)+1 on d in {1,3,21}"))
    budgets = phase_budgets()
    results.append(CheckResult("schedule/phase_budgets", budgets == [(18, 3), (3, 18)], str(budgets)))
    return results


def suite_dmd(rng: np.random.Generator | None = None) -> list[CheckResult]:
    from .losses import DiffusionSchedule, GaussianScore, ScorePair, dmd_generator_grad
    rng = rng or np.random.default_rng(3)
    sched = DiffusionSchedule(8)
    same = GaussianScore(0.4, 1.3)
    pair = ScorePair(real=same, fake=GaussianScore(0.4, 1.3))
    pair.fake.mark_fit()
    x = ag.constant(rng.standard_normal(64))
    with ag.no_grad():
        g = dmd_generator_grad(x, pair, sched, 4, ag.constant(rng.standard_normal(64)))
    zero = np.abs(g.data).max()
    results = [CheckResult("dmd/matched_scores_zero_grad", zero <= 1e-12, f"max |grad| {zero:.1e}")]

    from .losses import fit_dmd_gaussian
    outcome = fit_dmd_gaussian(target_mean=3.0, target_var=1.0, steps=300, batch=256,
                               lr=0.05, seed=11, schedule=sched)
    results.append(CheckResult("dmd/gaussian_convergence", outcome.final_kl < 0.01,
                               f"KL {outcome.final_kl:.4f} < 0.01, mean {outcome.mean:.3f}, var {outcome.var:.3f}"))
    return results


def suite_fusion(rng: np.random.Generator | None = None) -> list[CheckResult]:
    from .fusion import Extractor3D, FusionNet, TextEmbedding
    from .generator import VideoLatent
    rng = rng or np.random.default_rng(4)
    extractor = Extractor3D(in_channels=2, feature_channels=3, seed=7)
    net = FusionNet(feature_channels=3, text_dim=6, n_tokens=3, temporal_extent=9, rng=rng)
    latent = VideoLatent(ag.constant(rng.standard_normal((2, 4, 4, 3))))
    text = TextEmbedding(ag.constant(rng.standard_normal((3, 6))))
    with ag.no_grad():
        feats = extractor.extract(latent)
        feats2 = extractor.extract(latent)
        fused = net.fuse(text, feats)
    results = [
        CheckResult("fusion/extractor_deterministic", np.array_equal(feats.data.data, feats2.data.data)),
        CheckResult("fusion/zero_conv_identity", np.array_equal(fused.tokens.data, text.tokens.data),
                    "fused == text before any training"),
    ]
    return results


SUITES: dict[str, Callable[[], list[CheckResult]]] = {
    "grads": suite_grads,
    "cache": suite_cache,
    "rope": suite_rope,
    "schedule": suite_schedule,
    "dmd": suite_dmd,
    "fusion": suite_fusion,
}


def run_suite(name: str) -> list[CheckResult]:
    if name not in SUITES:
        raise KeyError(name)
    return SUITES[name]()
