"""Training objectives: distribution-matching generation loss, feature-cosine loss, totals.

The generation loss follows the reverse-KL score-difference recipe: noise the
generator output with the forward diffusion process, evaluate the difference
between the fake (generator-side) and real (supervision-side) scores at the
noised point, and push that difference back through the (linear) noising map.
At desk scale both score models are diagonal Gaussians, which makes the
gradient exact and the 1-D convergence checkable in closed form.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ScheduleError, StalenessError


class DiffusionSchedule:
    """Linear variance-preserving forward-noising grid.

    sigma_t rises linearly from 0 to 1 over ``n_steps`` grid points and
    alpha_t = sqrt(1 - sigma_t^2), so alpha^2 + sigma^2 = 1 everywhere,
    alpha[0] = 1 (identity) and alpha[-1] = 0 (pure noise).
    """

    def __init__(self, n_steps: int):
        if n_steps < 2:
            raise ConfigError(f"schedule needs at least 2 grid points, got {n_steps}")
        self.t = np.linspace(0.0, 1.0, n_steps)
        self.sigma = self.t.copy()
        self.alpha = np.sqrt(1.0 - self.sigma**2)

    def __len__(self):
        return len(self.t)

    def _check(self, t: int) -> int:
        if not 0 <= t < len(self.t):
            raise ScheduleError(f"diffusion step {t} outside schedule of {len(self.t)} points")
        return int(t)

    def forward_diffuse(self, x0: Tensor, t: int, noise: Tensor) -> Tensor:
        """x_t = alpha_t * x0 + sigma_t * noise; exact identity at t = 0."""
        t = self._check(t)
        return ag.add(ag.mul(x0, float(self.alpha[t])), ag.mul(noise, float(self.sigma[t])))

    def interior_steps(self) -> np.ndarray:
        """Grid indices used for matching draws: both degenerate endpoints excluded."""
        return np.arange(1, len(self.t) - 1)


class GaussianScore:
    """Diagonal-Gaussian score model, usable as a frozen real score or a fitted fake score.

    For a base distribution N(mean, var) the noised marginal at (alpha, sigma)
    is N(alpha*mean, alpha^2*var + sigma^2) and the score is
    -(x - alpha*mean) / (alpha^2*var + sigma^2), elementwise.
    """

    def __init__(self, mean, var, max_staleness: int = 1):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.var = np.asarray(var, dtype=np.float64)
        if np.any(self.var <= 0):
            raise ConfigError("GaussianScore needs strictly positive variance")
        self.max_staleness = max_staleness
        self._staleness: int | None = None  # None = never fitted (frozen analytic use)

    def score(self, x: np.ndarray, alpha: float, sigma: float) -> np.ndarray:
        return -(x - alpha * self.mean) / (alpha**2 * self.var + sigma**2)

    # -- fake-score bookkeeping ----------------------------------------------

    def fit(self, samples: np.ndarray):
        """Moment-match to the current generator samples (the closed-form MLE)."""
        self.mean = np.asarray(samples.mean(axis=0), dtype=np.float64)
        self.var = np.maximum(np.asarray(samples.var(axis=0), dtype=np.float64), 1e-8)
        self.mark_fit()

    def mark_fit(self):
        self._staleness = 0

    def tick(self):
        """Count one generator update since the last fit."""
        if self._staleness is not None:
            self._staleness += 1

    def is_fresh(self) -> bool:
        return self._staleness is not None and self._staleness <= self.max_staleness


@dataclass
class ScorePair:
    """Frozen supervision-side score plus the trainable generator-side score."""

    real: GaussianScore
    fake: GaussianScore


@dataclass
class LossWeights:
    lambda_3d: float = 0.1

    def __post_init__(self):
        if self.lambda_3d < 0:
            raise ConfigError(f"lambda_3d must be non-negative, got {self.lambda_3d}")


def score_difference(scores: ScorePair, x_t: np.ndarray, alpha: float, sigma: float) -> np.ndarray:
    if not scores.fake.is_fresh():
        raise StalenessError("fake score stale: refit against current generator samples first")
    return scores.fake.score(x_t, alpha, sigma) - scores.real.score(x_t, alpha, sigma)


def dmd_generator_grad(gen_out: Tensor, scores: ScorePair, schedule: DiffusionSchedule,
                       t: int, noise: Tensor) -> Tensor:
    """Reverse-KL gradient w.r.t. gen_out at one diffusion step.

    The noising map x_t = alpha*x0 + sigma*eps is linear, so the pulled-back
    gradient is alpha_t * (s_fake - s_real)(x_t). Returned as a constant
    tensor; identical score models give an exactly zero gradient.
    """
    t = schedule._check(t)
    alpha, sigma = float(schedule.alpha[t]), float(schedule.sigma[t])
    x_t = alpha * gen_out.data + sigma * noise.data
    return ag.constant(alpha * score_difference(scores, x_t, alpha, sigma))


def dmd_pseudo_loss(gen_out: Tensor, scores: ScorePair, schedule: DiffusionSchedule,
                    t: int, noise: Tensor) -> Tensor:
    """Scalar surrogate whose tape gradient w.r.t. gen_out equals the DMD gradient.

    Built as mean(x_t * stopgrad(score_difference)); differentiating through
    forward_diffuse reproduces dmd_generator_grad / n_elements.
    """
    x_t = schedule.forward_diffuse(gen_out, t, noise)
    diff = score_difference(scores, x_t.data, float(schedule.alpha[t]), float(schedule.sigma[t]))
    return ag.tmean(ag.mul(x_t, ag.constant(diff)))


def loss_3d(pred_feat, ref_feat) -> Tensor:
    """1 - cosine similarity between two feature volumes; value in [0, 2]."""
    pred = pred_feat if isinstance(pred_feat, Tensor) else pred_feat.data
    ref = ref_feat if isinstance(ref_feat, Tensor) else ref_feat.data
    return ag.add(ag.mul(ag.cosine_similarity(pred, ref), -1.0), 1.0)


def total_loss(gen_term: Tensor, l3d: Tensor, w: LossWeights) -> Tensor:
    """gen + lambda_3d * l3d; the lambda is the exact sensitivity to the 3D term."""
    return ag.add(gen_term, ag.mul(l3d, w.lambda_3d))


@dataclass
class DmdFitOutcome:
    mean: float
    var: float
    final_kl: float
    kl_series: list[float] = field(default_factory=list)


def fit_dmd_gaussian(target_mean: float, target_var: float, steps: int, batch: int,
                     lr: float, seed: int, schedule: DiffusionSchedule | None = None) -> DmdFitOutcome:
    """Train a 1-D affine generator (x = a*z + b) against N(target_mean, target_var).

    The fake score is refit to each step's samples before the gradient is
    taken; KL(generator || target) is tracked in closed form each step.
    """
    from .verify import gaussian_kl

    schedule = schedule or DiffusionSchedule(8)
    rng = np.random.default_rng(seed)
    a = ag.param(np.asarray(0.5))
    b = ag.param(np.asarray(0.0))
    real = GaussianScore(target_mean, target_var)
    fake = GaussianScore(0.0, 1.0)
    pair = ScorePair(real=real, fake=fake)
    kl_series = []
    interior = schedule.interior_steps()
    for _ in range(steps):
        z = ag.constant(rng.standard_normal(batch))
        with ag.record() as tape:
            gen_out = ag.add(ag.mul(z, a), b)
            fake.fit(gen_out.data)
            t = int(rng.choice(interior))
            noise = ag.constant(rng.standard_normal(batch))
            loss = dmd_pseudo_loss(gen_out, pair, schedule, t, noise)
        tape.backward(loss)
        a.data = a.data - lr * a.grad
        b.data = b.data - lr * b.grad
        a.zero_grad()
        b.zero_grad()
        fake.tick()
        kl_series.append(gaussian_kl(float(b.data), float(a.data) ** 2, target_mean, target_var))
    return DmdFitOutcome(mean=float(b.data), var=float(a.data) ** 2,
                         final_kl=kl_series[-1], kl_series=kl_series)
