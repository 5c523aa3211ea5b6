import json

import numpy as np
import pytest

from ew import autograd as ag
from ew.errors import AlignmentError, ConfigError, TrainingAbort
from ew.generator import CHUNK_LATENTS
from ew.training import (Adam, LatentProcess, MaskingPlan, TrainConfig, Trainer,
                         drift_experiment, sample_masking_plan, two_step_generate)

from conftest import tiny_config


def make_trainer(detach=True, seed=0, **cfg_overrides) -> Trainer:
    cfg = dict(steps=4, batch_size=1, seed=seed, detach_conditioning=detach)
    cfg.update(cfg_overrides)
    return Trainer(tiny_config(), TrainConfig(**cfg), feature_channels=3, text_tokens=3)


class TestMaskingPlan:
    def test_domain_over_many_draws(self):
        rng = np.random.default_rng(0)
        draws = [sample_masking_plan(rng).mask_start_frame for _ in range(10_000)]
        assert all(t % 3 == 0 and 3 <= t <= 78 for t in draws)

    def test_uniformity_chi_square(self):
        rng = np.random.default_rng(1)
        n = 10_000
        counts = np.zeros(26)
        for _ in range(n):
            counts[sample_masking_plan(rng).mask_start_frame // 3 - 1] += 1
        expected = n / 26
        chi2 = float(((counts - expected) ** 2 / expected).sum())
        # 25 dof: mean 25, stddev ~7.07; 3 sigma upper bound
        assert chi2 < 25 + 3 * np.sqrt(50)

    def test_boundary_t78_masks_final_chunk_only(self):
        plan = MaskingPlan(mask_start_frame=78)
        assert plan.first_masked_chunk == 6
        assert plan.masked_latents == [18, 19, 20]
        assert plan.masked_chunks == 1

    def test_every_plan_keeps_context(self):
        for t in range(3, 81, 3):
            plan = MaskingPlan(mask_start_frame=t)
            assert plan.prefix_chunks >= 1
            assert plan.masked_chunks >= 1

    def test_invalid_start_frames(self):
        for t in (0, 2, 4, 81, 84):
            with pytest.raises(ConfigError):
                MaskingPlan(mask_start_frame=t)


class TestLatentProcess:
    def test_stationary_unit_variance(self):
        proc = LatentProcess((2, 3, 3), rho=0.9, seed=0)
        rng = np.random.default_rng(1)
        seq = np.stack([proc.sample_sequence(rng, 40) for _ in range(200)])
        assert abs(seq.var() - 1.0) < 0.05

    def test_spectral_radius_below_one(self):
        proc = LatentProcess((2, 2, 2), rho=0.9, seed=0)
        assert np.abs(np.linalg.eigvals(proc.A)).max() < 1.0 - 1e-9

    def test_conditional_mean_matches_empirical(self):
        proc = LatentProcess((1, 2, 2), rho=0.9, seed=3)
        rng = np.random.default_rng(4)
        v0 = rng.standard_normal(4)
        samples = []
        for _ in range(4000):
            v = proc.A @ v0 + proc.eta * rng.standard_normal(4)
            v = proc.A @ v + proc.eta * rng.standard_normal(4)
            samples.append(v)
        emp = np.mean(samples, axis=0)
        assert np.abs(emp - proc.conditional_mean(v0.reshape(1, 2, 2), 2).ravel()).max() < 0.05


class TestTrainStep:
    def test_detach_wall_exact_zero(self):
        trainer = make_trainer(detach=True)
        for report in trainer.run(6):
            assert report.grad_norm_prefix == 0.0

    def test_baseline_prefix_grad_positive(self):
        trainer = make_trainer(detach=False)
        reports = trainer.run(8)
        assert all(r.grad_norm_prefix > 0 for r in reports[1:])  # step 0: zero out-proj

    def test_suffix_grad_positive(self):
        trainer = make_trainer(detach=True)
        for report in trainer.run(3):
            assert report.grad_norm_suffix > 0

    def test_deterministic_reports(self):
        r1 = [r.as_dict() for r in make_trainer(detach=True, seed=7).run(3)]
        r2 = [r.as_dict() for r in make_trainer(detach=True, seed=7).run(3)]
        for a, b in zip(r1, r2):
            a.pop("wall_time_s")
            b.pop("wall_time_s")
        assert r1 == r2

    def test_loss_decomposition_exact(self):
        trainer = make_trainer(detach=True, enable_l3d=True, lambda_3d=0.1)
        for report in trainer.run(3):
            assert abs(report.loss_total - (report.loss_gen + 0.1 * report.loss_l3d)) < 1e-12
            assert 0.0 <= report.loss_l3d <= 2.0

    def test_lambda_zero_makes_l3d_inert(self):
        # with lambda=0, enabling the 3D term must not change the trajectory
        runs = {}
        for enable in (False, True):
            trainer = make_trainer(detach=True, seed=5, enable_l3d=enable, lambda_3d=0.0)
            trainer.run(4)
            runs[enable] = {k: p.data.copy() for k, p in trainer.optimizer.params.items()}
        for k in runs[False]:
            assert np.array_equal(runs[False][k], runs[True][k])

    def test_nan_batch_aborts_with_diagnostics(self):
        trainer = make_trainer(detach=True)
        poisoned = trainer.sample_batch()
        poisoned[0][0, 0, 0, 0] = np.nan
        with pytest.raises(TrainingAbort) as exc:
            trainer.train_step(batch=poisoned)
        diag = exc.value.diagnostics
        assert diag["batch_stats"][0]["nonfinite"] == 1

    def test_fusion_grads_flow(self):
        trainer = make_trainer(detach=True)
        reports = trainer.run(6)
        assert any(r.grad_norm_fusion > 0 for r in reports[1:])

    def test_jsonl_output(self, tmp_path):
        trainer = make_trainer(detach=True)
        path = tmp_path / "reports.jsonl"
        trainer.run(2, jsonl_path=path)
        rows = [json.loads(line) for line in path.read_text().splitlines()]
        assert len(rows) == 2
        assert {"step", "loss_total", "grad_norm_prefix"} <= set(rows[0])


class TestTwoStep:
    def setup_method(self):
        self.trainer = make_trainer(detach=True)
        self.cond = self.trainer.fusion.fuse_optional(self.trainer.e_text, None)

    def test_empty_mask(self):
        record = two_step_generate(self.trainer.net, self.cond, 3, [], 17, self.trainer.window_tokens)
        assert record.regen_chunks == {}
        assert len(record.full_chunks) == 3

    def test_full_mask_regenerates_identically(self):
        masked = list(range(3 * CHUNK_LATENTS))
        with ag.record():
            record = two_step_generate(self.trainer.net, self.cond, 3, masked, 21,
                                       self.trainer.window_tokens)
        for idx, regen in record.regen_chunks.items():
            assert np.array_equal(regen.data, record.full_chunks[idx])

    def test_suffix_mask_l3d_in_range(self):
        masked = list(range(CHUNK_LATENTS, 3 * CHUNK_LATENTS))
        from ew.losses import loss_3d
        with ag.record():
            record = two_step_generate(self.trainer.net, self.cond, 3, masked, 23,
                                       self.trainer.window_tokens)
            vals = []
            for idx, regen in record.regen_chunks.items():
                ref = self.trainer.extractor.extract(ag.detach(ag.constant(record.full_chunks[idx])))
                vals.append(loss_3d(self.trainer.extractor.extract(regen), ref).item())
        assert all(np.isfinite(v) and 0.0 <= v <= 2.0 for v in vals)

    def test_non_aligned_mask_rejected(self):
        with pytest.raises(AlignmentError):
            two_step_generate(self.trainer.net, self.cond, 3, [4, 5, 6, 7, 8], 29,
                              self.trainer.window_tokens)
        with pytest.raises(AlignmentError):
            two_step_generate(self.trainer.net, self.cond, 3, [3, 4], 29,
                              self.trainer.window_tokens)


class TestOptimizers:
    def test_adam_moves_against_gradient(self):
        p = ag.param(np.array([1.0, -1.0]))
        opt = Adam({"p": p}, lr=0.1)
        p.grad = np.array([1.0, -1.0])
        opt.step()
        assert p.data[0] < 1.0 and p.data[1] > -1.0

    def test_zero_grad(self):
        p = ag.param(np.array([1.0]))
        opt = Adam({"p": p}, lr=0.1)
        p.grad = np.array([1.0])
        opt.zero_grad()
        assert p.grad is None


class TestDriftExperiment:
    def test_report_structure_and_invariants(self):
        net_cfg = tiny_config()
        a = TrainConfig(steps=5, batch_size=1, seed=0, detach_conditioning=True)
        b = TrainConfig(steps=5, batch_size=1, seed=0, detach_conditioning=False)
        report = drift_experiment((a, b), net_cfg, rollout_chunks=32, train_steps=5)
        # chunk 0 is the shared context chunk: identical between configs
        assert report.divergence_detached[0] == report.divergence_baseline[0]
        # full series logged and finite out to 32 continuation chunks
        assert len(report.divergence_detached) == len(report.divergence_baseline) == 33
        assert all(np.isfinite(x) for x in report.divergence_detached + report.divergence_baseline)
        assert all(g == 0.0 for g in report.prefix_grad_detached)
        assert any(g > 0.0 for g in report.prefix_grad_baseline)

    def test_config_pair_validation(self):
        net_cfg = tiny_config()
        a = TrainConfig(steps=2, seed=0, detach_conditioning=True)
        b = TrainConfig(steps=3, seed=0, detach_conditioning=False)
        with pytest.raises(ConfigError):
            drift_experiment((a, b), net_cfg, rollout_chunks=2)
        with pytest.raises(ConfigError):
            drift_experiment((a, a), net_cfg, rollout_chunks=2)

    def test_jsonl_rows(self, tmp_path):
        net_cfg = tiny_config()
        a = TrainConfig(steps=2, batch_size=1, seed=0, detach_conditioning=True)
        b = TrainConfig(steps=2, batch_size=1, seed=0, detach_conditioning=False)
        report = drift_experiment((a, b), net_cfg, rollout_chunks=2, train_steps=2)
        path = tmp_path / "drift.jsonl"
        report.save_jsonl(path)
        rows = [json.loads(line) for line in path.read_text().splitlines()]
        assert len(rows) == 3
        assert {"chunk", "divergence_detached", "divergence_baseline"} <= set(rows[0])


class TestTrainConfigValidation:
    def test_bad_lr(self):
        with pytest.raises(ConfigError):
            TrainConfig(lr=0.0)

    def test_bad_optimizer(self):
        with pytest.raises(ConfigError):
            TrainConfig(optimizer="lion")

    def test_frames_must_be_chunk_compatible(self):
        with pytest.raises(ConfigError):
            TrainConfig(frames=80)
        cfg = TrainConfig(frames=81)
        assert cfg.latents == 21 and cfg.chunks == 7
