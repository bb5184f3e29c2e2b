import math

import numpy as np
import pytest
import torch

from tempseg.model import ModelConfig, StageOutput, init_params
from tempseg.seqdata import SynthSpec, synth_generate
from tempseg.train import (
    TrainConfig,
    TrainHistory,
    TrainingError,
    backward,
    fit,
    loss_ce,
    loss_smooth,
    lr_at,
    total_loss,
)


def toy_outputs(rng, t=6, c=3, stages=2):
    outs = []
    for _ in range(stages):
        probs = torch.softmax(torch.from_numpy(rng.standard_normal((t, c))), dim=-1)
        outs.append(StageOutput(torch.zeros(t, 2), probs))
    return outs


class TestCrossEntropy:
    def test_one_hot_correct_is_zero(self):
        probs = torch.eye(3)[torch.tensor([0, 1, 2])]
        labels = torch.tensor([0, 1, 2])
        assert loss_ce(probs, labels).item() == pytest.approx(0.0, abs=1e-9)

    def test_uniform_is_log_c(self):
        probs = torch.full((5, 4), 0.25, dtype=torch.float64)
        labels = torch.tensor([0, 1, 2, 3, 0])
        assert loss_ce(probs, labels).item() == pytest.approx(math.log(4), rel=1e-12)

    def test_matches_direct_sum(self, rng):
        probs = rng.dirichlet(np.ones(3), size=5)
        labels = rng.integers(0, 3, size=5)
        expected = -np.mean([np.log(probs[t, labels[t]]) for t in range(5)])
        got = loss_ce(torch.from_numpy(probs), torch.from_numpy(labels))
        assert got.item() == pytest.approx(expected, rel=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            loss_ce(torch.full((3, 2), 0.5), torch.tensor([0, 1]))


class TestSmoothingLoss:
    def test_constant_probabilities_zero(self):
        probs = torch.full((6, 3), 1.0 / 3)
        assert loss_smooth(probs).item() == 0.0

    def test_difference_at_clamp_boundary(self):
        # adjacent log-probabilities differ by exactly the threshold
        tau = 16.0
        base = torch.full((2,), 1e-3, dtype=torch.float64)
        probs = torch.stack([base, base * math.exp(tau)])
        assert loss_smooth(probs, clamp=tau).item() == pytest.approx(tau**2, rel=1e-9)

    def test_larger_differences_truncate(self):
        tau = 16.0
        base = torch.full((2,), 1e-6, dtype=torch.float64)
        probs = torch.stack([base, base * math.exp(2 * tau)])
        assert loss_smooth(probs, clamp=tau).item() == tau**2

    def test_matches_direct_sum(self, rng):
        probs = torch.from_numpy(rng.dirichlet(np.ones(2), size=4))
        tau = 16.0
        logp = np.log(probs.numpy())
        diffs = np.minimum(np.abs(logp[1:] - logp[:-1]), tau)
        expected = float(np.mean(diffs**2))
        assert loss_smooth(probs, clamp=tau).item() == pytest.approx(expected, rel=1e-12)

    def test_single_frame_scores_zero(self):
        assert loss_smooth(torch.full((1, 3), 1.0 / 3)).item() == 0.0

    def test_bounded_by_clamp_squared(self, rng):
        probs = torch.softmax(torch.from_numpy(rng.standard_normal((50, 4)) * 40), -1)
        assert loss_smooth(probs, clamp=16.0).item() <= 16.0**2


class TestTotalLoss:
    def test_zero_weight_is_ce_sum(self, rng):
        outs = toy_outputs(rng)
        labels = torch.tensor([0, 1, 2, 0, 1, 2])
        expected = sum(loss_ce(o.probs, labels) for o in outs)
        got = total_loss(outs, labels, smooth_weight=0.0)
        torch.testing.assert_close(got, expected)

    def test_identical_stages_scale_linearly(self, rng):
        single = toy_outputs(rng, stages=1)
        labels = torch.tensor([1, 0, 2, 1, 1, 0])
        one = total_loss(single, labels)
        four = total_loss(single * 4, labels)
        torch.testing.assert_close(four, 4 * one)

    def test_composition_of_terms(self, rng):
        outs = toy_outputs(rng, stages=3)
        labels = torch.tensor([0, 2, 1, 1, 0, 2])
        expected = sum(
            loss_ce(o.probs, labels) + 0.15 * loss_smooth(o.probs, 16.0)
            for o in outs
        )
        torch.testing.assert_close(total_loss(outs, labels), expected)

    def test_non_negative(self, rng):
        outs = toy_outputs(rng)
        labels = torch.tensor([0, 1, 2, 0, 1, 2])
        assert total_loss(outs, labels).item() >= 0.0


class TestSchedule:
    def test_fixed(self):
        cfg = TrainConfig.profile("salads")
        assert cfg.epochs == 200
        for epoch in (0, 57, 199):
            assert lr_at(epoch, cfg) == 0.00065

    def test_cosine_endpoints(self):
        cfg = TrainConfig.profile("breakfast")
        assert cfg.epochs == 150
        assert lr_at(0, cfg) == 0.00025
        assert lr_at(14, cfg) == 0.00025
        assert lr_at(15, cfg) == pytest.approx(0.00025, rel=1e-12)  # continuous
        assert lr_at(149, cfg) == pytest.approx(0.00005, rel=1e-12)

    def test_cosine_midpoint_is_mean(self):
        cfg = TrainConfig(epochs=31, schedule="cosine", base_lr=8e-4,
                          final_lr=2e-4, decay_start_epoch=10)
        mid = 10 + (30 - 10) // 2
        assert lr_at(mid, cfg) == pytest.approx((8e-4 + 2e-4) / 2, rel=1e-12)

    def test_assembly_profile(self):
        cfg = TrainConfig.profile("assembly")
        assert cfg.epochs == 120 and cfg.schedule == "cosine"

    def test_epoch_out_of_range(self):
        with pytest.raises(ValueError):
            lr_at(200, TrainConfig.profile("salads"))


def tiny_dataset(seed=0, n=2):
    spec = SynthSpec(num_videos=n, frames_per_video=40, num_classes=3,
                     mean_segment_length=10, feature_dim=5, noise_scale=0.05)
    return synth_generate(spec, seed)


def tiny_model_config():
    return ModelConfig(num_classes=3, in_dim=5, stage1_dim=8, refine_dim=4,
                       num_layers=2, num_stages=2, window_size=8, group_size=8)


class TestBackward:
    def test_every_parameter_gets_gradient(self):
        data = tiny_dataset()
        model = init_params(tiny_model_config(), 0)
        feats, labels = data.videos[0]
        outs = model(torch.from_numpy(feats.frames))
        loss = total_loss(outs, torch.from_numpy(labels.labels))
        grads = backward(loss, model)
        assert set(grads) == {n for n, _ in model.named_parameters()}

    def test_zeroed_weights_still_get_finite_gradients(self):
        model = init_params(tiny_model_config(), 0)
        with torch.no_grad():
            for block in model.stage1_blocks:
                block.conv.weight.zero_()
                block.attn2.out_proj.weight.zero_()
        x = torch.randn(12, 5)
        loss = total_loss(model(x), torch.randint(0, 3, (12,)))
        grads = backward(loss, model)
        assert all(torch.isfinite(g).all() for g in grads.values())

    def test_loss_scaling_scales_gradients(self):
        model = init_params(tiny_model_config(), 1)
        x = torch.randn(10, 5)
        labels = torch.randint(0, 3, (10,))

        def grad_of(scale):
            model.zero_grad()
            loss = scale * total_loss(model(x), labels)
            return {n: g.clone() for n, g in backward(loss, model).items()}

        ones = grad_of(1.0)
        twos = grad_of(2.0)
        for name in ones:
            torch.testing.assert_close(twos[name], 2 * ones[name])

    def test_non_finite_loss_raises(self):
        model = init_params(tiny_model_config(), 0)
        with pytest.raises(TrainingError):
            backward(torch.tensor(float("nan")), model)


class TestFit:
    def test_one_epoch_decreases_loss(self):
        data = tiny_dataset(n=1)
        cfg = TrainConfig(epochs=2, base_lr=1e-3, schedule="fixed", seed=0,
                          shuffle=False)
        _, history = fit(data, tiny_model_config(), cfg)
        assert history.records[1].loss_total < history.records[0].loss_total

    def test_bit_reproducible(self):
        data = tiny_dataset()
        cfg = TrainConfig(epochs=2, base_lr=1e-3, schedule="fixed", seed=4)
        a, _ = fit(data, tiny_model_config(), cfg)
        b, _ = fit(data, tiny_model_config(), cfg)
        for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert torch.equal(pa, pb)

    def test_history_csv_layout(self, tmp_path):
        data = tiny_dataset(n=1)
        cfg = TrainConfig(epochs=3, base_lr=1e-3, schedule="fixed", seed=0)
        _, history = fit(data, tiny_model_config(), cfg)
        path = tmp_path / "history.csv"
        history.write_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "epoch,lr,loss_total,loss_ce,loss_smooth"
        assert len(lines) == 4

    def test_checkpoint_written_each_epoch(self, tmp_path):
        data = tiny_dataset(n=1)
        cfg = TrainConfig(epochs=1, base_lr=1e-3, schedule="fixed", seed=0)
        path = tmp_path / "model.ckpt"
        fit(data, tiny_model_config(), cfg, checkpoint_path=path)
        assert path.exists()

    def test_batched_updates_run(self):
        data = tiny_dataset(n=3)
        cfg = TrainConfig(epochs=1, base_lr=1e-3, schedule="fixed", seed=0,
                          batch_videos=2)
        model, history = fit(data, tiny_model_config(), cfg)
        assert len(history.records) == 1
