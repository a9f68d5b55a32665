"""Adaptation controller tests: flat-loss signature growth and per-layer
detection stoppage."""

import numpy as np
import pytest

from reusim.adaptive import AdaptConfig, AdaptState, analytic_baseline_cycles
from reusim.cache import HitState
from reusim.dataflow import PEArrayConfig, simulate_forward_sync
from reusim.kernels import ConfigError, ConvLayerSpec, FCLayerSpec


class TestObserveLoss:
    def test_three_flat_steps_grow_once(self):
        state = AdaptState(AdaptConfig(initial_n=20, flat_iters_k=3))
        for loss in [1.0, 1.0, 1.0]:
            state.observe_loss(loss)
        assert state.n_bits == 20
        state.observe_loss(1.0)  # third flat comparison
        assert state.n_bits == 21

    def test_strictly_decreasing_loss_keeps_n(self):
        state = AdaptState(AdaptConfig(initial_n=20, flat_iters_k=3))
        for loss in [1.0, 0.9, 0.8, 0.7, 0.6]:
            state.observe_loss(loss)
        assert state.n_bits == 20

    def test_capped_at_max_n(self):
        state = AdaptState(AdaptConfig(initial_n=22, flat_iters_k=1, max_n=23))
        for _ in range(10):
            state.observe_loss(1.0)
        assert state.n_bits == 23

    def test_one_increment_per_k_flats(self):
        state = AdaptState(AdaptConfig(initial_n=20, flat_iters_k=3, max_n=64))
        state.observe_loss(1.0)
        for i in range(1, 13):
            state.observe_loss(1.0)
            assert state.n_bits == 20 + i // 3

    def test_relative_tolerance(self):
        state = AdaptState(AdaptConfig(initial_n=20, flat_iters_k=2, loss_flat_tol=1e-3))
        state.observe_loss(100.0)
        state.observe_loss(100.05)  # within 0.1% of 100
        state.observe_loss(100.01)
        assert state.n_bits == 21

    def test_nan_loss_rejected(self):
        state = AdaptState()
        with pytest.raises(ValueError):
            state.observe_loss(float("nan"))


class TestDetectionStoppage:
    def test_three_unprofitable_batches_disable(self):
        state = AdaptState(AdaptConfig(unprofitable_batches_t=3))
        assert not state.observe_batch_costs("conv1", 110, 100)
        assert not state.observe_batch_costs("conv1", 120, 100)
        assert state.observe_batch_costs("conv1", 105, 100)
        assert not state.detection_enabled("conv1")

    def test_alternating_stays_on(self):
        state = AdaptState(AdaptConfig(unprofitable_batches_t=3))
        for _ in range(10):
            state.observe_batch_costs("a", 110, 100)
            state.observe_batch_costs("a", 90, 100)
        assert state.detection_enabled("a")

    def test_never_reenables(self):
        state = AdaptState(AdaptConfig(unprofitable_batches_t=1))
        state.observe_batch_costs("a", 2, 1)
        assert not state.detection_enabled("a")
        for _ in range(20):
            state.observe_batch_costs("a", 0, 100)
        assert not state.detection_enabled("a")

    def test_per_layer_independence(self):
        state = AdaptState(AdaptConfig(unprofitable_batches_t=1))
        state.observe_batch_costs("a", 2, 1)
        assert not state.detection_enabled("a")
        assert state.detection_enabled("b")

    def test_snapshot_shape(self):
        state = AdaptState()
        state.observe_batch_costs("a", 5, 10)
        snap = state.snapshot()
        assert snap["n_bits"] == 20
        assert snap["layers"]["a"]["baseline_cycles"] == 10


class TestAnalyticBaseline:
    def test_conv_form(self):
        spec = ConvLayerSpec(1, 1, (3, 3), (5, 5), activation="identity")
        assert analytic_baseline_cycles(spec, PEArrayConfig(pe_count=9)) == 18

    def test_fc_form(self):
        spec = FCLayerSpec(18, 4, block_vector_len=9)
        cfg = PEArrayConfig(pe_count=8)
        assert analytic_baseline_cycles(spec, cfg, batch=8) == 2 * 4 * 9

    def test_rejects_unknown_spec(self):
        with pytest.raises(ConfigError):
            analytic_baseline_cycles(object(), PEArrayConfig())

    def test_matches_all_mnu_simulation_minus_signature(self):
        rng = np.random.default_rng(0)
        cfg = PEArrayConfig(pe_count=12)
        for _ in range(10):
            spec = ConvLayerSpec(
                int(rng.integers(1, 3)),
                int(rng.integers(1, 5)),
                (3, 3),
                (3 * int(rng.integers(1, 4)), int(rng.integers(4, 10))),
                activation="identity",
            )
            maps = [
                np.full(spec.num_vectors, HitState.MNU, dtype=np.int8)
                for _ in range(spec.in_channels)
            ]
            rep = simulate_forward_sync(spec, maps, cfg, 8)
            assert rep.total_cycles - rep.signature_cycles == analytic_baseline_cycles(spec, cfg)


class TestConfigValidation:
    def test_initial_above_max_rejected(self):
        with pytest.raises(ConfigError):
            AdaptConfig(initial_n=65, max_n=64)

    def test_defaults(self):
        cfg = AdaptConfig()
        assert cfg.initial_n == 20 and cfg.flat_iters_k == 50
        assert cfg.unprofitable_batches_t == 3 and cfg.max_n == 64
