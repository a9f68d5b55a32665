"""Runtime adaptation: grow the signature length as training converges, and
permanently turn similarity detection off for layers where it stops paying.

Signature length is global and non-decreasing (prefix-stable projections
make longer signatures a refinement).  Detection stoppage is per layer and
one-way: the measured reuse-path cycle cost of a layer is compared against
the analytically computed no-reuse baseline, and T consecutive unprofitable
batches switch that layer off for the rest of training.
"""

from dataclasses import dataclass

from .dataflow import analytic_fc_baseline, analytic_forward_baseline
from .kernels import ConfigError, ConvLayerSpec, FCLayerSpec


@dataclass(frozen=True)
class AdaptConfig:
    initial_n: int = 20
    flat_iters_k: int = 50        # flat-loss iterations before +1 bit
    loss_flat_tol: float = 1e-3   # relative tolerance for "no change"
    unprofitable_batches_t: int = 3
    max_n: int = 64

    def __post_init__(self):
        if self.initial_n < 1 or self.initial_n > self.max_n:
            raise ConfigError("need 1 <= initial_n <= max_n")
        if self.flat_iters_k < 1 or self.unprofitable_batches_t < 1:
            raise ConfigError("K and T must be >= 1")
        if self.loss_flat_tol < 0:
            raise ConfigError("loss_flat_tol must be non-negative")


@dataclass
class _LayerAdapt:
    detection_on: bool = True
    unprofitable_streak: int = 0
    measured_cycles: int = 0   # accumulated reuse-path cost (C_S side)
    baseline_cycles: int = 0   # accumulated analytic no-reuse cost (C_B side)


class AdaptState:
    """Owned by the training loop; layer executors read snapshots."""

    def __init__(self, config=None):
        self.config = config or AdaptConfig()
        self.n_bits = self.config.initial_n
        self.flat_streak = 0
        self._prev_loss = None
        self._layers = {}

    def _layer(self, layer_id):
        return self._layers.setdefault(layer_id, _LayerAdapt())

    def detection_enabled(self, layer_id):
        return self._layer(layer_id).detection_on

    def disable_layer(self, layer_id):
        self._layer(layer_id).detection_on = False

    def observe_loss(self, loss):
        """Track the per-iteration loss; K consecutive flat iterations grow
        the signature by one bit (capped at max_n).  Returns True when the
        length changed."""
        loss = float(loss)
        if loss != loss:
            raise ValueError("loss is NaN")
        grown = False
        if self._prev_loss is not None:
            tol = self.config.loss_flat_tol * max(abs(self._prev_loss), 1.0)
            if abs(loss - self._prev_loss) <= tol:
                self.flat_streak += 1
            else:
                self.flat_streak = 0
            if self.flat_streak >= self.config.flat_iters_k:
                if self.n_bits < self.config.max_n:
                    self.n_bits += 1
                    grown = True
                self.flat_streak = 0
        self._prev_loss = loss
        return grown

    def observe_batch_costs(self, layer_id, measured_cycles, baseline_cycles):
        """Compare one batch's reuse-path cycles against the analytic
        baseline; T consecutive unprofitable batches disable detection for
        this layer permanently.  Returns True when detection switched off."""
        if measured_cycles < 0 or baseline_cycles < 0:
            raise ValueError("cycle counts must be non-negative")
        layer = self._layer(layer_id)
        layer.measured_cycles += int(measured_cycles)
        layer.baseline_cycles += int(baseline_cycles)
        if not layer.detection_on:
            return False
        if measured_cycles > baseline_cycles:
            layer.unprofitable_streak += 1
        else:
            layer.unprofitable_streak = 0
        if layer.unprofitable_streak >= self.config.unprofitable_batches_t:
            layer.detection_on = False
            return True
        return False

    def snapshot(self):
        return {
            "n_bits": self.n_bits,
            "flat_streak": self.flat_streak,
            "layers": {
                lid: {
                    "detection_on": layer.detection_on,
                    "unprofitable_streak": layer.unprofitable_streak,
                    "measured_cycles": layer.measured_cycles,
                    "baseline_cycles": layer.baseline_cycles,
                }
                for lid, layer in sorted(self._layers.items())
            },
        }


def analytic_baseline_cycles(spec, cfg, batch=1):
    """Closed-form no-reuse cycle count for one layer (the C_B side of the
    stoppage comparison)."""
    if isinstance(spec, ConvLayerSpec):
        return analytic_forward_baseline(spec, cfg)
    if isinstance(spec, FCLayerSpec):
        return analytic_fc_baseline(spec, batch, cfg)
    raise ConfigError(f"no analytic baseline for {type(spec).__name__}")
