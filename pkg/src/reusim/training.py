"""Desk-scale training loop: plain SGD over a small conv stack with an FC
classifier head, runnable as a no-reuse baseline arm or a reuse-enabled arm.

The reuse arm routes every enabled layer through the reuse engine and prices
it with the dataflow simulator; per-batch costs feed the adaptation
controller, which may grow the signature length or switch detection off per
layer.  A layer with detection off takes the reference kernel path, so a run
with everything disabled is bit-identical to the baseline arm.

The synthetic dataset tiles images from small per-class patch dictionaries
plus Gaussian noise - the knob that controls how much window similarity the
reuse machinery can find.
"""

import dataclasses
import struct
from dataclasses import dataclass

import numpy as np

from .adaptive import AdaptConfig, AdaptState
from .cache import CacheConfig, ReuseCache
from .dataflow import (
    PEArrayConfig,
    analytic_backward_baseline,
    analytic_fc_baseline,
    analytic_forward_baseline,
    simulate_backward,
    simulate_forward_sync,
)
from .engine import (
    LayerSignatureStore,
    ReuseStats,
    backward_conv_with_reuse,
    forward_conv_with_reuse,
    forward_fc_with_reuse,
)
from .kernels import (
    IDENTITY,
    ConfigError,
    FCLayerSpec,
    ShapeError,
    activation_grad,
    apply_activation,
    conv2d_forward,
    conv2d_input_grad,
    conv2d_weight_grad,
    fc_forward,
)
from .signatures import gen_projection

MSE = "mse"
CROSS_ENTROPY = "cross_entropy"


class DivergenceError(RuntimeError):
    """Training loss became NaN."""


@dataclass(frozen=True)
class ModelSpec:
    """A chain of conv layers followed by one FC classifier head."""

    conv_layers: tuple
    num_classes: int
    loss: str = CROSS_ENTROPY
    learning_rate: float = 0.05
    batch_size: int = 8
    epochs: int = 5
    seed: int = 0
    fc_block_len: int = 25

    def __post_init__(self):
        if not self.conv_layers:
            raise ConfigError("need at least one conv layer")
        if self.loss not in (MSE, CROSS_ENTROPY):
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        prev = None
        for spec in self.conv_layers:
            if prev is not None:
                if spec.in_channels != prev.out_channels:
                    raise ConfigError("adjacent conv layers do not compose (channels)")
                if spec.input_size != prev.out_size:
                    raise ConfigError("adjacent conv layers do not compose (extent)")
            prev = spec

    @property
    def flat_features(self):
        last = self.conv_layers[-1]
        oh, ow = last.out_size
        return last.out_channels * oh * ow

    @property
    def fc_spec(self):
        return FCLayerSpec(self.flat_features, self.num_classes, self.fc_block_len)


# ---------------------------------------------------------------------------
# datasets

@dataclass
class Dataset:
    images: np.ndarray  # (count, channels, H, W) float32
    labels: np.ndarray  # (count,) uint32
    num_classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.uint32)
        if self.images.ndim != 4 or len(self.labels) != len(self.images):
            raise ShapeError("dataset images must be (count, C, H, W) with labels")

    def __len__(self):
        return len(self.images)


def synthetic_patch_dataset(
    count,
    image_size=(9, 9),
    num_classes=3,
    patch_size=3,
    patches_per_class=2,
    noise=0.02,
    seed=0,
    dict_seed=None,
):
    """Images tiled from per-class patch dictionaries with additive noise.

    Every class draws its tiles from its own small dictionary, so images of
    one class share (nearly) duplicated windows - the similarity level the
    reuse engine feeds on is set by ``noise`` and the dictionary sizes.
    ``dict_seed`` pins the dictionaries so train and validation splits can
    sample fresh tilings of the same classes.
    """
    if dict_seed is None:
        dict_seed = seed
    dict_rng = np.random.default_rng(np.random.SeedSequence([dict_seed, 0xD1C7]))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDA7A]))
    h, w = image_size
    # class-specific intensity offsets keep the task learnable at desk scale
    bias = np.linspace(-0.5, 0.5, num_classes)
    dicts = (
        dict_rng.uniform(-0.8, 0.8, (num_classes, patches_per_class, patch_size, patch_size))
        + bias[:, None, None, None]
    )
    images = np.empty((count, 1, h, w), dtype=np.float32)
    labels = np.empty(count, dtype=np.uint32)
    tiles_h = -(-h // patch_size)
    tiles_w = -(-w // patch_size)
    for i in range(count):
        cls = int(rng.integers(0, num_classes))
        canvas = np.empty((tiles_h * patch_size, tiles_w * patch_size), dtype=np.float32)
        for th in range(tiles_h):
            for tw in range(tiles_w):
                patch = dicts[cls, int(rng.integers(0, patches_per_class))]
                canvas[
                    th * patch_size : (th + 1) * patch_size,
                    tw * patch_size : (tw + 1) * patch_size,
                ] = patch
        if noise:
            canvas = canvas + rng.normal(0.0, noise, canvas.shape)
        images[i, 0] = canvas[:h, :w]
        labels[i] = cls
    return Dataset(images, labels, num_classes)


_DATASET_MAGIC = b"MRCY"
_DATASET_VERSION = 1


def write_dataset(dataset, path):
    """Binary dataset file: little-endian header {magic "MRCY", version,
    count, H, W, C, classes} as u32, then float32 image tensors and u32
    labels."""
    count, c, h, w = dataset.images.shape
    with open(path, "wb") as fh:
        fh.write(_DATASET_MAGIC)
        fh.write(struct.pack("<IIIIII", _DATASET_VERSION, count, h, w, c, dataset.num_classes))
        fh.write(dataset.images.astype("<f4").tobytes())
        fh.write(dataset.labels.astype("<u4").tobytes())


def read_dataset(path):
    with open(path, "rb") as fh:
        if fh.read(4) != _DATASET_MAGIC:
            raise ValueError("not a dataset file (bad magic)")
        version, count, h, w, c, classes = struct.unpack("<IIIIII", fh.read(24))
        if version != _DATASET_VERSION:
            raise ValueError(f"unsupported dataset version {version}")
        images = np.frombuffer(fh.read(count * c * h * w * 4), dtype="<f4")
        images = images.reshape(count, c, h, w).copy()
        labels = np.frombuffer(fh.read(count * 4), dtype="<u4").copy()
    return Dataset(images, labels, classes)


# ---------------------------------------------------------------------------
# parameters and losses

def init_params(model, seed=None):
    rng = np.random.default_rng(
        np.random.SeedSequence([model.seed if seed is None else seed, 0x1417])
    )
    conv_w = []
    for spec in model.conv_layers:
        fan_in = spec.in_channels * spec.kernel_area
        conv_w.append(
            (rng.standard_normal((spec.out_channels, spec.in_channels, *spec.kernel))
             / np.sqrt(fan_in)).astype(np.float32)
        )
    fc_w = (
        rng.standard_normal((model.flat_features, model.num_classes))
        / np.sqrt(model.flat_features)
    ).astype(np.float32)
    return {"conv": conv_w, "fc": fc_w}


def _softmax(logits):
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _loss_and_dlogits(logits, labels, num_classes, kind):
    onehot = np.zeros((len(labels), num_classes))
    onehot[np.arange(len(labels)), labels] = 1.0
    if kind == CROSS_ENTROPY:
        probs = _softmax(logits)
        losses = -np.log(np.clip(probs[np.arange(len(labels)), labels], 1e-12, None))
        loss = float(losses.mean())
        dlogits = (probs - onehot) / len(labels)
    else:
        diff = logits.astype(np.float64) - onehot
        loss = float(0.5 * np.sum(diff * diff) / len(labels))
        dlogits = diff / len(labels)
    if loss != loss:
        raise DivergenceError("training loss is NaN")
    return loss, dlogits.astype(np.float32)


# ---------------------------------------------------------------------------
# per-arm training

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    cycles: int
    baseline_cycles: int
    reuse_fraction: float


@dataclass
class TrainResult:
    records: list
    params: dict
    stats: ReuseStats
    cycles: int
    baseline_cycles: int
    adaptation_trace: list  # rows: {iteration, n_bits, <layer>: on/off}

    @property
    def final_accuracy(self):
        return self.records[-1].val_accuracy


def _identity(spec):
    return dataclasses.replace(spec, activation=IDENTITY)


def evaluate(params, model, dataset):
    """Accuracy and loss of the given weights on a dataset (reference
    kernels; reuse plays no role in evaluation)."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    flats = np.empty((len(dataset), model.flat_features), dtype=np.float32)
    for i in range(len(dataset)):
        a = dataset.images[i]
        for spec, w in zip(model.conv_layers, params["conv"]):
            z = conv2d_forward(a, w, _identity(spec))
            a = apply_activation(z, spec.activation)
        flats[i] = a.ravel()
    logits = fc_forward(flats, params["fc"])
    loss, _ = _loss_and_dlogits(logits, dataset.labels, model.num_classes, model.loss)
    accuracy = float(np.mean(np.argmax(logits, axis=1) == dataset.labels))
    return accuracy, loss


def train(
    model,
    train_set,
    val_set,
    reuse_on,
    adapt_config=None,
    pe_config=None,
    cache_config=None,
    force_detection_off=False,
):
    """One training arm.  Returns per-epoch records, final weights, reuse
    statistics, and modeled cycle totals.  Both arms consume identical data
    order for a given model seed."""
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    adapt = AdaptState(adapt_config or AdaptConfig())
    pe_cfg = pe_config or PEArrayConfig()
    cache_cfg = cache_config or CacheConfig()
    params = init_params(model)
    order_rng = np.random.default_rng(np.random.SeedSequence([model.seed, 0x0BDE]))
    cache = ReuseCache(cache_cfg)
    fc_cache_cfg = dataclasses.replace(cache_cfg, result_width=model.num_classes)
    fc_caches = (ReuseCache(fc_cache_cfg), ReuseCache(fc_cache_cfg))
    projections = {}

    def proj_for(m):
        key = (m, adapt.n_bits)
        if key not in projections:
            projections[key] = gen_projection(model.seed, m, adapt.n_bits)
        return projections[key]

    layer_ids = [f"conv{i}" for i in range(len(model.conv_layers))] + ["fc"]
    if force_detection_off:
        for lid in layer_ids:
            adapt.disable_layer(lid)

    stats = ReuseStats()
    total_cycles = 0
    total_baseline = 0
    records = []
    trace = []
    iteration = 0
    n_layers = len(model.conv_layers)

    for epoch in range(model.epochs):
        perm = order_rng.permutation(len(train_set))
        epoch_loss = 0.0
        epoch_cycles = 0
        epoch_baseline = 0
        n_batches = 0
        for start in range(0, len(train_set), model.batch_size):
            batch_idx = perm[start : start + model.batch_size]
            images = train_set.images[batch_idx]
            labels = train_set.labels[batch_idx]
            bsz = len(batch_idx)
            batch_cycles = {lid: 0 for lid in layer_ids}
            batch_baseline = {lid: 0 for lid in layer_ids}
            # forward: conv chain per sample, FC over the whole batch
            acts = []  # per sample: list of (z, a) per layer, a[-1] flattened
            flats = np.empty((bsz, model.flat_features), dtype=np.float32)
            stores = []
            for s in range(bsz):
                a = images[s]
                zs, as_ = [], []
                store = LayerSignatureStore()
                for li, (spec, w) in enumerate(zip(model.conv_layers, params["conv"])):
                    lid = layer_ids[li]
                    detect = reuse_on and adapt.detection_enabled(lid)
                    if detect:
                        proj = proj_for(spec.kernel_area)
                        z, st, hitmaps = forward_conv_with_reuse(
                            a, w, _identity(spec), proj, cache,
                            store=store, layer_id=li,
                        )
                        stats.merge(st)
                        rep = simulate_forward_sync(
                            _identity(spec), hitmaps, pe_cfg, adapt.n_bits
                        )
                        batch_cycles[lid] += rep.total_cycles
                    else:
                        z = conv2d_forward(a, w, _identity(spec))
                        batch_cycles[lid] += analytic_forward_baseline(spec, pe_cfg)
                    batch_baseline[lid] += analytic_forward_baseline(spec, pe_cfg)
                    a = apply_activation(z, spec.activation)
                    zs.append(z)
                    as_.append(a)
                acts.append((zs, as_))
                stores.append(store)
                flats[s] = a.ravel()
            fc_detect = reuse_on and adapt.detection_enabled("fc")
            if fc_detect:
                logits, st, rep = forward_fc_with_reuse(
                    flats, params["fc"], model.fc_spec,
                    proj_for(model.fc_block_len), fc_caches, pe_cfg,
                )
                stats.merge(st)
                batch_cycles["fc"] += rep.total_cycles
            else:
                logits = fc_forward(flats, params["fc"])
                batch_cycles["fc"] += analytic_fc_baseline(model.fc_spec, bsz, pe_cfg)
            batch_baseline["fc"] += analytic_fc_baseline(model.fc_spec, bsz, pe_cfg)

            loss, dlogits = _loss_and_dlogits(
                logits, labels, model.num_classes, model.loss
            )
            epoch_loss += loss * bsz
            # FC gradients (no reuse in the FC backward path)
            fc_grad = (flats.astype(np.float64).T @ dlogits.astype(np.float64)).astype(np.float32)
            dflat = dlogits @ params["fc"].T
            conv_grads = [np.zeros_like(w) for w in params["conv"]]
            last = model.conv_layers[-1]
            for s in range(bsz):
                zs, as_ = acts[s]
                stores[s].begin_backward_pass()
                delta = dflat[s].reshape(last.out_channels, *last.out_size)
                delta = delta * activation_grad(zs[-1], last.activation)
                for li in range(n_layers - 1, -1, -1):
                    spec = model.conv_layers[li]
                    lid = layer_ids[li]
                    w = params["conv"][li]
                    prev_a = as_[li - 1] if li else images[s]
                    prev_z = zs[li - 1] if li else images[s]
                    prev_act = model.conv_layers[li - 1].activation if li else IDENTITY
                    detect = reuse_on and adapt.detection_enabled(lid)
                    if detect:
                        stored = (
                            stores[s].fetch(li + 1) if li + 1 < n_layers else None
                        )
                        proj = proj_for(spec.kernel_area)
                        res = backward_conv_with_reuse(
                            delta, w, prev_a, prev_z, _identity(spec), proj,
                            cache, stored=stored, activation=prev_act,
                        )
                        stats.merge(res.stats)
                        next_spec = (
                            model.conv_layers[li + 1]
                            if res.regenerations == 0
                            else None
                        )
                        rep = simulate_backward(
                            spec, next_spec, res.hitmaps, pe_cfg, adapt.n_bits
                        )
                        batch_cycles[lid] += rep.total_cycles
                        wgrad, igrad = res.weight_grad, res.input_grad
                    else:
                        wgrad = conv2d_weight_grad(delta, prev_a, spec)
                        igrad = (
                            conv2d_input_grad(delta, w, prev_z, spec, activation=prev_act)
                            if li
                            else None
                        )
                        batch_cycles[lid] += analytic_backward_baseline(spec, pe_cfg)
                    batch_baseline[lid] += analytic_backward_baseline(spec, pe_cfg)
                    conv_grads[li] += wgrad
                    if li:
                        delta = igrad
            # SGD step
            lr = np.float32(model.learning_rate)
            for li in range(n_layers):
                params["conv"][li] = params["conv"][li] - lr * conv_grads[li]
            params["fc"] = params["fc"] - lr * fc_grad
            # adaptation bookkeeping
            iteration += 1
            if reuse_on and not force_detection_off:
                for lid in layer_ids:
                    adapt.observe_batch_costs(
                        lid, batch_cycles[lid], batch_baseline[lid]
                    )
                adapt.observe_loss(loss)
            row = {"iteration": iteration, "n_bits": adapt.n_bits}
            row.update(
                {lid: int(adapt.detection_enabled(lid)) for lid in layer_ids}
            )
            trace.append(row)
            epoch_cycles += sum(batch_cycles.values())
            epoch_baseline += sum(batch_baseline.values())
            n_batches += 1
        val_acc, val_loss = evaluate(params, model, val_set)
        records.append(
            EpochRecord(
                epoch=epoch,
                train_loss=epoch_loss / len(train_set),
                val_loss=val_loss,
                val_accuracy=val_acc,
                cycles=epoch_cycles,
                baseline_cycles=epoch_baseline,
                reuse_fraction=stats.reuse_fraction,
            )
        )
        total_cycles += epoch_cycles
        total_baseline += epoch_baseline
    return TrainResult(records, params, stats, total_cycles, total_baseline, trace)


def compare_runs(baseline, reuse_arm):
    """Per-epoch comparison rows of the two arms (identical data order)."""
    rows = []
    for b, m in zip(baseline.records, reuse_arm.records):
        rows.append(
            {
                "epoch": b.epoch,
                "baseline_loss": b.val_loss,
                "reuse_loss": m.val_loss,
                "baseline_acc": b.val_accuracy,
                "reuse_acc": m.val_accuracy,
                "baseline_cycles": b.baseline_cycles,
                "reuse_cycles": m.cycles,
                "reuse_fraction": m.reuse_fraction,
            }
        )
    return rows
