"""Experiment runner: declarative JSON run configurations in, CSV/JSON data
files out (no plotting).

Subcommands:
  rpq-experiment   uniqueness counts per signature length, RPQ vs Bloom
  simulate         dataflow cycle reports over duplicate-fraction sweeps
                   and cache-organization sweeps
  train            the two training arms plus the adaptation trace
  report           aggregate summaries of earlier runs

Every emitted file embeds the resolved configuration and seed; CSVs carry
it as a leading '# config: ...' comment, JSON files under a "config" key.
On any validation or runtime error the exit status is nonzero and partial
outputs are removed.
"""

import argparse
import csv
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .adaptive import AdaptConfig
from .cache import CacheConfig, HitState, ReuseCache
from .dataflow import (
    PEArrayConfig,
    insert_queue_conflicts,
    partition_vectors,
    signature_completion_cycles,
    simulate_forward_async,
    simulate_forward_sync,
    simulate_input_stationary,
    simulate_weight_stationary,
)
from .engine import build_channel_hitmap
from .kernels import ConvLayerSpec
from .signatures import gen_projection, uniqueness_experiment
from .training import (
    ModelSpec,
    compare_runs,
    read_dataset,
    synthetic_patch_dataset,
    train,
)

SCHEMA_VERSION = 1


class ConfigFileError(ValueError):
    pass


def _load_config(path, required, optional):
    try:
        with open(path) as fh:
            config = json.load(fh)
    except FileNotFoundError:
        raise ConfigFileError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigFileError(f"config is not valid JSON: {exc}")
    if not isinstance(config, dict):
        raise ConfigFileError("config must be a JSON object")
    version = config.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigFileError(f"schema_version must be {SCHEMA_VERSION}, got {version}")
    allowed = set(required) | set(optional) | {"schema_version"}
    unknown = set(config) - allowed
    if unknown:
        raise ConfigFileError(f"unknown config keys: {sorted(unknown)}")
    missing = set(required) - set(config)
    if missing:
        raise ConfigFileError(f"missing config keys: {sorted(missing)}")
    return config


def _sub_config(obj, name, required, optional):
    if not isinstance(obj, dict):
        raise ConfigFileError(f"{name} must be an object")
    allowed = set(required) | set(optional)
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigFileError(f"unknown keys in {name}: {sorted(unknown)}")
    missing = set(required) - set(obj)
    if missing:
        raise ConfigFileError(f"missing keys in {name}: {sorted(missing)}")
    return obj


def _layer_from_config(obj):
    spec = _sub_config(
        obj, "layer",
        required=("in_channels", "out_channels", "kernel", "input_size"),
        optional=("stride", "padding", "activation"),
    )
    return ConvLayerSpec(
        spec["in_channels"],
        spec["out_channels"],
        tuple(spec["kernel"]),
        tuple(spec["input_size"]),
        spec.get("stride", 1),
        spec.get("padding", 0),
        spec.get("activation", "identity"),
    )


def _pe_from_config(obj):
    if obj is None:
        return PEArrayConfig()
    fields = _sub_config(
        obj, "pe", required=(),
        optional=(
            "pe_count", "pe_set_size", "mac_latency", "cache_read_latency",
            "cache_write_latency", "vd_invalidate_cycles", "hitmap_check_cycles",
            "pipelined_signatures",
        ),
    )
    return PEArrayConfig(**fields)


def _cache_from_config(obj):
    if obj is None:
        return CacheConfig()
    fields = _sub_config(
        obj, "cache", required=(),
        optional=("total_entries", "ways", "versions", "result_width"),
    )
    return CacheConfig(**fields)


def _adapt_from_config(obj):
    if obj is None:
        return AdaptConfig()
    fields = _sub_config(
        obj, "adapt", required=(),
        optional=("initial_n", "flat_iters_k", "loss_flat_tol",
                  "unprofitable_batches_t", "max_n"),
    )
    return AdaptConfig(**fields)


# ---------------------------------------------------------------------------
# output plumbing

class OutputSet:
    """Tracks files written by one command so a failure can remove them."""

    def __init__(self, out_dir):
        self.out_dir = out_dir
        self.paths = []
        os.makedirs(out_dir, exist_ok=True)

    def path(self, name):
        p = os.path.join(self.out_dir, name)
        self.paths.append(p)
        return p

    def discard_all(self):
        for p in self.paths:
            try:
                os.unlink(p)
            except FileNotFoundError:
                pass


def _write_csv(path, config, fieldnames, rows):
    with open(path, "w", newline="") as fh:
        fh.write("# config: " + json.dumps(config, sort_keys=True) + "\n")
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def _write_json(path, config, payload):
    with open(path, "w") as fh:
        json.dump({"config": config, "results": payload}, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# experiment helpers (also driven directly by the acceptance suite)

def tiled_duplicate_plane(spec, duplicate_fraction, seed):
    """Input plane whose stride-aligned windows are disjoint tiles with an
    exact duplicate fraction.  Duplicate positions are spread uniformly over
    the plane (each copies a uniformly chosen earlier tile), so every PE
    set sees roughly the same share of repeats."""
    k1, k2 = spec.kernel
    if spec.stride != k1 or k1 != k2 or spec.padding:
        raise ConfigFileError("duplicate sweeps need stride == kernel and no padding")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7155]))
    oh, ow = spec.out_size
    n = oh * ow
    n_dup = int(round(duplicate_fraction * n))
    dup_positions = set(rng.choice(np.arange(1, n), size=n_dup, replace=False)) if n_dup else set()
    tiles = rng.standard_normal((n, k1, k2)).astype(np.float32)
    plane = np.empty(spec.input_size, dtype=np.float32)
    placed = []
    for idx in range(n):
        if idx in dup_positions:
            tile = placed[int(rng.integers(0, len(placed)))]
        else:
            tile = tiles[idx]
        placed.append(tile)
        r, c = divmod(idx, ow)
        plane[r * k1 : (r + 1) * k1, c * k2 : (c + 1) * k2] = tile
    return plane


_SIMULATORS = {
    "rs": simulate_forward_sync,
    "ws": simulate_weight_stationary,
    "is": simulate_input_stationary,
}


def sweep_point(spec, fraction, pe_cfg, cache_cfg, n_bits, seed, dataflow="rs",
                use_async=False, m_filters=None):
    """One duplicate-fraction sweep point: build the hitmap through the real
    signature/cache path, then price it with the chosen dataflow model."""
    plane = tiled_duplicate_plane(spec, fraction, seed)
    proj = gen_projection(seed, spec.kernel_area, n_bits)
    cache = ReuseCache(cache_cfg)
    sigs, hm, _table = build_channel_hitmap(plane, spec, proj, cache)
    if use_async:
        rep = simulate_forward_async(
            spec, [hm], pe_cfg, n_bits, m_filters or cache_cfg.versions
        )
    else:
        rep = _SIMULATORS[dataflow](spec, [hm], pe_cfg, n_bits)
    counts = hm.counts()
    row = rep.to_dict()
    row["duplicate_fraction"] = fraction
    row["hits"] = counts[HitState.HIT]
    row["maus"] = counts[HitState.MAU]
    row["mnus"] = counts[HitState.MNU]
    # simultaneous MAU inserts from different PE sets serialize per cache
    # set; the drain overlaps the signature pipeline, so report, not charge
    x = spec.kernel[0]
    events = []
    start = 0
    for k in partition_vectors(spec.num_vectors, pe_cfg.pe_sets(x)):
        times = signature_completion_cycles(x, k, n_bits, pe_cfg.pipelined_signatures)
        for v in range(k):
            i = start + v
            if hm.states[i] == HitState.MAU:
                events.append((cache.index_and_tag(sigs[i])[0], times[v]))
        start += k
    events.sort(key=lambda e: e[1])
    delayed, max_delay = insert_queue_conflicts(events)
    row["insert_conflicts"] = delayed
    row["insert_queue_max_delay"] = max_delay
    row["net_speedup"] = (
        rep.baseline_cycles / (rep.total_cycles - rep.signature_cycles)
        if rep.total_cycles > rep.signature_cycles
        else float("inf")
    )
    return row


# disjoint 3x3 tiles (stride == kernel) give exact control over the
# duplicate-window fraction; 96 filters amortize the per-channel signature
# phase the way a real conv layer's filter count does
DEFAULT_SWEEP_LAYER = ConvLayerSpec(1, 96, (3, 3), (102, 102), 3, 0, "identity")


def run_similarity_sweep(spec, fractions, pe_cfg, cache_cfg, n_bits, seed,
                         dataflow="rs", use_async=False, jobs=1):
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(
                pool.map(
                    lambda d: sweep_point(
                        spec, d, pe_cfg, cache_cfg, n_bits, seed, dataflow, use_async
                    ),
                    fractions,
                )
            )
    else:
        rows = [
            sweep_point(spec, d, pe_cfg, cache_cfg, n_bits, seed, dataflow, use_async)
            for d in fractions
        ]
    return rows


# ---------------------------------------------------------------------------
# subcommands

def cmd_rpq_experiment(args):
    config = _load_config(
        args.config,
        required=("experiment", "lengths"),
        optional=("trials", "base_count", "dim", "copies", "epsilon", "seed"),
    )
    seed = args.seed if args.seed is not None else config.get("seed", 0)
    trials = config.get("trials", 10)
    lengths = config["lengths"]
    resolved = dict(config, seed=seed, trials=trials)
    out = OutputSet(args.out)

    def one_trial(t):
        return uniqueness_experiment(
            base_count=config.get("base_count", 10),
            dim=config.get("dim", 10),
            copies=config.get("copies", 10),
            lengths=lengths,
            seed=seed + t,
            epsilon=config.get("epsilon", 1e-4),
        )

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            per_trial = list(pool.map(one_trial, range(trials)))
    else:
        per_trial = [one_trial(t) for t in range(trials)]
    rows = [row for trial in per_trial for row in trial]
    try:
        _write_csv(
            out.path("rpq_experiment.csv"), resolved,
            ["length", "method", "unique_count", "trial_seed"], rows,
        )
    except BaseException:
        out.discard_all()
        raise
    return 0


def cmd_simulate(args):
    config = _load_config(
        args.config,
        required=("experiment",),
        optional=("layer", "duplicate_fractions", "n_bits", "seed",
                  "pe", "cache", "cache_sweep", "m_filters"),
    )
    seed = args.seed if args.seed is not None else config.get("seed", 0)
    spec = _layer_from_config(config["layer"]) if "layer" in config else DEFAULT_SWEEP_LAYER
    pe_cfg = _pe_from_config(config.get("pe"))
    cache_cfg = _cache_from_config(config.get("cache"))
    n_bits = config.get("n_bits", 20)
    fractions = config.get("duplicate_fractions", [0.0, 0.25, 0.5, 0.75])
    if args.no_reuse:
        fractions = [0.0]
    resolved = dict(
        config,
        seed=seed,
        dataflow=args.dataflow,
        use_async=args.use_async,
        n_bits=n_bits,
        duplicate_fractions=list(fractions),
    )
    out = OutputSet(args.out)
    try:
        rows = run_similarity_sweep(
            spec, fractions, pe_cfg, cache_cfg, n_bits, seed,
            dataflow=args.dataflow, use_async=args.use_async, jobs=args.jobs,
        )
        fields = list(rows[0].keys())
        _write_csv(out.path("cycle_breakdown.csv"), resolved, fields, rows)
        _write_json(
            out.path("cycle_report.json"), resolved,
            {"sweep": rows, "speedups": [r["modeled_speedup"] for r in rows]},
        )
        sweep_cfg = config.get("cache_sweep")
        if sweep_cfg:
            sweep_cfg = _sub_config(
                sweep_cfg, "cache_sweep", required=(), optional=("entries", "ways", "fraction")
            )
            frac = sweep_cfg.get("fraction", 0.5)
            sweep_rows = []
            for entries in sweep_cfg.get("entries", [256, 512, 1024]):
                for ways in sweep_cfg.get("ways", [8, 16]):
                    if entries % ways or ((entries // ways) & (entries // ways - 1)):
                        continue
                    row = sweep_point(
                        spec, frac, pe_cfg,
                        CacheConfig(entries, ways, cache_cfg.versions, cache_cfg.result_width),
                        n_bits, seed, args.dataflow, args.use_async,
                    )
                    row.update({"cache_entries": entries, "cache_ways": ways})
                    sweep_rows.append(row)
            _write_csv(
                out.path("cache_sweep.csv"), resolved,
                list(sweep_rows[0].keys()), sweep_rows,
            )
    except BaseException:
        out.discard_all()
        raise
    return 0


def cmd_train(args):
    config = _load_config(
        args.config,
        required=("experiment", "model"),
        optional=("dataset", "adapt", "pe", "cache", "seed"),
    )
    seed = args.seed if args.seed is not None else config.get("seed", 0)
    mcfg = _sub_config(
        config["model"], "model",
        required=("conv_layers", "num_classes"),
        optional=("loss", "learning_rate", "batch_size", "epochs", "fc_block_len"),
    )
    convs = tuple(_layer_from_config(layer) for layer in mcfg["conv_layers"])
    model = ModelSpec(
        conv_layers=convs,
        num_classes=mcfg["num_classes"],
        loss=mcfg.get("loss", "cross_entropy"),
        learning_rate=mcfg.get("learning_rate", 0.05),
        batch_size=mcfg.get("batch_size", 8),
        epochs=mcfg.get("epochs", 5),
        seed=seed,
        fc_block_len=mcfg.get("fc_block_len", 25),
    )
    dcfg = _sub_config(
        config.get("dataset", {}), "dataset", required=(),
        optional=("path", "train_count", "val_count", "noise", "image_size",
                  "patches_per_class", "patch_size"),
    )
    if "path" in dcfg:
        full = read_dataset(dcfg["path"])
        n_val = max(1, len(full) // 5)
        from .training import Dataset

        train_set = Dataset(full.images[:-n_val], full.labels[:-n_val], full.num_classes)
        val_set = Dataset(full.images[-n_val:], full.labels[-n_val:], full.num_classes)
    else:
        kwargs = dict(
            image_size=tuple(dcfg.get("image_size", model.conv_layers[0].input_size)),
            num_classes=model.num_classes,
            noise=dcfg.get("noise", 0.02),
            patches_per_class=dcfg.get("patches_per_class", 2),
            patch_size=dcfg.get("patch_size", 3),
            dict_seed=seed,  # train and validation share the class dictionaries
        )
        train_set = synthetic_patch_dataset(dcfg.get("train_count", 160), seed=seed, **kwargs)
        val_set = synthetic_patch_dataset(dcfg.get("val_count", 40), seed=seed + 1, **kwargs)
    adapt_cfg = _adapt_from_config(config.get("adapt"))
    pe_cfg = _pe_from_config(config.get("pe"))
    cache_cfg = _cache_from_config(config.get("cache"))
    resolved = dict(config, seed=seed, no_reuse=args.no_reuse)
    out = OutputSet(args.out)
    try:
        baseline = train(model, train_set, val_set, reuse_on=False,
                         adapt_config=adapt_cfg, pe_config=pe_cfg, cache_config=cache_cfg)
        reuse_arm = train(model, train_set, val_set, reuse_on=not args.no_reuse,
                        adapt_config=adapt_cfg, pe_config=pe_cfg, cache_config=cache_cfg,
                        force_detection_off=args.no_reuse)
        rows = compare_runs(baseline, reuse_arm)
        _write_csv(
            out.path("run_comparison.csv"), resolved,
            list(rows[0].keys()), rows,
        )
        trace = reuse_arm.adaptation_trace
        _write_csv(out.path("adaptation_trace.csv"), resolved, list(trace[0].keys()), trace)
        summary = {
            "final_baseline_acc": baseline.final_accuracy,
            "final_reuse_acc": reuse_arm.final_accuracy,
            "accuracy_gap": abs(baseline.final_accuracy - reuse_arm.final_accuracy),
            "reuse_cycles": reuse_arm.cycles,
            "baseline_cycles": reuse_arm.baseline_cycles,
            "modeled_speedup": (
                reuse_arm.baseline_cycles / reuse_arm.cycles if reuse_arm.cycles else 1.0
            ),
            "reuse_fraction": reuse_arm.stats.reuse_fraction,
        }
        _write_json(out.path("train_summary.json"), resolved, summary)
    except BaseException:
        out.discard_all()
        raise
    return 0


def cmd_report(args):
    out = OutputSet(args.out)
    rows = []
    for path in args.paths:
        if not os.path.exists(path):
            raise ConfigFileError(f"report input not found: {path}")
        with open(path) as fh:
            payload = json.load(fh)
        results = payload.get("results", {})
        if "modeled_speedup" in results:
            speedup = results["modeled_speedup"]
        elif "speedups" in results:
            speedup = float(np.max(results["speedups"]))
        else:
            raise ConfigFileError(f"no speedup field in {path}")
        rows.append({"run": os.path.basename(path), "speedup": speedup})
    geo = math.exp(sum(math.log(r["speedup"]) for r in rows) / len(rows)) if rows else 1.0
    resolved = {"inputs": list(args.paths), "schema_version": SCHEMA_VERSION}
    try:
        _write_csv(out.path("report.csv"), resolved, ["run", "speedup"], rows)
        _write_json(
            out.path("report.json"), resolved,
            {"runs": rows, "geometric_mean_speedup": geo},
        )
    except BaseException:
        out.discard_all()
        raise
    return 0


# ---------------------------------------------------------------------------

def _build_parser():
    parser = argparse.ArgumentParser(
        prog="reusim",
        description="Signature-reuse accelerator model: experiments and reports",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--jobs", type=int, default=1, help="parallel sweep jobs")

    p = sub.add_parser("rpq-experiment", help="uniqueness counts, RPQ vs Bloom")
    common(p)
    p.set_defaults(func=cmd_rpq_experiment)

    p = sub.add_parser("simulate", help="dataflow cycle reports over sweeps")
    common(p)
    p.add_argument("--dataflow", choices=("rs", "ws", "is"), default="rs")
    p.add_argument("--async", dest="use_async", action="store_true",
                   help="asynchronous PE-set coordination (row-stationary)")
    p.add_argument("--no-reuse", action="store_true",
                   help="baseline only (zero duplicate fraction)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train the baseline and reuse arms")
    common(p)
    p.add_argument("--no-reuse", action="store_true",
                   help="force similarity detection off in the second arm")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("report", help="aggregate run summaries")
    p.add_argument("paths", nargs="+", help="train_summary/cycle_report JSON files")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigFileError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
