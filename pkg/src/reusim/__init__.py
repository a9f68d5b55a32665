"""reusim: functional and cycle-approximate model of a DNN training
accelerator that skips similar dot products.

Input vectors are hashed to short bit signatures by sign-quantized random
projection; a set-associative, no-replacement cache maps signatures to
previously computed dot products, and a per-vector Hitmap steers each PE
set to reuse, compute-and-fill, or just compute.  The package provides the
reference kernels, the signature machinery, the cache protocol, functional
reuse execution, PE-array timing models, the adaptive controller, a
desk-scale trainer, and a CLI for running the experiments.
"""

from .adaptive import AdaptConfig, AdaptState, analytic_baseline_cycles
from .cache import CacheConfig, HitState, Hitmap, InsertQueue, ProtocolError, ReuseCache
from .dataflow import (
    CycleReport,
    PEArrayConfig,
    analytic_backward_baseline,
    analytic_forward_baseline,
    analytic_fc_baseline,
    partition_vectors,
    signature_phase_cycles,
    simulate_backward,
    simulate_forward_async,
    simulate_forward_sync,
    simulate_input_stationary,
    simulate_weight_stationary,
)
from .engine import (
    BackwardResult,
    LayerSignatureStore,
    ReuseStats,
    StoredLayerMaps,
    backward_conv_with_reuse,
    build_channel_hitmap,
    forward_attention_with_reuse,
    forward_conv_with_reuse,
    forward_fc_with_reuse,
    load_store,
    save_store,
)
from .kernels import (
    AttentionSpec,
    ConfigError,
    ConvLayerSpec,
    FCLayerSpec,
    ShapeError,
    attention_forward,
    conv2d_forward,
    conv2d_input_grad,
    conv2d_weight_grad,
    extract_input_vectors,
    fc_forward,
    tensor,
)
from .signatures import (
    ProjectionMatrix,
    Signature,
    SignatureTable,
    bloom_signature,
    gen_projection,
    sign_quantize,
    signature_of,
    signatures_via_convolution,
    uniqueness_experiment,
)
from .training import (
    Dataset,
    ModelSpec,
    TrainResult,
    compare_runs,
    evaluate,
    read_dataset,
    synthetic_patch_dataset,
    train,
    write_dataset,
)

__version__ = "0.1.0"
