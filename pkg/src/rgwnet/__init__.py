"""Rational Gaussian wavelet convolution networks for acoustic drone detection."""

from .audio import (
    DatasetManifest,
    ManifestEntry,
    Segment,
    SynthRecipe,
    build_dataset,
    load_wav,
    parse_manifest,
    segment_signal,
    synthesize,
    write_wav,
)
from .network import (
    Adam,
    EvalReport,
    Network,
    TrainConfig,
    build_baseline,
    build_network,
    cross_validate,
    evaluate,
    forward,
    load_checkpoint,
    loss,
    save_checkpoint,
    train_step,
)
from .transform import (
    FeatureMap,
    PooledFeatures,
    standardize,
    topq_pool,
    transform_backward,
    transform_forward,
    wavelet_transform,
)
from .wavelet import (
    SampledKernel,
    WaveletParams,
    eval_mother,
    kernel_jacobian,
    sample_kernel,
)

__all__ = [
    "Adam", "DatasetManifest", "EvalReport", "FeatureMap", "ManifestEntry",
    "Network", "PooledFeatures", "SampledKernel", "Segment", "SynthRecipe",
    "TrainConfig", "WaveletParams", "build_baseline", "build_dataset",
    "build_network", "cross_validate", "eval_mother", "evaluate", "forward",
    "kernel_jacobian", "load_checkpoint", "load_wav", "loss", "parse_manifest",
    "sample_kernel", "save_checkpoint", "segment_signal", "standardize",
    "synthesize", "topq_pool", "train_step", "transform_backward",
    "transform_forward", "wavelet_transform", "write_wav",
]

__version__ = "0.1.0"
