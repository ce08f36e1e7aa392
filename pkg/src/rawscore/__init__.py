"""Raw-data-aware image compression scoring toolkit.

Scores how much a lossy codec shifts supervised-learning predictions
relative to the acquisition noise floor: synthetic raw-equivalent
replicates give each prediction parameter a spread sigma, and a
processed image's shift is reported as epsilon = (chi_raw - chi_c) /
sigma with |epsilon| < 1 reading "tolerable".
"""

from rawscore.backend import get_backend, numba_enabled, set_backend, set_num_threads
from rawscore.calib import NoiseModel, fit_noise_model, sigma_of, simulate_calibration_bench
from rawscore.codec import (
    CodecResult,
    downsample_16_to_8,
    find_jpeg_quality,
    jpeg_roundtrip,
    noisenorm_decode,
    noisenorm_encode,
    noisenorm_roundtrip,
    upsample_8_to_16,
)
from rawscore.imgio import ImageStack, PhantomSpec, generate_phantom, read_stack, write_stack
from rawscore.mlseg import (
    FeatureRecipe,
    LabelScribbles,
    PixelClassifier,
    classifier_from_json,
    classifier_to_json,
    compute_features,
    predict_proba,
    threshold_mask,
    train_classifier,
)
from rawscore.morph import (
    GlobalParams,
    LabeledObjects,
    global_params,
    label_components,
    measure_objects,
)
from rawscore.pipeline import PipelineConfig, demo_config, run_pipeline
from rawscore.score import (
    MatchResult,
    ParamSample,
    averaged_scores,
    build_report,
    delta_distribution,
    match_objects,
    operator_scores,
    per_object_scores,
    predictive_uncertainty,
    report_from_json,
    report_to_json,
    standard_score,
    validate_report,
)
from rawscore.synth import SynthSpec, generate_raw_equivalents
from rawscore.tomo import Sinogram, fbp_reconstruct, forward_radon, reconstruct_stack

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "get_backend",
    "set_backend",
    "numba_enabled",
    "set_num_threads",
    "NoiseModel",
    "fit_noise_model",
    "sigma_of",
    "simulate_calibration_bench",
    "CodecResult",
    "downsample_16_to_8",
    "upsample_8_to_16",
    "jpeg_roundtrip",
    "find_jpeg_quality",
    "noisenorm_encode",
    "noisenorm_decode",
    "noisenorm_roundtrip",
    "ImageStack",
    "PhantomSpec",
    "generate_phantom",
    "read_stack",
    "write_stack",
    "FeatureRecipe",
    "LabelScribbles",
    "PixelClassifier",
    "compute_features",
    "train_classifier",
    "predict_proba",
    "threshold_mask",
    "classifier_to_json",
    "classifier_from_json",
    "LabeledObjects",
    "GlobalParams",
    "label_components",
    "measure_objects",
    "global_params",
    "PipelineConfig",
    "demo_config",
    "run_pipeline",
    "ParamSample",
    "MatchResult",
    "predictive_uncertainty",
    "standard_score",
    "match_objects",
    "delta_distribution",
    "per_object_scores",
    "operator_scores",
    "averaged_scores",
    "build_report",
    "report_to_json",
    "report_from_json",
    "validate_report",
    "SynthSpec",
    "generate_raw_equivalents",
    "Sinogram",
    "forward_radon",
    "fbp_reconstruct",
    "reconstruct_stack",
]
