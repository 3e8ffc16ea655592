"""Private federated LoRA fine-tuning at desk scale.

Streaming per-cell gradient statistics, a synthetic-gradient codec trained
from those statistics alone, a clip/noise/aggregate/decode release pipeline,
dual GDP and RDP privacy accounting, and a deterministic federated simulator
with a CLI over all of it.
"""

from .accounting import (
    AccountantReport,
    AccountantRow,
    PrivacyParams,
    TraceRow,
    build_report,
    calibrate_sigma,
    gdp_delta,
    gdp_epsilon,
    gdp_mu,
    gdp_tradeoff,
    rdp_epsilons,
    rdp_subsampled,
)
from .codec import (
    CodecArch,
    CodecModel,
    IdentityCodec,
    build_codec,
    sample_synthetic,
    train_codec,
)
from .config import (
    AccountantConfig,
    PayloadSpec,
    RunConfig,
    apply_overrides,
    codec_fingerprint,
    load_config,
    parse_config,
)
from .errors import (
    ConfigError,
    InfeasibleBudgetError,
    MissingArtifactError,
    StatsFormatError,
    TrainingDivergedError,
)
from .fedsim import (
    FedConfig,
    FedRunRecord,
    FedSimulator,
    GradientLogEntry,
    PretrainResult,
    RoundRecord,
    pretrain,
)
from .lora import LoraGrad, clip_factor, lowrank_product
from .mechanism import (
    MechanismPipeline,
    NoiseSpec,
    noise_factor,
    run_pipeline,
    sensitivity_probe,
)
from .stats import (
    EstimatorHyper,
    GridShape,
    StatsBundle,
    deserialize_stats,
    ingest_epoch,
    serialize_stats,
)
from .toytask import ToyModel, ToyTask, ToyTaskSpec, make_toy_task

__version__ = "0.1.0"

__all__ = [
    "AccountantConfig",
    "AccountantReport",
    "AccountantRow",
    "CodecArch",
    "CodecModel",
    "ConfigError",
    "EstimatorHyper",
    "FedConfig",
    "FedRunRecord",
    "FedSimulator",
    "GradientLogEntry",
    "GridShape",
    "IdentityCodec",
    "InfeasibleBudgetError",
    "LoraGrad",
    "MechanismPipeline",
    "MissingArtifactError",
    "NoiseSpec",
    "PayloadSpec",
    "PretrainResult",
    "PrivacyParams",
    "RoundRecord",
    "RunConfig",
    "StatsBundle",
    "StatsFormatError",
    "ToyModel",
    "ToyTask",
    "ToyTaskSpec",
    "TraceRow",
    "TrainingDivergedError",
    "apply_overrides",
    "build_codec",
    "build_report",
    "calibrate_sigma",
    "clip_factor",
    "codec_fingerprint",
    "deserialize_stats",
    "gdp_delta",
    "gdp_epsilon",
    "gdp_mu",
    "gdp_tradeoff",
    "ingest_epoch",
    "load_config",
    "lowrank_product",
    "make_toy_task",
    "noise_factor",
    "parse_config",
    "pretrain",
    "rdp_epsilons",
    "rdp_subsampled",
    "run_pipeline",
    "sample_synthetic",
    "sensitivity_probe",
    "serialize_stats",
    "train_codec",
    "__version__",
]
