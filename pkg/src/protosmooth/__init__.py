"""Certified l2 robustness for nearest-prototype classifiers via randomized smoothing
of unit-norm embeddings."""

__version__ = "0.1.0"

from .certification import (
    ABSTAIN,
    CertificationResult,
    SmoothingConfig,
    certify,
    closest_prototype,
    distance_interval,
    embedding_risk_lower_bound,
    failure_probabilities,
    hoeffding_halfwidth,
)
from .embedding import (
    CircleModel,
    ConstantModel,
    FileBackedModel,
    MlpModel,
    MlpSpec,
    NoiseAugmentation,
    StepModel,
    embed,
    embed_vjp,
    load_model,
    save_model,
    smoothed_oracle,
    train_mlp,
)
from .geometry import (
    PrototypeSet,
    certified_radius,
    classify,
    compute_prototypes,
    embedding_risk,
    lipschitz_constant,
)
from .smoothing import NoiseStream, mean_embedding, paired_square_estimate, sample_noise
