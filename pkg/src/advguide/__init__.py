"""Guide-image conditioned adversarial generators and a transferability harness."""

from .baselines import IterAttackConfig, di_fgsm, dr, pgd
from .data import ImageBatch, ManifestDataset, load_image, save_image
from .errors import ConfigError, DataError, InputError, StateError, VersionError
from .evaluation import (
    Aggregates,
    EvalReport,
    aggregate,
    assert_budget,
    emit_report,
    evaluate,
    visualize,
)
from .generator import (
    GeneratorConfig,
    GuidedGenerator,
    SemanticInjection,
    apply_sim,
    load_checkpoint,
    load_generator,
    profile,
    project,
    save_checkpoint,
)
from .guides import GuideEntry, GuidePool, load_guide_manifest, score_rank, select
from .losses import (
    LossConfig,
    targeted_feature_similarity,
    targeted_logit_contrastive,
    targeted_total,
    untargeted_feature_loss,
    untargeted_semantic_injection,
    untargeted_total,
)
from .surrogate import FeatureView, SmallCNN, Surrogate, SurrogateHandle, load_surrogate
from .training import TrainConfig, TrainResult, resume, train

__version__ = "0.1.0"
