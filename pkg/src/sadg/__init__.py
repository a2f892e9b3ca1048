"""Scale-aligned adversarial domain generalization for image recapture detection, at desk scale."""

from .losses import LossWeights
from .metrics import MetricsReport, auc, hter_at_eer, roc_curve
from .models import DomainDiscriminator, FeatureGenerator, SADGModels, TaskNetwork
from .synth import Corpus, DomainSpec, default_domains, generate_corpus, load_corpus, save_corpus
from .tensor import Tensor, no_grad
from .trainer import TrainConfig, run_training

__all__ = [
    "Corpus", "DomainDiscriminator", "DomainSpec", "FeatureGenerator", "LossWeights", "MetricsReport",
    "SADGModels", "TaskNetwork", "Tensor", "TrainConfig", "auc", "default_domains", "generate_corpus",
    "hter_at_eer", "load_corpus", "no_grad", "roc_curve", "run_training", "save_corpus",
]
__version__ = "0.1.0"
