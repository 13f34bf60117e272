"""sspslab: a desk-scale lab for pseudo-positive sampling in self-supervised
speaker-verification training.

Submodules:
    synthgen    synthetic speaker/channel corpus, views, trials
    nncore      MLP forward/backward, optimizers, schedules, EMA, checkpoints
    losses      contrastive and self-distillation objectives
    ssps        memory queues, spherical k-means, pseudo-positive selection
    evaluation  trial scoring, EER, minDCF, speaker variance stats
    trainer     end-to-end runs, resume, evaluation, comparison sweeps
"""

from . import evaluation, losses, nncore, ssps, synthgen, trainer
from .evaluation import MetricsReport, compute_eer, compute_min_dcf
from .synthgen import CorpusConfig, build_corpus, build_trials, sample_views
from .trainer import (
    RunConfig,
    default_config,
    load_config,
    resume,
    run_eval,
    run_sweep,
    run_training,
)

__version__ = "0.1.0"

__all__ = [
    "synthgen",
    "nncore",
    "losses",
    "ssps",
    "evaluation",
    "trainer",
    "CorpusConfig",
    "RunConfig",
    "MetricsReport",
    "build_corpus",
    "build_trials",
    "sample_views",
    "compute_eer",
    "compute_min_dcf",
    "default_config",
    "load_config",
    "run_training",
    "run_eval",
    "resume",
    "run_sweep",
    "__version__",
]
