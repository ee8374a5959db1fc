"""Masked generative modeling of multi-level token grids ("codegrams").

Training, guided iterative sampling, beam selection, and objective evaluation
for grid-shaped discrete sequences conditioned on feature streams, with
synthetic stand-ins for every pretrained component.
"""

from .codegram import (
    Codegram,
    CodebookSpec,
    EmbeddingTable,
    MaskTensor,
    MaskedCodegram,
    apply_mask,
    embed_sum,
    load_codegram,
    save_codegram,
    unmask,
)
from .features import ConditioningBundle, FeatureStream, build_conditioning, resample_nn
from .model import LogitsGrid, MaskedGridTransformer, ModelConfig, StreamSpec
from .sampler import SamplerConfig, guided_logits, sample, sample_batch
from .scheduler import SampleSchedule, TrainMaskDraw, build_sample_schedule, draw_train_mask
from .train import LossBreakdown, TrainConfig, masked_ce, masked_token_accuracy

__version__ = "0.1.0"

__all__ = [
    "Codegram",
    "CodebookSpec",
    "ConditioningBundle",
    "EmbeddingTable",
    "FeatureStream",
    "LogitsGrid",
    "LossBreakdown",
    "MaskTensor",
    "MaskedCodegram",
    "MaskedGridTransformer",
    "ModelConfig",
    "SampleSchedule",
    "SamplerConfig",
    "StreamSpec",
    "TrainConfig",
    "TrainMaskDraw",
    "apply_mask",
    "build_conditioning",
    "build_sample_schedule",
    "draw_train_mask",
    "embed_sum",
    "guided_logits",
    "load_codegram",
    "masked_ce",
    "masked_token_accuracy",
    "resample_nn",
    "sample",
    "sample_batch",
    "save_codegram",
    "unmask",
    "__version__",
]
