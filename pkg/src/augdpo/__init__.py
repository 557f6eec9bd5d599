"""Unsupervised preference alignment on a synthetic glyph microworld.

Pipeline: generate a deterministic corpus, pretrain a small autoregressive
policy on it, synthesize preference pairs by answering clean vs. augmented
images, filter equal answers, align with direct preference optimization, and
evaluate everything against exact ground truth.
"""

from .augment import AugmentSpec, NoiseSchedule, apply, diffuse, diffusion_spec, distortion_strength
from .autodiff import Tensor, backward, grad_check, no_grad
from .dpo import (
    DpoConfig,
    TrainLog,
    bt_probability,
    dpo_loss,
    dpo_loss_multi,
    implicit_reward,
    infonce_bridge,
    kl_diagnostic,
    train_dpo,
)
from .evaluate import (
    ConsistencyReport,
    MatchResult,
    accuracy,
    consistency_probe,
    judge_score,
    pairwise_match,
)
from .policy import (
    Policy,
    PolicyConfig,
    SftConfig,
    TokenSequence,
    Tokenizer,
    attach_lora,
    sft_train,
)
from .prefgen import (
    PreferenceDataset,
    PreferenceRecord,
    build_dataset,
    build_multi_negative,
    filter_equal,
    generate_pair,
)
from .world import (
    Episode,
    Question,
    ToyImage,
    WorldConfig,
    generate_corpus,
    ground_truth,
    sample_pairs,
)

__version__ = "0.1.0"
