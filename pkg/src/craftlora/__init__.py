"""craftlora: desk-scale content/style adapter toolkit.

Rank-limited backbone projection, frequency-split contrastive pairs,
disjoint-layer low-rank adapters with prompt routing, and asymmetric
classifier-free guidance on a small trainable diffusion denoiser.
"""

from .adapters import (
    LayerRouting,
    LoraAdapter,
    LoraTrainer,
    adapter_loss,
    aggregate_weights,
    decoupled_update,
    default_routing,
    make_adapter,
)
from .denoiser import (
    Backbone,
    DenoiserTrainer,
    NoiseSchedule,
    ddpm_step,
    forward_noise,
    init_backbone,
    predict_eps,
    predict_x0,
)
from .frequency import FrequencyMask, freq_mask_filter, gaussian_lowpass, style_residual
from .guidance import (
    ExpertEncoderParams,
    GuidanceConfig,
    GuidedSampler,
    cfg_sample,
    expert_gammas,
    gamma_schedule,
    guided_eps,
    guided_eps_parts,
    init_expert_encoder,
    temporal_alpha,
)
from .linalg import householder_qr, low_rank_update, project_out, qr_backward
from .metrics import (
    EvalReport,
    ImageFeatureExtractor,
    content_preservation,
    cross_influence,
    separation_score,
    sigma_sweep,
    style_fidelity,
)
from .pairs import (
    ContrastPair,
    filtered_denoise_step,
    generate_pair_dataset,
    load_dataset,
    save_dataset,
)
from .prompts import PromptSpec, encode_semantic, null_embedding, parse_prompt
from .subspace import (
    RankSchedule,
    SubspaceBases,
    TrunkFinetuner,
    apply_rank_limited_update,
    init_bases,
    merge_subspaces,
    rank_at,
    trunk_loss,
)

__version__ = "0.1.0"

__all__ = [
    "Backbone",
    "ContrastPair",
    "DenoiserTrainer",
    "EvalReport",
    "ExpertEncoderParams",
    "FrequencyMask",
    "GuidanceConfig",
    "GuidedSampler",
    "ImageFeatureExtractor",
    "LayerRouting",
    "LoraAdapter",
    "LoraTrainer",
    "NoiseSchedule",
    "PromptSpec",
    "RankSchedule",
    "SubspaceBases",
    "TrunkFinetuner",
    "adapter_loss",
    "aggregate_weights",
    "apply_rank_limited_update",
    "cfg_sample",
    "content_preservation",
    "cross_influence",
    "ddpm_step",
    "decoupled_update",
    "default_routing",
    "encode_semantic",
    "expert_gammas",
    "filtered_denoise_step",
    "forward_noise",
    "freq_mask_filter",
    "gamma_schedule",
    "gaussian_lowpass",
    "generate_pair_dataset",
    "guided_eps",
    "guided_eps_parts",
    "householder_qr",
    "init_backbone",
    "init_bases",
    "init_expert_encoder",
    "load_dataset",
    "low_rank_update",
    "make_adapter",
    "merge_subspaces",
    "null_embedding",
    "parse_prompt",
    "predict_eps",
    "predict_x0",
    "project_out",
    "qr_backward",
    "rank_at",
    "save_dataset",
    "separation_score",
    "sigma_sweep",
    "style_fidelity",
    "style_residual",
    "temporal_alpha",
    "trunk_loss",
]
