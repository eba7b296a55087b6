"""Timestep-scheduled asymmetric classifier-free guidance.

The conditional pass runs on the host backbone with gated, windowed adapter
updates injected; the unconditional pass is pinned to the bare host with the
null embedding, so the guidance gap isolates the adapters' effect. The
sampler costs exactly two network evaluations per step, like standard CFG.
"""

import math
from dataclasses import dataclass

import numpy as np

from .adapters import aggregate_weights
from .base import ParamsMixin
from .denoiser import NoiseSchedule, ddpm_step, predict_eps
from .exceptions import ConfigInvalid, OutOfRange
from .prompts import EMB_DIM, encode_semantic, null_embedding, parse_prompt
from .utils import EvalCounter, make_rng
from .validation import as_vector

RAMP_KINDS = ("cosine", "linear")


@dataclass(frozen=True)
class GuidanceConfig:
    """Guidance strength, activation windows and temporal scaling."""

    omega: float = 7.5
    total_steps: int = 50
    content_window: tuple = (1, 35)
    style_window: tuple = (15, 50)
    alpha_min: float = 0.5
    alpha_max: float = 1.0
    ramp: str = "cosine"

    def __post_init__(self):
        if self.omega < 0.0:
            raise ConfigInvalid("omega must be nonnegative")
        if self.total_steps < 1:
            raise ConfigInvalid("total_steps must be positive")
        for label, window in (("content", self.content_window), ("style", self.style_window)):
            lo, hi = window
            if not (1 <= lo <= hi <= self.total_steps):
                raise ConfigInvalid(
                    f"{label} window {window} must lie inside [1, {self.total_steps}]"
                )
        if self.alpha_min > self.alpha_max:
            raise ConfigInvalid("alpha_min must not exceed alpha_max")
        if self.ramp not in RAMP_KINDS:
            raise ConfigInvalid(f"ramp must be one of {RAMP_KINDS}")


def gamma_schedule(t, content_window, style_window):
    """Indicator pair: is each adapter's window active at timestep t."""
    t = int(t)
    gc = 1.0 if content_window[0] <= t <= content_window[1] else 0.0
    gs = 1.0 if style_window[0] <= t <= style_window[1] else 0.0
    return gc, gs


def temporal_alpha(t, config):
    """Smooth gain alpha_min -> alpha_max as sampling proceeds from t=T to 1."""
    t = int(t)
    if not 1 <= t <= config.total_steps:
        raise OutOfRange(f"t must lie in [1, {config.total_steps}], got {t}")
    u = (config.total_steps - t) / config.total_steps
    if config.ramp == "cosine":
        g = 0.5 * (1.0 - math.cos(math.pi * u))
    else:
        g = u
    return config.alpha_min + (config.alpha_max - config.alpha_min) * g


@dataclass
class MlpParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass
class ExpertEncoderParams:
    """Three branch encoders plus the aggregation head emitting (gamma_c, gamma_s).

    The head starts at exactly 1.0 for active branches (zero weights, bias at
    softplus^-1(1)), so the untrained default reproduces marker-presence
    binary gains; a branch fed the null embedding is clamped to zero.
    """

    identity_branch: MlpParams
    content_branch: MlpParams
    style_branch: MlpParams
    id_table: np.ndarray
    head_w: np.ndarray
    head_b: np.ndarray


def _init_branch(rng, dim=EMB_DIM):
    scale = 1.0 / math.sqrt(dim)
    return MlpParams(
        w1=rng.standard_normal((dim, dim)) * scale,
        b1=np.zeros(dim),
        w2=rng.standard_normal((dim, dim)) * scale,
        b2=np.zeros(dim),
    )


def init_expert_encoder(seed=0, n_concepts=16):
    rng = make_rng(seed, "expert-encoder")
    bias = math.log(math.expm1(1.0))  # softplus(bias) == 1
    return ExpertEncoderParams(
        identity_branch=_init_branch(rng),
        content_branch=_init_branch(rng),
        style_branch=_init_branch(rng),
        id_table=rng.standard_normal((n_concepts, EMB_DIM)) / math.sqrt(EMB_DIM),
        head_w=np.zeros((3 * EMB_DIM, 2)),
        head_b=np.full(2, bias),
    )


def _branch(params, x):
    return np.tanh(x @ params.w1 + params.b1) @ params.w2 + params.b2


def _softplus(x):
    return np.logaddexp(0.0, x)


def expert_gammas(params, id_embedding, content_embedding, style_embedding):
    """Nonnegative gains from the three-branch encoder.

    A branch whose text input is the null embedding is forced to zero, which
    keeps absent markers inactive regardless of head training.
    """
    id_emb = np.zeros(EMB_DIM) if id_embedding is None else as_vector(id_embedding, EMB_DIM)
    e_c = np.zeros(EMB_DIM) if content_embedding is None else as_vector(content_embedding, EMB_DIM)
    e_s = np.zeros(EMB_DIM) if style_embedding is None else as_vector(style_embedding, EMB_DIM)
    feats = np.concatenate(
        [
            _branch(params.identity_branch, id_emb),
            _branch(params.content_branch, e_c),
            _branch(params.style_branch, e_s),
        ]
    )
    raw = _softplus(feats @ params.head_w + params.head_b)
    active_c = 1.0 if np.any(e_c) else 0.0
    active_s = 1.0 if np.any(e_s) else 0.0
    return float(raw[0]) * active_c, float(raw[1]) * active_s


def guided_eps_parts(
    x_t,
    t,
    e_sem,
    w_init,
    content_adapter,
    style_adapter,
    gamma_content,
    gamma_style,
    config,
    symmetric=False,
    counter=None,
    weight_cache=None,
):
    """Conditional and unconditional noise predictions at one timestep.

    Effective gains compose multiplicatively: temporal alpha times the
    branch gain times the window indicator. The unconditional pass always
    uses the bare host and the null embedding, except under the symmetric
    ablation which reuses the conditional weights.
    """
    ind_c, ind_s = gamma_schedule(t, config.content_window, config.style_window)
    alpha = temporal_alpha(t, config)
    eff_c = alpha * gamma_content * ind_c if content_adapter is not None else 0.0
    eff_s = alpha * gamma_style * ind_s if style_adapter is not None else 0.0

    if eff_c == 0.0 and eff_s == 0.0:
        w_cond = w_init
    else:
        key = (eff_c, eff_s)
        w_cond = None if weight_cache is None else weight_cache.get(key)
        if w_cond is None:
            w_cond = aggregate_weights(
                w_init,
                content_adapter,
                style_adapter,
                gamma_content=eff_c,
                gamma_style=eff_s,
                e_sem=e_sem,
            )
            if weight_cache is not None:
                weight_cache[key] = w_cond

    eps_cond = predict_eps(x_t, t, e_sem, w_cond, counter)
    w_uncond = w_cond if symmetric else w_init
    eps_uncond = predict_eps(x_t, t, null_embedding(), w_uncond, counter)
    return eps_cond, eps_uncond, (eff_c, eff_s, alpha)


def guided_eps(eps_cond, eps_uncond, omega):
    """The guided estimate, evaluated as (1 + omega) * cond - omega * uncond.

    The evaluation order is fixed so tests can reproduce it bit for bit; at
    omega == 0 the result equals the conditional prediction exactly.
    """
    return (1.0 + omega) * eps_cond - omega * eps_uncond


class GuidedSampler(ParamsMixin):
    """Asymmetric-CFG sampling loop over a host backbone and two adapters.

    ``sample(prompt, seed)`` returns the final clean image. Branch gains
    default to marker presence, can come from an expert encoder, and are
    individually overridable. After a run, ``n_network_evals_`` holds the
    instrumented forward count (always two per step), ``trace_`` the
    per-step diagnostic records and ``trajectory_`` the state sequence when
    recording is enabled.
    """

    def __init__(
        self,
        backbone,
        content_adapter=None,
        style_adapter=None,
        omega=7.5,
        content_window=(1, 35),
        style_window=(15, 50),
        alpha_min=0.5,
        alpha_max=1.0,
        ramp="cosine",
        gamma_content=None,
        gamma_style=None,
        encoder=None,
        concept_id=None,
        symmetric_cfg=False,
        schedule=None,
        clip_x0=(0.0, 1.0),
        record_trajectory=False,
        record_trace=False,
    ):
        self.backbone = backbone
        self.content_adapter = content_adapter
        self.style_adapter = style_adapter
        self.omega = omega
        self.content_window = content_window
        self.style_window = style_window
        self.alpha_min = alpha_min
        self.alpha_max = alpha_max
        self.ramp = ramp
        self.gamma_content = gamma_content
        self.gamma_style = gamma_style
        self.encoder = encoder
        self.concept_id = concept_id
        self.symmetric_cfg = symmetric_cfg
        self.schedule = schedule
        self.clip_x0 = clip_x0
        self.record_trajectory = record_trajectory
        self.record_trace = record_trace

    def _resolve_gammas(self, spec):
        enc_c = enc_s = None
        if self.encoder is not None and (self.gamma_content is None or self.gamma_style is None):
            if self.concept_id is None:
                id_emb = np.zeros(EMB_DIM)
            else:
                id_emb = self.encoder.id_table[int(self.concept_id) % len(self.encoder.id_table)]
            enc_c, enc_s = expert_gammas(
                self.encoder,
                id_emb,
                encode_semantic(spec.content_span),
                encode_semantic(spec.style_span),
            )
        gc = self.gamma_content
        if gc is None:
            gc = enc_c if enc_c is not None else (1.0 if spec.has_content_marker else 0.0)
        gs = self.gamma_style
        if gs is None:
            gs = enc_s if enc_s is not None else (1.0 if spec.has_style_marker else 0.0)
        return float(gc), float(gs)

    @staticmethod
    def _clamp_window(window, total):
        lo = max(1, min(int(window[0]), total))
        hi = max(lo, min(int(window[1]), total))
        return lo, hi

    def sample(self, prompt, seed=0):
        schedule = self.schedule or NoiseSchedule.linear()
        total = schedule.total_steps
        config = GuidanceConfig(
            omega=self.omega,
            total_steps=total,
            content_window=self._clamp_window(self.content_window, total),
            style_window=self._clamp_window(self.style_window, total),
            alpha_min=self.alpha_min,
            alpha_max=self.alpha_max,
            ramp=self.ramp,
        )
        spec = parse_prompt(prompt)
        e_sem = encode_semantic(spec.stripped)
        gamma_content, gamma_style = self._resolve_gammas(spec)

        side = int(math.isqrt(self.backbone.input_dim))
        rng = make_rng(seed, "sample")
        x = rng.standard_normal((side, side))
        counter = EvalCounter()
        weight_cache = {}
        trace = []
        trajectory = [x.copy()] if self.record_trajectory else None

        for t in range(schedule.total_steps, 0, -1):
            eps_cond, eps_uncond, (eff_c, eff_s, alpha) = guided_eps_parts(
                x,
                t,
                e_sem,
                self.backbone,
                self.content_adapter,
                self.style_adapter,
                gamma_content,
                gamma_style,
                config,
                symmetric=self.symmetric_cfg,
                counter=counter,
                weight_cache=weight_cache,
            )
            eps = guided_eps(eps_cond, eps_uncond, self.omega)
            if self.record_trace:
                gap = float(np.linalg.norm(eps_cond - eps_uncond))
                trace.append(
                    f"t={t} gamma_c={eff_c:.9g} gamma_s={eff_s:.9g} "
                    f"alpha={alpha:.9g} guidance_gap={gap:.9g}"
                )
            x = ddpm_step(x, t, eps, schedule, rng, clip_x0=self.clip_x0)
            if trajectory is not None:
                trajectory.append(x.copy())

        self.n_network_evals_ = counter.count
        self.trace_ = trace
        self.trajectory_ = trajectory
        return x


def cfg_sample(
    prompt,
    backbone,
    omega=7.5,
    schedule=None,
    seed=0,
    clip_x0=(0.0, 1.0),
    counter=None,
    trajectory=None,
):
    """Standard classifier-free guidance baseline on fixed weights.

    Shares the seeding and draw conventions with the guided sampler, so with
    zero adapters the two trajectories agree bit for bit.
    """
    schedule = schedule or NoiseSchedule.linear()
    spec = parse_prompt(prompt)
    e_sem = encode_semantic(spec.stripped)
    side = int(math.isqrt(backbone.input_dim))
    rng = make_rng(seed, "sample")
    x = rng.standard_normal((side, side))
    if trajectory is not None:
        trajectory.append(x.copy())
    for t in range(schedule.total_steps, 0, -1):
        eps_cond = predict_eps(x, t, e_sem, backbone, counter)
        eps_uncond = predict_eps(x, t, null_embedding(), backbone, counter)
        eps = guided_eps(eps_cond, eps_uncond, omega)
        x = ddpm_step(x, t, eps, schedule, rng, clip_x0=clip_x0)
        if trajectory is not None:
            trajectory.append(x.copy())
    return x
