"""Rank-limited backbone fine-tuning.

Per-layer learnable bases are orthonormalized by QR every step; the weights
seen by the loss are the base weights with the learned subspace projected
out, W_l = W0_l - Q_l Q_l^T W0_l. The content pair member supervises only the
content bases and the style member only the style bases; after training the
two subspaces are merged per layer and projected out once to produce the
frozen host for all adapter work.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .base import ParamsMixin
from .denoiser import NoiseSchedule, backward_pass, forward_pass
from .exceptions import (
    ConfigInvalid,
    EmptyBatch,
    NumericalError,
    OutOfRange,
    ShapeMismatch,
)
from .linalg import check_orthonormal, householder_qr, qr_backward
from .prompts import encode_semantic
from .utils import lr_at, make_rng
from .validation import as_matrix


@dataclass(frozen=True)
class RankSchedule:
    """Per-layer subspace width, linear from r_max at layer 1 to r_min at L."""

    r_max: int
    r_min: int
    n_layers: int

    def __post_init__(self):
        if not (self.r_max >= self.r_min >= 1):
            raise ConfigInvalid(f"need r_max >= r_min >= 1, got {self.r_max}, {self.r_min}")
        if self.n_layers < 2:
            raise ConfigInvalid("rank schedules need at least two layers")

    def rank_at(self, layer_index):
        """Rank of the 1-based layer, rounded to nearest (ties up), >= 1."""
        if not 1 <= layer_index <= self.n_layers:
            raise OutOfRange(
                f"layer index must lie in [1, {self.n_layers}], got {layer_index}"
            )
        value = self.r_max - (layer_index - 1) / (self.n_layers - 1) * (self.r_max - self.r_min)
        return max(1, math.floor(value + 0.5))


def rank_at(schedule, layer_index):
    return schedule.rank_at(layer_index)


@dataclass
class SubspaceBases:
    """Learnable per-layer bases, one content and one style matrix each."""

    content: dict = field(default_factory=dict)
    style: dict = field(default_factory=dict)

    def side(self, kind):
        if kind == "content":
            return self.content
        if kind == "style":
            return self.style
        raise ValueError(f"unknown basis kind {kind!r}")

    def copy(self):
        return SubspaceBases(
            content={k: v.copy() for k, v in self.content.items()},
            style={k: v.copy() for k, v in self.style.items()},
        )


def init_bases(backbone, schedule, seed=0, init_scale=0.02):
    """I.i.d. small-uniform bases per layer at the scheduled rank.

    Only the spanned subspace reaches the projection; the entry scale sets
    the optimization geometry (gradients through QR grow as the scale
    shrinks), and 0.02 trains well at desk scale.
    """
    if schedule.n_layers != backbone.n_layers:
        raise ConfigInvalid(
            f"schedule covers {schedule.n_layers} layers, backbone has {backbone.n_layers}"
        )
    rng = make_rng(seed, "bases-init")
    bases = SubspaceBases()
    for idx, (name, w) in enumerate(backbone.items(), start=1):
        r = schedule.rank_at(idx)
        if r > w.shape[0]:
            raise ConfigInvalid(
                f"rank {r} exceeds the {w.shape[0]} input rows of layer {name!r}"
            )
        bases.content[name] = rng.uniform(-init_scale, init_scale, size=(w.shape[0], r))
        bases.style[name] = rng.uniform(-init_scale, init_scale, size=(w.shape[0], r))
    return bases


def merge_subspaces(q_content, q_style):
    """Orthonormal basis of the union span via concatenation and QR.

    Degenerate (dependent) columns are dropped, so identical operands come
    back at their original width and disjoint ones at the summed width.
    """
    q_content = as_matrix(q_content, "q_content")
    q_style = as_matrix(q_style, "q_style")
    if q_content.shape[1] == 0:
        stacked = q_style
    elif q_style.shape[1] == 0:
        stacked = q_content
    else:
        if q_content.shape[0] != q_style.shape[0]:
            raise ShapeMismatch(
                f"row counts differ: {q_content.shape[0]} vs {q_style.shape[0]}"
            )
        stacked = np.hstack([q_content, q_style])
    if stacked.shape[1] == 0:
        return np.zeros((q_content.shape[0], 0))
    q, _ = householder_qr(stacked)
    return q


def apply_rank_limited_update(backbone, q_map):
    """Project each layer onto the complement of its combined subspace.

    ``q_map`` maps layer names to orthonormal matrices; missing or empty
    entries leave the layer untouched. The result is the frozen host for all
    later adapter training.
    """
    unknown = set(q_map) - set(backbone.names)
    if unknown:
        raise ShapeMismatch(f"q_map names unknown layers {sorted(unknown)}")
    updates = {}
    for name, w in backbone.items():
        q = q_map.get(name)
        if q is None:
            continue
        q = as_matrix(q, f"q[{name}]")
        if q.shape[1] == 0:
            continue
        if q.shape[0] != w.shape[0]:
            raise ShapeMismatch(
                f"q for layer {name!r} has {q.shape[0]} rows, weight has {w.shape[0]}"
            )
        check_orthonormal(q, name=f"q[{name}]")
        updates[name] = w - q @ (q.T @ w)
    return backbone.replace(updates)


class PerceptualProxy:
    """Frozen random 3-layer convolutional feature stack.

    Stands in for a pretrained perceptual network at desk scale: same
    L1-over-features form with per-layer element-count normalization, but
    the kernels are seed-initialized and never trained. Convolutions are
    materialized as fixed matrices so the backward pass is a plain matmul.
    """

    def __init__(self, image_size=16, channels=(4, 4, 4), kernel=3, seed=0):
        self.image_size = image_size
        self.channels = tuple(channels)
        self.kernel = kernel
        self.seed = seed
        rng = make_rng(seed, "perceptual-proxy", image_size, kernel, *channels)
        mats = []
        in_ch, in_h, in_w = 1, image_size, image_size
        for out_ch in self.channels:
            out_h, out_w = in_h - kernel + 1, in_w - kernel + 1
            if out_h < 1 or out_w < 1:
                raise ConfigInvalid("image too small for the perceptual stack")
            weights = rng.standard_normal((out_ch, in_ch, kernel, kernel))
            weights /= math.sqrt(kernel * kernel * in_ch)
            mats.append(self._conv_matrix(weights, in_ch, in_h, in_w, out_h, out_w))
            in_ch, in_h, in_w = out_ch, out_h, out_w
        self._mats = mats
        self.layer_sizes = [m.shape[1] for m in mats]

    @staticmethod
    def _conv_matrix(weights, in_ch, in_h, in_w, out_h, out_w):
        out_ch, _, k, _ = weights.shape
        mat = np.zeros((in_ch * in_h * in_w, out_ch * out_h * out_w))
        for oc in range(out_ch):
            for oy in range(out_h):
                for ox in range(out_w):
                    col = (oc * out_h + oy) * out_w + ox
                    for ic in range(in_ch):
                        for ky in range(k):
                            row = (ic * in_h + oy + ky) * in_w + ox
                            mat[row: row + k, col] = weights[oc, ic, ky]
        return mat

    def features(self, x_flat):
        """Per-layer tanh feature maps plus the cache for ``input_grad``."""
        feats = []
        h = np.asarray(x_flat, dtype=np.float64)
        for mat in self._mats:
            h = np.tanh(h @ mat)
            feats.append(h)
        return feats

    def input_grad(self, feats, d_feats):
        """Pull per-layer feature gradients back to the input pixels."""
        upstream = np.zeros_like(feats[-1])
        for j in range(len(self._mats) - 1, -1, -1):
            g = (upstream + d_feats[j]) * (1.0 - feats[j] * feats[j])
            upstream = g @ self._mats[j].T
        return upstream


def _member_weights(backbone, basis_map):
    """Project each layer by its own basis; returns weights and QR caches."""
    updates = {}
    cache = {}
    for name, w in backbone.items():
        b = basis_map[name]
        q, r = householder_qr(b)
        if q.shape[1] != b.shape[1]:
            raise NumericalError(
                f"basis for layer {name!r} lost rank during training"
            )
        updates[name] = w - q @ (q.T @ w)
        cache[name] = (q, r)
    return backbone.replace(updates), cache


def _basis_grads_from_weight_grads(backbone, cache, weight_grads):
    """Chain dLoss/dW through W = W0 - Q Q^T W0 and the QR map to the basis."""
    out = {}
    for name, g in weight_grads.items():
        w0 = backbone.weight(name)
        q, r = cache[name]
        grad_q = -(g @ (w0.T @ q) + w0 @ (g.T @ q))
        out[name] = qr_backward(q, r, grad_q)
    return out


def member_embedding(pair, member):
    """Prompt embedding for one pair member: base prompt plus its modifier."""
    if member == "content":
        return encode_semantic(f"{pair.content_prompt} {pair.style_modifier}")
    return encode_semantic(f"{pair.content_modifier} {pair.style_prompt}")


def trunk_loss(
    backbone,
    bases,
    batch,
    lambda_reg,
    alpha_perc,
    schedule,
    draws,
    perceptual=None,
):
    """Trunk objective and its exact gradients w.r.t. every basis entry.

    For each pair, the clean-image prediction of the projected model is
    compared (L1) to the content-target and to the style-target member,
    each under its member prompt; an optional perceptual term adds
    L1-over-features with per-layer element-count normalization. The
    content member's gradient flows only into the content bases and the
    style member's only into the style bases. The basis Frobenius
    regularizer is added once over both sides.

    ``draws`` supplies one (t, noise) per member per pair so the value is a
    pure function of its arguments (finite-difference checkable).
    """
    if lambda_reg < 0.0 or alpha_perc < 0.0:
        raise ConfigInvalid("lambda_reg and alpha_perc must be nonnegative")
    if len(batch) == 0:
        raise EmptyBatch("trunk loss needs at least one pair")
    if len(draws) != len(batch):
        raise ShapeMismatch("need one draw record per pair")

    grads = {
        "content": {name: np.zeros_like(b) for name, b in bases.content.items()},
        "style": {name: np.zeros_like(b) for name, b in bases.style.items()},
    }
    # the projected weights depend only on the bases, not the pair
    projected = {
        member: _member_weights(backbone, bases.side(member))
        for member in ("content", "style")
    }
    task = 0.0
    n = len(batch)
    for pair, draw in zip(batch, draws):
        for member in ("content", "style"):
            target = pair.content_image if member == "content" else pair.style_image
            t, noise = draw[member]
            emb = member_embedding(pair, member)
            weights, cache = projected[member]

            ab = schedule.alpha_bar(t)
            root_ab = math.sqrt(ab)
            root_1mab = math.sqrt(1.0 - ab)
            target_flat = target.reshape(1, -1)
            z_t = root_ab * target_flat + root_1mab * noise.reshape(1, -1)
            eps, acts = forward_pass(z_t, t, emb[None, :], weights)
            x0_hat = (z_t - root_1mab * eps) / root_ab

            diff = x0_hat - target_flat
            member_loss = float(np.abs(diff).sum())
            d_x0 = np.sign(diff)
            if perceptual is not None and alpha_perc > 0.0:
                feats_pred = perceptual.features(x0_hat)
                feats_ref = perceptual.features(target_flat)
                d_feats = []
                for fp, fr, size in zip(feats_pred, feats_ref, perceptual.layer_sizes):
                    fdiff = fp - fr
                    member_loss += alpha_perc * float(np.abs(fdiff).sum()) / size
                    d_feats.append(np.sign(fdiff) / size)
                d_x0 = d_x0 + alpha_perc * perceptual.input_grad(feats_pred, d_feats)

            task += member_loss
            d_eps = d_x0 * (-root_1mab / root_ab) / n
            weight_grads = backward_pass(acts, weights, d_eps)
            basis_grads = _basis_grads_from_weight_grads(backbone, cache, weight_grads)
            side = grads[member]
            for name, g in basis_grads.items():
                side[name] += g

    loss = task / n
    for kind in ("content", "style"):
        for name, b in bases.side(kind).items():
            loss += lambda_reg * float(np.sum(b * b))
            grads[kind][name] += 2.0 * lambda_reg * b
    return loss, grads


def make_trunk_draws(batch, schedule, rng):
    """One (t, noise) record per member per pair, in pair order."""
    draws = []
    for pair in batch:
        record = {}
        for member in ("content", "style"):
            t = int(rng.integers(1, schedule.total_steps + 1))
            noise = rng.standard_normal(pair.content_image.shape)
            record[member] = (t, noise)
        draws.append(record)
    return draws


class TrunkFinetuner(ParamsMixin):
    """Gradient descent over the per-layer bases with warm-up cosine decay.

    fit(backbone, pairs) -> self. The frozen host (base weights with the
    merged content/style subspaces projected out) lands in ``backbone_``,
    the trained bases in ``bases_``, the merged per-layer orthonormal
    matrices in ``merged_q_`` and the loss curve in ``loss_history_``.
    Deterministic given ``seed``; zero steps projects the initial bases.
    """

    def __init__(
        self,
        r_max=16,
        r_min=4,
        steps=500,
        batch_size=4,
        peak_lr=1e-4,
        start_lr=1e-5,
        floor_lr=5e-6,
        warmup=50,
        lambda_reg=1e-4,
        alpha_perc=0.1,
        init_scale=0.02,
        schedule=None,
        perceptual_seed=0,
        seed=0,
    ):
        self.r_max = r_max
        self.r_min = r_min
        self.steps = steps
        self.batch_size = batch_size
        self.peak_lr = peak_lr
        self.start_lr = start_lr
        self.floor_lr = floor_lr
        self.warmup = warmup
        self.lambda_reg = lambda_reg
        self.alpha_perc = alpha_perc
        self.init_scale = init_scale
        self.schedule = schedule
        self.perceptual_seed = perceptual_seed
        self.seed = seed

    def fit(self, backbone, pairs):
        if len(pairs) < 1:
            raise ConfigInvalid("the pair dataset is empty")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigInvalid("steps must be >= 0 and batch_size >= 1")
        degenerate = [
            p.pair_id for p in pairs if np.array_equal(p.content_image, p.style_image)
        ]
        if degenerate:
            warnings.warn(
                f"pairs {degenerate[:5]} have identical members; both bases will "
                "receive the same supervision signal",
                RuntimeWarning,
                stacklevel=2,
            )
        schedule = self.schedule or NoiseSchedule.linear()
        rank_plan = RankSchedule(self.r_max, self.r_min, backbone.n_layers)
        bases = init_bases(backbone, rank_plan, seed=self.seed, init_scale=self.init_scale)
        image_size = pairs[0].content_image.shape[0]
        perceptual = (
            PerceptualProxy(image_size=image_size, seed=self.perceptual_seed)
            if self.alpha_perc > 0.0
            else None
        )
        rng = make_rng(self.seed, "trunk-train")
        history = []
        for step in range(self.steps):
            lr = lr_at(step, self.steps, self.peak_lr, self.start_lr, self.floor_lr, self.warmup)
            idx = rng.integers(0, len(pairs), size=min(self.batch_size, len(pairs)))
            batch = [pairs[i] for i in idx]
            draws = make_trunk_draws(batch, schedule, rng)
            loss, grads = trunk_loss(
                backbone,
                bases,
                batch,
                self.lambda_reg,
                self.alpha_perc,
                schedule,
                draws,
                perceptual=perceptual,
            )
            if not math.isfinite(loss):
                raise NumericalError(f"trunk loss diverged at step {step}")
            history.append(loss)
            for kind in ("content", "style"):
                side = bases.side(kind)
                for name in side:
                    side[name] = side[name] - lr * grads[kind][name]

        merged = {}
        ranks = {}
        for name in backbone.names:
            q_c, _ = householder_qr(bases.content[name])
            q_s, _ = householder_qr(bases.style[name])
            merged[name] = merge_subspaces(q_c, q_s)
            ranks[name] = merged[name].shape[1]
        self.backbone_ = apply_rank_limited_update(backbone, merged)
        self.bases_ = bases
        self.merged_q_ = merged
        self.merged_ranks_ = ranks
        self.rank_schedule_ = rank_plan
        self.loss_history_ = history
        return self
