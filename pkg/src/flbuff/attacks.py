"""Backdoor attacks: trigger poisoning, DBA splits, scaling, ALIE, adaptive.

All crafting functions are pure and seeded; they return update vectors (or
poisoned arrays) and never mutate their inputs. The adaptive attacker keeps
running-max normalizers across the rounds it participates in, which is the
only cross-round attacker state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import nn
from .defense import EncoderModel, median_bandwidth, mmd2_with_grad
from .defense import normalize_rows as defense_normalize
from .nn import ConfigError, MlpModel, ParamVector

ATTACK_KINDS = ("none", "badnets", "dba", "scaling", "alie", "adaptive")

_SIBLING_TAG = 0x51B1
_CLEAN_TAG = 0xC1EA


class AttackError(RuntimeError):
    """Attack construction failed (degenerate test set, bad trigger, ...)."""


@dataclass(frozen=True)
class TriggerPattern:
    """Fixed feature coordinates overwritten with fixed values."""

    coordinates: tuple[int, ...]
    values: tuple[float, ...]
    target_label: int

    def __post_init__(self):
        if len(self.coordinates) != len(set(self.coordinates)):
            raise ConfigError("trigger coordinates must be unique")
        if len(self.coordinates) != len(self.values):
            raise ConfigError("one value per trigger coordinate required")


def corner_patch_trigger(
    side: int = 28, patch: int = 3, value: float = 1.0, target_label: int = 0
) -> TriggerPattern:
    """Square patch with its top-left corner at (side-patch, side-patch).

    For 28x28 images this is the classic 3x3 block at (24, 24)..(26, 26)
    (excluding the outermost row/column), all pixels set to ``value``.
    """
    base = side - patch - 1
    coords = tuple(
        (base + r) * side + (base + c) for r in range(patch) for c in range(patch)
    )
    return TriggerPattern(coords, (value,) * len(coords), target_label)


def trailing_trigger(
    feature_dim: int, n_coords: int = 9, value: float = 1.0, target_label: int = 0
) -> TriggerPattern:
    """Trigger on the last ``n_coords`` feature coordinates (flat-vector data)."""
    n_coords = min(n_coords, feature_dim)
    coords = tuple(range(feature_dim - n_coords, feature_dim))
    return TriggerPattern(coords, (value,) * len(coords), target_label)


def default_trigger(feature_dim: int, value: float = 1.0, target_label: int = 0) -> TriggerPattern:
    side = math.isqrt(feature_dim)
    if side * side == feature_dim and side >= 8:
        return corner_patch_trigger(side, value=value, target_label=target_label)
    return trailing_trigger(feature_dim, value=value, target_label=target_label)


def apply_trigger(sample: np.ndarray, trigger: TriggerPattern) -> np.ndarray:
    """Copy of the sample(s) with trigger coordinates overwritten.

    Accepts a single feature vector or a (batch, dim) matrix; idempotent.
    """
    out = np.array(sample, dtype=np.float64, copy=True)
    if not trigger.coordinates:
        return out
    dim = out.shape[-1]
    coords = np.asarray(trigger.coordinates)
    if coords.min() < 0 or coords.max() >= dim:
        raise nn.ShapeError(f"trigger coordinate out of range for dim {dim}")
    out[..., coords] = np.asarray(trigger.values)
    return out


def poison_shard(
    features: np.ndarray,
    labels: np.ndarray,
    trigger: TriggerPattern,
    poison_rate: float,
    seed,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Trigger + relabel a seeded ceil(rate * n) subset of a client shard.

    Returns (features, labels, poisoned indices); the rest is untouched.
    """
    if not 0.0 <= poison_rate <= 1.0:
        raise ConfigError("poison_rate must lie in [0, 1]")
    n = len(features)
    count = math.ceil(poison_rate * n)
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(n, size=count, replace=False))
    out_x = np.array(features, dtype=np.float64, copy=True)
    out_y = np.array(labels, copy=True)
    if count:
        out_x[chosen] = apply_trigger(out_x[chosen], trigger)
        out_y[chosen] = trigger.target_label
    return out_x, out_y, chosen


def dba_subtrigger(trigger: TriggerPattern, part_index: int, parts: int) -> TriggerPattern:
    """Contiguous block ``part_index`` of the trigger split into ``parts`` pieces.

    The blocks partition the full trigger (sizes differ by at most one, the
    larger blocks first); evaluation always uses the full trigger.
    """
    if parts < 1:
        raise ConfigError("parts must be >= 1")
    if not 0 <= part_index < parts:
        raise ConfigError("part_index must lie in [0, parts)")
    if parts > len(trigger.coordinates):
        raise ConfigError("more parts than trigger coordinates")
    blocks = np.array_split(np.arange(len(trigger.coordinates)), parts)
    pick = blocks[part_index]
    return TriggerPattern(
        tuple(trigger.coordinates[i] for i in pick),
        tuple(trigger.values[i] for i in pick),
        trigger.target_label,
    )


def make_backdoor_testset(
    features: np.ndarray, labels: np.ndarray, trigger: TriggerPattern
) -> tuple[np.ndarray, np.ndarray]:
    """Triggered evaluation set: drop true-target samples, trigger the rest.

    Every output label equals the attack target, so accuracy on this set is
    exactly the attack success rate.
    """
    keep = labels != trigger.target_label
    if not np.any(keep):
        raise AttackError("backdoor test set is empty: all samples are target class")
    out_x = apply_trigger(features[keep], trigger)
    out_y = np.full(int(keep.sum()), trigger.target_label, dtype=labels.dtype)
    return out_x, out_y


# ---------------------------------------------------------------------------
# Model-space attacks
# ---------------------------------------------------------------------------


def craft_scaling(
    theta: ParamVector, local_backdoored: ParamVector, factor: float
) -> ParamVector:
    """Model-replacement update: scale the backdoored displacement by ``factor``."""
    if factor <= 0:
        raise ConfigError("scaling factor must be > 0")
    return ParamVector(
        factor * (local_backdoored.values - theta.values), theta.layout
    )


def craft_alie(
    benign_mean: ParamVector,
    benign_std: ParamVector,
    backdoor_delta: ParamVector,
    z: float,
) -> ParamVector:
    """Clip the backdoored update into the coordinate-wise benign z-band."""
    nn._check_same_layout(benign_mean, benign_std)
    nn._check_same_layout(benign_mean, backdoor_delta)
    if z < 0:
        raise ConfigError("alie z must be >= 0")
    if np.any(benign_std.values < 0):
        raise ConfigError("benign std must be >= 0 coordinate-wise")
    lo = benign_mean.values - z * benign_std.values
    hi = benign_mean.values + z * benign_std.values
    return ParamVector(np.clip(backdoor_delta.values, lo, hi), benign_mean.layout)


# ---------------------------------------------------------------------------
# Adaptive attack
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdaptiveConfig:
    """Penalty coefficients and step budget of the combined objective."""

    lam: float = 1.0  # weight of the clean-data loss
    rho: float = 1.0  # weight of the normalized update distance
    eta: float = 1.0  # weight of the normalized PLR distance
    inner_steps: int = 50

    def __post_init__(self):
        if min(self.lam, self.rho, self.eta) < 0:
            raise ConfigError("penalty coefficients must be >= 0")
        if not all(map(math.isfinite, (self.lam, self.rho, self.eta))):
            raise ConfigError("penalty coefficients must be finite")
        if self.inner_steps < 1:
            raise ConfigError("inner_steps must be >= 1")


@dataclass
class AdaptiveNormalizers:
    """Running maxima the attacker maintains across its observed rounds.

    Within one round's inner optimization the incoming maxima act as fixed
    normalizers (a distance exceeding them is treated as the new, current
    maximum); the stored values are updated once, after the round.
    """

    max_delta_dist: float = 0.0
    max_plr_dist: float = 0.0


@dataclass(frozen=True)
class AdaptiveProbe:
    """What the attacker can probe the defense with.

    ``features`` is its stand-in for the server's auxiliary set; if it also
    knows the defense encoder, distances are taken between encoded PLR rows
    instead of raw ones.
    """

    features: np.ndarray
    encoder: Optional[EncoderModel] = None


def _child_seed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence([int(seed), tag]).generate_state(1)[0])


def craft_adaptive(
    theta: ParamVector,
    arch,
    mal_features: np.ndarray,
    mal_labels: np.ndarray,
    clean_features: np.ndarray,
    clean_labels: np.ndarray,
    probe: Optional[AdaptiveProbe],
    cfg: AdaptiveConfig,
    opt: nn.OptimizerState,
    epochs: int,
    batch_size: int,
    seed: int,
    normalizers: Optional[AdaptiveNormalizers] = None,
    sibling_opt: Optional[nn.OptimizerState] = None,
) -> ParamVector:
    """Craft an update that implants the backdoor while hugging benign behavior.

    Runs ``inner_steps`` mini-batch descent steps (update rule taken from
    ``opt``) on

        CE(backdoored shard) + lam * CE(clean shard)
        + rho * |delta - delta_ben| / running_max
        + eta * mmd2(own PLRs, sibling PLRs) / running_max

    where ``delta_ben`` comes from a benign-behaving sibling trained on the
    clean shard with ``sibling_opt`` (defaults to ``opt``), i.e. with honest
    client hyperparameters. With all coefficients zero, this is bit-for-bit
    plain backdoor local training under ``opt``.
    """
    if len(mal_features) == 0:
        raise ConfigError("attacker shard is empty")
    normalizers = normalizers if normalizers is not None else AdaptiveNormalizers()
    base_model = nn.unflatten(theta, arch)

    need_sibling = cfg.rho > 0 or cfg.eta > 0
    sibling_delta = None
    sibling_plr = None
    if need_sibling:
        sibling = nn.train_local(
            base_model,
            clean_features,
            clean_labels,
            epochs,
            batch_size,
            sibling_opt if sibling_opt is not None else opt,
            rng_seed=_child_seed(seed, _SIBLING_TAG),
        )
        sibling_delta = nn.flatten(sibling).values - theta.values
        if cfg.eta > 0:
            if probe is None:
                raise ConfigError("eta > 0 requires a probe set")
            _, sibling_plr = nn.forward_with_plr(sibling, probe.features)

    rng = np.random.default_rng(seed)
    rng_clean = np.random.default_rng(_child_seed(seed, _CLEAN_TAG))
    flat = theta.values.copy()
    views = nn._param_views(arch, flat)
    runner = nn._OptRunner(opt, len(flat))
    seen_delta_dist = 0.0
    seen_plr_dist = 0.0

    done = 0
    while done < cfg.inner_steps:
        for idx in nn.minibatch_plan(len(mal_features), batch_size, rng):
            acts = nn._forward_acts(arch, views, mal_features[idx])
            _, dlogits = nn.softmax_cross_entropy(acts[-1], mal_labels[idx])
            grad, _ = nn._backward_flat(arch, views, acts, dlogits)

            if cfg.lam > 0 and len(clean_features) > 0:
                csize = min(batch_size, len(clean_features))
                cidx = rng_clean.choice(len(clean_features), csize, replace=False)
                cacts = nn._forward_acts(arch, views, clean_features[cidx])
                _, cdl = nn.softmax_cross_entropy(cacts[-1], clean_labels[cidx])
                cgrad, _ = nn._backward_flat(arch, views, cacts, cdl)
                grad += cfg.lam * cgrad

            if cfg.rho > 0:
                diff = (flat - theta.values) - sibling_delta
                dist = float(np.linalg.norm(diff))
                seen_delta_dist = max(seen_delta_dist, dist)
                norm = max(normalizers.max_delta_dist, dist)
                if dist > 0 and norm > 0:
                    grad += cfg.rho * diff / (dist * norm)

            if cfg.eta > 0:
                pacts = nn._forward_acts(arch, views, probe.features)
                own_plr = pacts[-2]
                plr_grad, plr_dist = _plr_distance_grad(
                    arch, views, pacts, own_plr, sibling_plr, probe.encoder,
                    normalizers.max_plr_dist,
                )
                seen_plr_dist = max(seen_plr_dist, plr_dist)
                grad += cfg.eta * plr_grad

            runner.step(flat, grad)
            done += 1
            if done >= cfg.inner_steps:
                break
    normalizers.max_delta_dist = max(normalizers.max_delta_dist, seen_delta_dist)
    normalizers.max_plr_dist = max(normalizers.max_plr_dist, seen_plr_dist)
    return ParamVector(flat - theta.values, theta.layout)


def _plr_distance_grad(
    arch, views, pacts, own_plr, sibling_plr, encoder, incoming_max
) -> tuple[np.ndarray, float]:
    """Gradient of the normalized PLR-set distance w.r.t. the model parameters.

    Returns (flat gradient, raw distance); the caller tracks the running max.
    """
    if encoder is not None:
        enc_views = list(zip(encoder.net.weights, encoder.net.biases))
        own_unit = _normalize_with_jacobian(own_plr)
        own_acts = nn._forward_acts(encoder.net.arch, enc_views, own_unit[0])
        a = own_acts[-1]
        b = nn.forward_logits(encoder.net, defense_normalize(sibling_plr))
    else:
        a, b = own_plr, sibling_plr
    h = median_bandwidth(np.vstack([a, b]))
    d_plr, d_a = mmd2_with_grad(a, b, h)
    norm = max(incoming_max, d_plr)
    if norm <= 0:
        return np.zeros(sum(s.in_dim * s.out_dim + s.out_dim for s in arch)), d_plr
    d_a = d_a / norm
    if encoder is not None:
        # chain through the (frozen) encoder and the row normalization
        _, d_a = nn._backward_flat(encoder.net.arch, enc_views, own_acts, d_a)
        units, inv_norms = own_unit
        d_a = (d_a - (d_a * units).sum(axis=1, keepdims=True) * units) * inv_norms
    grad, _ = nn._backward_flat(arch, views, pacts, grad_logits=None, grad_plr=d_a)
    return grad, d_plr


def _normalize_with_jacobian(rows: np.ndarray):
    norms = np.maximum(np.linalg.norm(rows, axis=1, keepdims=True), 1e-12)
    return rows / norms, 1.0 / norms
