"""Cross-frame augmentation, confident pseudo-labels, and the
pixel-to-pixel contrastive objectives with their ablation variants.

A query pixel's positives are the same-pseudo-class pixels of the key
feature, its negatives the different-class ones; the loss denominator
holds negatives only, so the value may go negative. Queries with no
positive or no negative are dropped from the mean and counted.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import stfusion
from .diffcore import Tensor
from .errors import ConfigError, ContractError
from .synthvid import VideoSequence, gaussian_blur

OBJECTIVES = ("stpl", "spatial", "temporal", "naive", "duplicate", "selftrain")


@dataclass(frozen=True)
class AugmentSpec:
    """Photometric jitter; pixel positions never move, so confident
    masks stay aligned between a sequence and its augmented copy."""

    blur_max: float = 1.5
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    seed: int = 0

    def __post_init__(self):
        for name in ("blur_max", "brightness", "contrast", "saturation"):
            if getattr(self, name) < 0:
                raise ConfigError(f"AugmentSpec.{name} must be >= 0")


@dataclass
class PseudoLabels:
    classes: np.ndarray  # [H,W] int64 argmax ids
    confidence: np.ndarray  # [H,W] max softmax probability
    mask: np.ndarray  # [H,W] bool confident top-k
    k: float


@dataclass
class ContrastBatch:
    queries: Tensor  # [Nq,D]
    query_ids: np.ndarray
    keys: Tensor  # [Nk,D]
    key_ids: np.ndarray
    tau: float


@dataclass(frozen=True)
class ObjectiveConfig:
    tau: float = 0.07
    k: float = 0.7
    cap_m: int = 256
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    include_positives_in_denominator: bool = False
    per_class_topk: bool = False
    warp_temporal_key: bool = False

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError(f"temperature must be positive, got {self.tau}")


def augment_sequence(seq, spec, seed=None):
    """Blur and color-jitter each frame independently; labels/flows copied.

    Transforms whose range is exactly zero are skipped outright, so a
    zero-range spec returns bit-identical frames.
    """
    rng = np.random.default_rng([int(spec.seed if seed is None else seed), 911])
    frames = seq.frames.copy()
    for t in range(frames.shape[0]):
        frame = frames[t]
        changed = False
        if spec.brightness > 0:
            frame = frame * (1.0 + rng.uniform(-spec.brightness, spec.brightness))
            changed = True
        if spec.contrast > 0:
            factor = 1.0 + rng.uniform(-spec.contrast, spec.contrast)
            mean = frame.mean()
            frame = mean + (frame - mean) * factor
            changed = True
        if spec.saturation > 0:
            factor = 1.0 + rng.uniform(-spec.saturation, spec.saturation)
            grey = frame.mean(axis=0, keepdims=True)
            frame = grey + (frame - grey) * factor
            changed = True
        if spec.blur_max > 0:
            sigma = rng.uniform(0.0, spec.blur_max)
            frame = gaussian_blur(frame, sigma)
            changed = True
        if changed:
            frames[t] = np.clip(frame, 0.0, 1.0)
    labels = None if seq.labels is None else seq.labels.copy()
    return VideoSequence(frames, labels, seq.flows.copy())


def pseudo_labels(logits, k, per_class=False):
    """Argmax classes plus the top-k confident mask.

    Confidence is the max softmax probability. The global mask keeps
    exactly floor(k * H * W) pixels, ties broken by row-major index;
    the per-class variant keeps floor(k * count_c) per predicted class.
    """
    if not 0.0 < k <= 1.0:
        raise ConfigError(f"confident proportion k must be in (0,1], got {k}")
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    zmax = data.max(axis=0, keepdims=True)
    ez = np.exp(data - zmax)
    prob = ez / ez.sum(axis=0, keepdims=True)
    classes = data.argmax(axis=0)
    confidence = np.take_along_axis(prob, classes[None], axis=0)[0]

    mask = np.zeros(confidence.shape, dtype=bool)
    flat_conf = confidence.reshape(-1)
    if per_class:
        flat_cls = classes.reshape(-1)
        for c in np.unique(flat_cls):
            members = np.flatnonzero(flat_cls == c)
            keep = int(np.floor(k * members.size))
            if keep:
                order = members[np.argsort(-flat_conf[members], kind="stable")]
                mask.reshape(-1)[order[:keep]] = True
    else:
        keep = int(np.floor(k * flat_conf.size))
        order = np.argsort(-flat_conf, kind="stable")
        mask.reshape(-1)[order[:keep]] = True
    return PseudoLabels(classes=classes, confidence=confidence, mask=mask, k=k)


def build_pairs(query_emb, key_emb, pseudo, cap_m=256, seed=0, tau=0.07):
    """Select confident pixels from both embedding maps into a batch.

    The same pixel subset (per class, capped at cap_m by seeded uniform
    subsampling) indexes queries and keys, so class ids coincide.
    Returns None when no pixel is confident.
    """
    sel = np.flatnonzero(pseudo.mask.reshape(-1))
    if sel.size == 0:
        return None
    ids = pseudo.classes.reshape(-1)[sel]
    chosen = []
    for c in np.unique(ids):
        members = sel[ids == c]
        if members.size > cap_m:
            rng = np.random.default_rng([int(seed), int(c), 677])
            members = np.sort(rng.choice(members, size=cap_m, replace=False))
        chosen.append(members)
    pixels = np.concatenate(chosen)

    def gather(emb):
        emb = Tensor.as_tensor(emb)
        flat = emb.reshape(emb.shape[0], -1)
        return flat[:, pixels].T

    batch_ids = pseudo.classes.reshape(-1)[pixels]
    return ContrastBatch(queries=gather(query_emb), query_ids=batch_ids,
                         keys=gather(key_emb), key_ids=batch_ids, tau=tau)


def _pair_counts(batch):
    pos = batch.query_ids[:, None] == batch.key_ids[None, :]
    return pos, pos.sum(axis=1), (~pos).sum(axis=1)


def contrastive_loss(batch, include_positives_in_denominator=False):
    """Multi-positive pixel contrast at temperature tau.

    Per query: minus the mean over positives of log(exp(s+)/sum over the
    denominator set of exp(s-)), stabilized by subtracting the row max
    inside the log-sum-exp. The denominator holds negatives only unless
    the compatibility flag adds the positives.
    """
    if batch.tau <= 0:
        raise ConfigError(f"temperature must be positive, got {batch.tau}")
    pos_mask, n_pos, n_neg = _pair_counts(batch)
    contributing = np.flatnonzero((n_pos > 0) & (n_neg > 0))
    if contributing.size == 0:
        warnings.warn("contrastive_loss: no query has both positives and negatives")
        return Tensor(0.0)

    queries = Tensor.as_tensor(batch.queries)[contributing]
    sims = (queries @ Tensor.as_tensor(batch.keys).T) * (1.0 / batch.tau)
    pos = pos_mask[contributing]
    denom = np.ones_like(pos) if include_positives_in_denominator else ~pos

    row_max = np.where(denom, sims.data, -np.inf).max(axis=1)
    shifted = (sims - Tensor(row_max[:, None])).exp() * Tensor(denom.astype(np.float64))
    lse = shifted.sum(axis=1).log() + Tensor(row_max)
    pos_mean = (sims * Tensor(pos.astype(np.float64))).sum(axis=1) \
        * Tensor(1.0 / pos.sum(axis=1))
    per_query = lse - pos_mean
    return per_query.fsum() * (1.0 / contributing.size)


def _pixel_contrast(model, feat_q, feat_k, cfg, seed):
    with dc.no_grad():
        logits = model.classify(feat_q.detach())
    pseudo = pseudo_labels(logits, cfg.k, per_class=cfg.per_class_topk)
    batch = build_pairs(model.project(feat_q), model.project(feat_k), pseudo,
                        cap_m=cfg.cap_m, seed=seed, tau=cfg.tau)
    info = {"skipped_queries": 0, "n_queries": 0, "empty_batch": batch is None}
    if batch is None:
        return None, info
    _, n_pos, n_neg = _pair_counts(batch)
    contributing = int(((n_pos > 0) & (n_neg > 0)).sum())
    info["n_queries"] = int(batch.query_ids.size)
    info["skipped_queries"] = info["n_queries"] - contributing
    if contributing == 0:
        info["empty_batch"] = True
        return None, info
    loss = contrastive_loss(batch, cfg.include_positives_in_denominator)
    return loss, info


def objective_loss(model, seq, objective, cfg, seed=0):
    """Adaptation loss for one sequence under the selected objective.

    Returns (loss, info); loss is None when no confident pair exists and
    the step should be skipped. Pseudo-labels always come from the
    original (non-augmented) forward pass without gradient tracking.
    """
    if objective not in OBJECTIVES:
        raise ConfigError(f"unknown objective {objective!r}")
    if seq.num_frames != 2:
        raise ContractError(f"adaptation expects two-frame sequences, got T={seq.num_frames}")

    if objective == "stpl":
        fused_q = model.fused_forward(seq)
        augmented = augment_sequence(seq, cfg.augment, seed=seed)
        fused_k = model.fused_forward(augmented)
        return _pixel_contrast(model, fused_q, fused_k, cfg, seed)

    if objective == "spatial":
        z_cur = model.encode(seq.frames[1])
        augmented = augment_sequence(seq, cfg.augment, seed=seed)
        z_key = model.encode(augmented.frames[1])
        return _pixel_contrast(model, z_cur, z_key, cfg, seed)

    if objective == "temporal":
        z_cur = model.encode(seq.frames[1])
        z_key = model.encode(seq.frames[0])
        if cfg.warp_temporal_key:
            flow = stfusion.downscale_flow(seq.flows[0], model.config.stride)
            z_key = stfusion.warp(z_key, flow)
        return _pixel_contrast(model, z_cur, z_key, cfg, seed)

    if objective == "naive":
        spa_loss, spa_info = objective_loss(model, seq, "spatial", cfg, seed)
        tem_loss, tem_info = objective_loss(model, seq, "temporal", cfg, seed)
        info = {k: spa_info[k] + tem_info[k] for k in ("skipped_queries", "n_queries")}
        info["empty_batch"] = spa_info["empty_batch"] and tem_info["empty_batch"]
        if spa_loss is None and tem_loss is None:
            return None, info
        if spa_loss is None:
            return tem_loss, info
        if tem_loss is None:
            return spa_loss, info
        return spa_loss + tem_loss, info

    if objective == "duplicate":
        z_cur = model.encode(seq.frames[1])
        return _pixel_contrast(model, z_cur, z_cur, cfg, seed)

    # vanilla self-training
    fused = model.fused_forward(seq)
    logits = model.classify(fused)
    pseudo = pseudo_labels(logits.detach(), cfg.k, per_class=cfg.per_class_topk)
    n_confident = int(pseudo.mask.sum())
    info = {"skipped_queries": 0, "n_queries": n_confident,
            "empty_batch": n_confident == 0}
    if n_confident == 0:
        return None, info
    loss = dc.softmax_cross_entropy(logits, pseudo.classes, pseudo.mask)
    return loss, info
