"""Evaluation and feature-space analysis.

mIoU follows the confusion-matrix definition with two conventions: a
class absent from both prediction and ground truth is excluded from the
mean, while a class predicted but absent from the labels contributes an
IoU of zero. Temporal consistency is the percentage of pixels whose
predicted class agrees between successive raw prediction maps.
"""

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from . import diffcore as dc
from . import stfusion
from .errors import ConfigError, ContractError, DimensionError


def confusion_matrix(preds, labels, classes):
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise DimensionError(f"miou: preds {preds.shape} vs labels {labels.shape}")
    if preds.max(initial=0) >= classes or labels.max(initial=0) >= classes:
        raise ConfigError(f"class ids must be < {classes}")
    idx = labels.reshape(-1).astype(np.int64) * classes + preds.reshape(-1).astype(np.int64)
    return np.bincount(idx, minlength=classes * classes).reshape(classes, classes)


def miou_from_confusion(confusion):
    classes = confusion.shape[0]
    per_class = []
    present = []
    for c in range(classes):
        inter = confusion[c, c]
        union = confusion[c, :].sum() + confusion[:, c].sum() - inter
        if union == 0:
            per_class.append(None)  # absent from both prediction and labels
            continue
        iou = float(inter) / float(union)
        per_class.append(iou)
        present.append(iou)
    return per_class, float(np.mean(present)) if present else 0.0


def miou(preds, labels, classes):
    """Per-class IoU list (None where the class is absent from both) and its mean."""
    return miou_from_confusion(confusion_matrix(preds, labels, classes))


def temporal_consistency(preds):
    """Mean percentage of pixels keeping their class across successive frames."""
    preds = np.asarray(preds)
    if preds.ndim != 3 or preds.shape[0] < 2:
        raise ContractError(f"temporal_consistency needs [T>=2,H,W], got {preds.shape}")
    agree = [float((preds[t] == preds[t + 1]).mean()) for t in range(preds.shape[0] - 1)]
    return 100.0 * float(np.mean(agree))


@dataclass
class FeatureAnalysisSet:
    embeddings: np.ndarray  # [N,D]
    class_ids: np.ndarray  # [N]
    per_class_target: int
    seed: int


def knn_purity(analysis_set, k_values, distance="euclidean"):
    """For each k: mean percentage of same-class points among the k nearest.

    The query is excluded from its own neighborhood; ties in distance
    break by point index. Cosine distance is available behind a flag and
    orders identically for unit-norm embeddings.
    """
    points = np.asarray(analysis_set.embeddings, dtype=np.float64)
    ids = np.asarray(analysis_set.class_ids)
    n = points.shape[0]
    for k in k_values:
        if not 0 < k < n:
            raise ConfigError(f"k={k} must be in (0, {n})")
    if distance == "euclidean":
        sq = (points * points).sum(axis=1)
        dists = sq[:, None] + sq[None, :] - 2.0 * (points @ points.T)
    elif distance == "cosine":
        dists = 1.0 - points @ points.T
    else:
        raise ConfigError(f"unknown distance {distance!r}")
    np.fill_diagonal(dists, np.inf)
    order = np.argsort(dists, axis=1, kind="stable")
    same = ids[order] == ids[:, None]
    curve = {}
    for k in sorted(k_values):
        curve[int(k)] = 100.0 * float(same[:, :k].mean())
    return curve


def class_variances(analysis_set):
    """(sigma_intra, sigma_inter) of the embedding set.

    Intra: mean over classes of the mean squared distance to the class
    centroid. Inter: mean squared distance of class centroids to the
    centroid of centroids.
    """
    points = np.asarray(analysis_set.embeddings, dtype=np.float64)
    ids = np.asarray(analysis_set.class_ids)
    unique = np.unique(ids)
    if unique.size < 2:
        raise ContractError("class_variances needs at least two classes")
    centroids = []
    intra = []
    for c in unique:
        members = points[ids == c]
        if members.shape[0] < 2:
            raise ContractError(f"class {c} has fewer than two points")
        centroid = members.mean(axis=0)
        centroids.append(centroid)
        intra.append(float(((members - centroid) ** 2).sum(axis=1).mean()))
    centroids = np.stack(centroids)
    global_centroid = centroids.mean(axis=0)
    inter = float(((centroids - global_centroid) ** 2).sum(axis=1).mean())
    return float(np.mean(intra)), inter


@dataclass
class MetricsReport:
    per_class_iou: list
    miou: float
    temporal_consistency: float
    classes: int
    sequences: int
    seed: int = 0
    purity: dict | None = None
    sigma_intra: float | None = None
    sigma_inter: float | None = None
    config: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "per_class_iou": self.per_class_iou,
            "miou": self.miou,
            "temporal_consistency": self.temporal_consistency,
            "classes": self.classes,
            "sequences": self.sequences,
            "seed": self.seed,
            "purity": self.purity,
            "sigma_intra": self.sigma_intra,
            "sigma_inter": self.sigma_inter,
            "config": self.config,
        }

    @staticmethod
    def from_dict(payload):
        data = dict(payload)
        if data.get("purity") is not None:
            data["purity"] = {int(k): v for k, v in data["purity"].items()}
        return MetricsReport(**data)


# ---------------------------------------------------------------------------
# model evaluation
# ---------------------------------------------------------------------------

def predict_sequence(model, seq):
    """Per-frame class maps at input resolution.

    Frame 0 runs the fused pipeline against a duplicate of itself under
    zero flow; frame t>=1 fuses the warped previous feature. Argmax maps
    are nearest-neighbor upsampled back to frame size.
    """
    stride = model.config.stride
    preds = []
    with dc.no_grad():
        feats = [model.encode(frame) for frame in seq.frames]
        for t in range(seq.num_frames):
            if t == 0:
                zero_flow = np.zeros((2,) + feats[0].shape[1:])
                warped = stfusion.warp(feats[0], zero_flow)
                fused = stfusion.fuse(warped, feats[0], model.config.fusion, model.params)
            else:
                flow = stfusion.downscale_flow(seq.flows[t - 1], stride)
                warped = stfusion.warp(feats[t - 1], flow)
                fused = stfusion.fuse(warped, feats[t], model.config.fusion, model.params)
            logits = model.classify(fused)
            small = logits.data.argmax(axis=0)
            preds.append(np.repeat(np.repeat(small, stride, axis=0), stride, axis=1))
    return np.stack(preds)


def evaluate_model(model, sequences, seed=0, config_echo=None):
    """Dataset-level report: one confusion matrix over every frame,
    temporal consistency averaged over sequences."""
    classes = model.config.classes
    confusion = np.zeros((classes, classes), dtype=np.int64)
    consistencies = []
    for seq in sequences:
        if seq.labels is None:
            raise ConfigError("evaluation needs labeled sequences")
        preds = predict_sequence(model, seq)
        confusion += confusion_matrix(preds, seq.labels, classes)
        consistencies.append(temporal_consistency(preds))
    per_class, mean_iou = miou_from_confusion(confusion)
    return MetricsReport(
        per_class_iou=per_class,
        miou=mean_iou,
        temporal_consistency=float(np.mean(consistencies)),
        classes=classes,
        sequences=len(sequences),
        seed=seed,
        config=config_echo or {},
    )


def build_analysis_set(model, sequences, per_class=500, seed=0):
    """Collect projected pixel embeddings per ground-truth class.

    Embeddings come from the fused current-frame feature; the class of a
    feature pixel is the nearest-neighbor downsampled label. Classes
    with fewer than the requested count keep all their pixels (logged).
    """
    stride = model.config.stride
    buckets = {}
    with dc.no_grad():
        for seq in sequences:
            if seq.labels is None:
                raise ConfigError("analysis needs labeled sequences")
            fused = model.fused_forward(seq)
            emb = model.project(fused).data
            labels = seq.labels[1][stride // 2::stride, stride // 2::stride]
            flat_emb = emb.reshape(emb.shape[0], -1).T
            flat_lab = labels.reshape(-1)
            for c in np.unique(flat_lab):
                buckets.setdefault(int(c), []).append(flat_emb[flat_lab == c])
    embeddings = []
    ids = []
    for c in sorted(buckets):
        pool = np.concatenate(buckets[c])
        if pool.shape[0] > per_class:
            rng = np.random.default_rng([int(seed), c, 193])
            keep = np.sort(rng.choice(pool.shape[0], size=per_class, replace=False))
            pool = pool[keep]
        elif pool.shape[0] < per_class:
            warnings.warn(f"analysis set: class {c} has only {pool.shape[0]} pixels")
        embeddings.append(pool)
        ids.append(np.full(pool.shape[0], c))
    return FeatureAnalysisSet(np.concatenate(embeddings), np.concatenate(ids),
                              per_class_target=per_class, seed=seed)


# ---------------------------------------------------------------------------
# report emission
# ---------------------------------------------------------------------------

def svg_line_chart(series, path, title="", x_label="", y_label=""):
    """Minimal SVG 1.1 line chart, one polyline per series."""
    width, height, pad = 640, 400, 56
    xs = [x for points in series.values() for x, _ in points]
    ys = [y for points in series.values() for _, y in points]
    if not xs:
        raise ConfigError("svg_line_chart: no data")
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    x_span = (x_hi - x_lo) or 1.0
    y_span = (y_hi - y_lo) or 1.0

    def sx(x):
        return pad + (x - x_lo) / x_span * (width - 2 * pad)

    def sy(y):
        return height - pad - (y - y_lo) / y_span * (height - 2 * pad)

    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
        f'width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="24" text-anchor="middle" '
        f'font-size="15">{escape(title)}</text>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" '
        f'y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2:.1f}" y="{height - 12}" text-anchor="middle" '
        f'font-size="12">{escape(x_label)}</text>',
        f'<text x="16" y="{height / 2:.1f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 16 {height / 2:.1f})">{escape(y_label)}</text>',
    ]
    for i, (name, points) in enumerate(series.items()):
        color = palette[i % len(palette)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in points)
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
                     f'points="{coords}"/>')
        parts.append(f'<text x="{width - pad + 4}" y="{pad + 16 * i + 10}" font-size="11" '
                     f'fill="{color}">{escape(str(name))}</text>')
    parts.append("</svg>")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(parts))
    return path


def emit_report(report, out_dir):
    """Write report.json plus CSV tables and, when present, the purity chart."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    json_path = out_dir / "report.json"
    with open(json_path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
    written.append(json_path)

    iou_path = out_dir / "per_class_iou.csv"
    with open(iou_path, "w", newline="") as fh:
        fh.write("class,iou\n")
        for c, iou in enumerate(report.per_class_iou):
            value = "" if iou is None else repr(float(iou))
            fh.write(f"{c},{value}\n")
    written.append(iou_path)

    if report.purity is not None:
        purity_path = out_dir / "purity.csv"
        with open(purity_path, "w", newline="") as fh:
            fh.write("k,purity_percent\n")
            for k in sorted(report.purity):
                fh.write(f"{k},{repr(float(report.purity[k]))}\n")
        written.append(purity_path)
        chart = svg_line_chart(
            {"purity": [(k, report.purity[k]) for k in sorted(report.purity)]},
            out_dir / "purity.svg",
            title="Same-class fraction among k nearest neighbors",
            x_label="k", y_label="purity (%)")
        written.append(chart)
    return written


def loss_curve_chart(series, path):
    """SVG of one or more (iteration, loss) training curves."""
    cleaned = {}
    for name, rows in series.items():
        pts = [(it, loss) for it, loss in rows if math.isfinite(loss)]
        if pts:
            cleaned[name] = pts
    return svg_line_chart(cleaned, path, title="Training loss",
                          x_label="iteration", y_label="loss")
