"""Tiny video-segmentation model: encoder, classifier, projection head.

The encoder is three 3x3 convolutions with relu, the first carrying the
full stride, so feature maps live at input/stride resolution. The
classifier and the two-layer projection head are per-pixel 1x1
convolutions; projected pixel vectors are L2-normalized so inner
products are cosine similarities.
"""

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import stfusion
from .diffcore import Tensor
from .errors import ConfigError, FormatError, IncompatibilityError
from .stvd import read_tensor, write_tensor

PROJ_NORM_EPS = 1e-12


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 3
    widths: tuple = (16, 16, 16)
    stride: int = 2
    feat_channels: int = 16
    classes: int = 4
    proj_dim: int = 16
    fusion: str = "stam"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.proj_dim < 2:
            raise ConfigError(f"projection dim must be >= 2, got {self.proj_dim}")
        if self.widths[-1] != self.feat_channels:
            raise ConfigError(
                f"feat_channels {self.feat_channels} must equal last width {self.widths[-1]}")
        if self.fusion not in stfusion.FUSION_KINDS:
            raise ConfigError(f"unknown fusion kind {self.fusion!r}")
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")


def _uniform(rng, shape, fan_in):
    bound = float(np.sqrt(1.0 / fan_in))
    return rng.uniform(-bound, bound, shape)


class SegModel:
    def __init__(self, config, params, seed=0, iteration=0):
        self.config = config
        self.params = params
        self.seed = seed
        self.iteration = iteration

    @staticmethod
    def initialize(config, seed):
        rng = np.random.default_rng([int(seed), 307])
        params = {}
        cin = config.in_channels
        for i, cout in enumerate(config.widths):
            fan = cin * 9
            params[f"enc{i}_w"] = Tensor(_uniform(rng, (cout, cin, 3, 3), fan), requires_grad=True)
            params[f"enc{i}_b"] = Tensor(_uniform(rng, (cout,), fan), requires_grad=True)
            cin = cout
        cf = config.feat_channels
        params["cls_w"] = Tensor(_uniform(rng, (config.classes, cf, 1, 1), cf), requires_grad=True)
        params["cls_b"] = Tensor(_uniform(rng, (config.classes,), cf), requires_grad=True)
        params["proj1_w"] = Tensor(_uniform(rng, (cf, cf, 1, 1), cf), requires_grad=True)
        params["proj1_b"] = Tensor(_uniform(rng, (cf,), cf), requires_grad=True)
        params["proj2_w"] = Tensor(_uniform(rng, (config.proj_dim, cf, 1, 1), cf), requires_grad=True)
        params["proj2_b"] = Tensor(_uniform(rng, (config.proj_dim,), cf), requires_grad=True)
        params.update(stfusion.init_fusion_params(rng, config.fusion, cf))
        return SegModel(config, params, seed=int(seed))

    # -- parameter plumbing -------------------------------------------------

    def param_names(self):
        return list(self.params)

    def trainable_names(self, freeze_classifier=False):
        names = [n for n, t in self.params.items() if t.requires_grad]
        if freeze_classifier:
            names = [n for n in names if not n.startswith("cls_")]
        return names

    def zero_grad(self):
        for tensor in self.params.values():
            tensor.grad = None

    def with_params(self, replacements):
        params = dict(self.params)
        for name, value in replacements.items():
            params[name] = Tensor.as_tensor(value)
        return SegModel(self.config, params, seed=self.seed, iteration=self.iteration)

    def params_view(self):
        return self.params

    def copy_params(self):
        return {name: t.data.copy() for name, t in self.params.items()}

    def restore_params(self, snapshot):
        for name, data in snapshot.items():
            self.params[name].data = data.copy()

    # -- forward pieces -------------------------------------------------------

    def encode(self, frame):
        x = Tensor.as_tensor(frame)
        s = self.config.stride
        if x.shape[1] % s or x.shape[2] % s:
            raise ConfigError(f"frame dims {x.shape[1:]} not divisible by stride {s}")
        for i in range(len(self.config.widths)):
            stride = s if i == 0 else 1
            x = dc.conv2d(x, self.params[f"enc{i}_w"], self.params[f"enc{i}_b"],
                          padding=1, stride=stride).relu()
        return x

    def classify(self, feature):
        return dc.conv2d(feature, self.params["cls_w"], self.params["cls_b"], padding=0)

    def project(self, feature):
        hidden = dc.conv2d(feature, self.params["proj1_w"], self.params["proj1_b"],
                           padding=0).relu()
        emb = dc.conv2d(hidden, self.params["proj2_w"], self.params["proj2_b"], padding=0)
        norm = (emb * emb).sum(axis=0, keepdims=True).sqrt()
        return emb / (norm + PROJ_NORM_EPS)

    def fused_forward(self, seq, frames=None):
        """Standard two-frame pipeline: encode both, warp previous, fuse."""
        frames = seq.frames if frames is None else frames
        z_prev = self.encode(frames[0])
        z_cur = self.encode(frames[1])
        flow = stfusion.downscale_flow(seq.flows[0], self.config.stride)
        warped = stfusion.warp(z_prev, flow)
        return stfusion.fuse(warped, z_cur, self.config.fusion, self.params)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "kind": "stplab-checkpoint",
        "config": asdict(model.config),
        "seed": int(model.seed),
        "iteration": int(model.iteration),
        "params": {name: {"trainable": bool(t.requires_grad)}
                   for name, t in model.params.items()},
    }
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    for name, tensor in model.params.items():
        write_tensor(directory / f"{name}.stvd", tensor.data)
    return directory


def load_checkpoint(directory, expected_config=None):
    directory = Path(directory)
    path = directory / "manifest.json"
    if not path.exists():
        raise FormatError(f"no checkpoint manifest in {directory}")
    with open(path) as fh:
        manifest = json.load(fh)
    if manifest.get("kind") != "stplab-checkpoint":
        raise FormatError(f"{path} is not a checkpoint manifest")
    config = ModelConfig(**manifest["config"])
    if expected_config is not None and config != expected_config:
        stored = asdict(config)
        wanted = asdict(expected_config)
        diffs = [f"{key}: checkpoint={stored[key]!r} requested={wanted[key]!r}"
                 for key in stored if stored[key] != wanted[key]]
        raise IncompatibilityError("checkpoint/config mismatch: " + "; ".join(diffs))
    params = {}
    for name, meta in manifest["params"].items():
        data = read_tensor(directory / f"{name}.stvd")
        params[name] = Tensor(data, requires_grad=bool(meta["trainable"]))
    return SegModel(config, params, seed=manifest["seed"], iteration=manifest["iteration"])


def checkpoint_hash(directory):
    """Stable digest over manifest and parameter payloads."""
    directory = Path(directory)
    digest = hashlib.sha256()
    digest.update((directory / "manifest.json").read_bytes())
    with open(directory / "manifest.json") as fh:
        manifest = json.load(fh)
    for name in sorted(manifest["params"]):
        digest.update((directory / f"{name}.stvd").read_bytes())
    return digest.hexdigest()[:16]
