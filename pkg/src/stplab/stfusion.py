"""Spatio-temporal feature extraction: flow warping and fusion.

The fusion block stacks the flow-warped previous feature with the
current one and reduces the pair to a single feature map. Besides
elementwise addition, learned 1x1 mixing, and concatenation with a
fixed projection, it offers an attention module that weighs the stack
along the temporal axis (which frame matters per feature map) and the
spatial axes (which pixels matter) before a residual sum over frames.
"""

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ConfigError, DimensionError

FUSION_KINDS = ("add", "conv1x1", "concat", "stam", "identity")

STAM_HIDDEN = 2  # temporal-attention bottleneck width for two-frame stacks
SPATIAL_KERNEL = 7


def downscale_flow(flow, stride):
    """Average-pool a [2,H,W] flow over stride x stride blocks, rescaling magnitudes."""
    flow = np.asarray(flow, dtype=np.float64)
    _, h, w = flow.shape
    s = int(stride)
    if h % s or w % s:
        raise ConfigError(f"downscale_flow: stride {s} does not divide {h}x{w}")
    pooled = flow.reshape(2, h // s, s, w // s, s).mean(axis=(2, 4))
    return pooled / s


def identity_grid(height, width):
    yy, xx = np.mgrid[0:height, 0:width]
    return np.stack([yy, xx]).astype(np.float64)


def warp(feature, flow):
    """Backward-warp a feature map: out(p) = feature(p - flow(p)).

    Zero padding outside the canvas; the flow is a constant, gradients
    reach the feature only.
    """
    feature = Tensor.as_tensor(feature)
    flow = np.asarray(flow, dtype=np.float64)
    if feature.ndim != 3 or flow.shape != (2,) + feature.shape[1:]:
        raise DimensionError(f"warp: feature {feature.shape} vs flow {flow.shape}")
    coords = identity_grid(*feature.shape[1:]) - flow
    return dc.bilinear_sample(feature, coords)


def _uniform(rng, shape, fan_in):
    bound = float(np.sqrt(1.0 / fan_in))
    return rng.uniform(-bound, bound, shape)


def init_stam_params(rng, channels, prefix=""):
    t = 2
    conv_fan = 2 * SPATIAL_KERNEL * SPATIAL_KERNEL
    return {
        prefix + "stam_fc1_w": Tensor(_uniform(rng, (t, STAM_HIDDEN), t), requires_grad=True),
        prefix + "stam_fc1_b": Tensor(_uniform(rng, (STAM_HIDDEN,), t), requires_grad=True),
        prefix + "stam_fc2_w": Tensor(_uniform(rng, (STAM_HIDDEN, t), STAM_HIDDEN), requires_grad=True),
        prefix + "stam_fc2_b": Tensor(_uniform(rng, (t,), STAM_HIDDEN), requires_grad=True),
        prefix + "stam_conv_w": Tensor(_uniform(rng, (1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL), conv_fan),
                                       requires_grad=True),
        prefix + "stam_conv_b": Tensor(_uniform(rng, (1,), conv_fan), requires_grad=True),
    }


def init_fusion_params(rng, kind, channels, prefix="fusion."):
    """Parameters owned by the fusion block, keyed with a name prefix.

    The concat variant uses a fixed (non-trainable) seeded projection so
    it stays a distinct ablation arm from the learned 1x1 mixing.
    """
    if kind not in FUSION_KINDS:
        raise ConfigError(f"unknown fusion kind {kind!r}")
    if kind == "conv1x1":
        fan = 2 * channels
        return {
            prefix + "mix_w": Tensor(_uniform(rng, (channels, 2 * channels, 1, 1), fan),
                                     requires_grad=True),
            prefix + "mix_b": Tensor(_uniform(rng, (channels,), fan), requires_grad=True),
        }
    if kind == "concat":
        fan = 2 * channels
        return {
            prefix + "proj_w": Tensor(_uniform(rng, (channels, 2 * channels, 1, 1), fan)),
            prefix + "proj_b": Tensor(np.zeros(channels)),
        }
    if kind == "stam":
        return init_stam_params(rng, channels, prefix=prefix)
    return {}


def _stam_forward(z, params, prefix=""):
    if z.shape[0] != 2:
        raise ConfigError(f"attention fusion expects a two-frame stack, got T={z.shape[0]}")
    p = {name[len(prefix):]: tensor for name, tensor in params.items()
         if name.startswith(prefix + "stam_")}

    def pooled_vector(kind):
        slots = [dc.pool(z[t], kind, "channel_and_spatial").reshape(1) for t in range(2)]
        return dc.concat(slots, axis=0).reshape(1, 2)

    def shared_fc(vec):
        hidden = dc.linear(vec, p["stam_fc1_w"], p["stam_fc1_b"]).relu()
        return dc.linear(hidden, p["stam_fc2_w"], p["stam_fc2_b"])

    a_tem = (shared_fc(pooled_vector("avg")) + shared_fc(pooled_vector("max"))) \
        .sigmoid().reshape(2, 1, 1, 1)
    m = a_tem * z

    h, w = z.shape[2], z.shape[3]
    spa_in = dc.concat([
        dc.pool(m, "avg", "channel").reshape(1, h, w),
        dc.pool(m, "max", "channel").reshape(1, h, w),
    ], axis=0)
    a_spa = dc.conv2d(spa_in, p["stam_conv_w"], p["stam_conv_b"],
                      padding=SPATIAL_KERNEL // 2).sigmoid().reshape(1, 1, h, w)
    out = a_spa * m + z
    return out, a_tem, a_spa


def stam_apply(z, params, prefix="", reduce_t=True):
    """Temporal then spatial attention over a [2,C,H,W] stack.

    Returns the residual-attended stack summed over the frame axis, or
    the raw [2,C,H,W] stack when reduce_t is false.
    """
    z = Tensor.as_tensor(z)
    out, _, _ = _stam_forward(z, params, prefix=prefix)
    if not reduce_t:
        return out
    return out[0] + out[1]


def stam_attentions(z, params, prefix=""):
    """Numpy attention maps, for range checks and diagnostics."""
    with dc.no_grad():
        _, a_tem, a_spa = _stam_forward(Tensor.as_tensor(z), params, prefix=prefix)
    return a_tem.data, a_spa.data


def fuse(prev_warped, cur, kind, params, prefix="fusion."):
    """Reduce (warped previous, current) features to one [C,H,W] map."""
    prev_warped = Tensor.as_tensor(prev_warped)
    cur = Tensor.as_tensor(cur)
    if kind == "identity":
        return cur
    if prev_warped.shape != cur.shape:
        raise DimensionError(f"fuse: operand shapes {prev_warped.shape} vs {cur.shape}")
    if kind == "add":
        return prev_warped + cur
    if kind == "conv1x1":
        both = dc.concat([prev_warped, cur], axis=0)
        return dc.conv2d(both, params[prefix + "mix_w"], params[prefix + "mix_b"], padding=0)
    if kind == "concat":
        both = dc.concat([prev_warped, cur], axis=0)
        return dc.conv2d(both, params[prefix + "proj_w"], params[prefix + "proj_b"], padding=0)
    if kind == "stam":
        return stam_apply(dc.stack([prev_warped, cur], axis=0), params, prefix=prefix)
    raise ConfigError(f"unknown fusion kind {kind!r}")
