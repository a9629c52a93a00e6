"""Central finite-difference verification of reverse-mode gradients.

All checks run in float64. Relative error for one element is
|analytic - numeric| / max(1, |analytic|, |numeric|), so near-zero
gradients are judged on absolute error.
"""

from dataclasses import dataclass, field

import numpy as np

from .diffcore import Tensor, no_grad


@dataclass
class GradCheckReport:
    max_rel_err: float = 0.0
    per_input: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    tolerance: float = 1e-4
    passed: bool = True

    def __str__(self):
        state = "PASS" if self.passed else "FAIL"
        return f"{state} max_rel_err={self.max_rel_err:.3e} tol={self.tolerance:.1e}"


def grad_check(fn, inputs, epsilon=1e-5, tolerance=1e-4):
    """Compare fn's reverse-mode gradients against central differences.

    fn maps the given tensors to a scalar Tensor. Every element of every
    input is perturbed by +/-epsilon. Non-finite function values are
    recorded as failures with their location.
    """
    tensors = [Tensor(np.array(t.data if isinstance(t, Tensor) else t, dtype=np.float64),
                      requires_grad=True) for t in inputs]
    loss = fn(*tensors)
    loss.backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    report = GradCheckReport(tolerance=tolerance)
    for idx, t in enumerate(tensors):
        worst = 0.0
        flat = t.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + epsilon
            with no_grad():
                f_plus = fn(*tensors).item()
            flat[j] = orig - epsilon
            with no_grad():
                f_minus = fn(*tensors).item()
            flat[j] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                report.failures.append((idx, j, "non-finite perturbation result"))
                report.passed = False
                continue
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            a = analytic[idx].reshape(-1)[j]
            rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            if rel > worst:
                worst = rel
            if rel > tolerance:
                report.failures.append((idx, j, float(a), float(numeric)))
        report.per_input.append(worst)
        report.max_rel_err = max(report.max_rel_err, worst)
    if report.max_rel_err > tolerance:
        report.passed = False
    return report


def run_gradcheck_suite(n_seeds=10, epsilon=1e-5, tolerance=1e-4):
    """Gradient-check every differentiable operation over several seeds.

    Returns a list of (name, max_rel_err, passed) rows covering the op
    kernel, the fusion block, the contrastive loss, and a full-model
    composite from input frames to the adaptation loss.
    """
    from . import diffcore as dc
    from . import stfusion
    from .contrast import ContrastBatch, contrastive_loss
    from .segnet import ModelConfig, SegModel

    rows = []

    def run(name, case_fn):
        worst = 0.0
        ok = True
        for s in range(n_seeds):
            rng = np.random.default_rng([977, s])
            fn, inputs = case_fn(rng)
            rep = grad_check(fn, inputs, epsilon=epsilon, tolerance=tolerance)
            worst = max(worst, rep.max_rel_err)
            ok = ok and rep.passed
        rows.append((name, worst, ok))

    def vals(rng, *shape):
        return rng.uniform(-1.0, 1.0, shape) + 0.15 * np.sign(rng.standard_normal(shape))

    run("linear", lambda rng: (
        lambda x, w, b: dc.linear(x, w, b).sum(),
        [vals(rng, 3, 4), vals(rng, 4, 5), vals(rng, 5)]))

    run("conv2d", lambda rng: (
        lambda x, k, b: dc.conv2d(x, k, b, padding=1).sum(),
        [vals(rng, 2, 5, 5), vals(rng, 3, 2, 3, 3), vals(rng, 3)]))

    run("conv2d_stride2", lambda rng: (
        lambda x, k, b: dc.conv2d(x, k, b, padding=1, stride=2).sum(),
        [vals(rng, 2, 6, 6), vals(rng, 3, 2, 3, 3), vals(rng, 3)]))

    run("add", lambda rng: (
        lambda a, b: (a + b).sum(), [vals(rng, 2, 3, 4, 4), vals(rng, 2, 3, 4, 4)]))

    run("mul_broadcast_T", lambda rng: (
        lambda a, b: (a * b).sum(), [vals(rng, 2, 1, 1, 1), vals(rng, 2, 3, 4, 4)]))

    run("mul_broadcast_HW", lambda rng: (
        lambda a, b: (a * b).sum(), [vals(rng, 1, 1, 4, 4), vals(rng, 2, 3, 4, 4)]))

    run("relu", lambda rng: (lambda x: x.relu().sum(), [vals(rng, 3, 4, 4)]))
    run("sigmoid", lambda rng: (lambda x: x.sigmoid().sum(), [vals(rng, 3, 4, 4)]))
    run("scale", lambda rng: (lambda x: dc.scale(x, 2.5).sum(), [vals(rng, 3, 4, 4)]))

    def pool_case(rng, kind, axes):
        weight = float(rng.standard_normal()) + 1.5
        return (lambda x: (dc.pool(x, kind, axes) * weight).sum(),
                [vals(rng, 2, 3, 4, 4)])

    for kind in ("avg", "max"):
        for axes in ("spatial", "channel", "channel_and_spatial"):
            run(f"pool_{kind}_{axes}",
                lambda rng, k=kind, a=axes: pool_case(rng, k, a))

    def bilinear_case(rng):
        coords = np.stack([
            rng.uniform(-0.8, 4.8, (5, 5)),
            rng.uniform(-0.8, 4.8, (5, 5)),
        ])
        weights = rng.standard_normal((2, 5, 5))
        return (lambda x: (dc.bilinear_sample(x, coords) * dc.Tensor(weights)).sum(),
                [vals(rng, 2, 5, 5)])

    run("bilinear_sample", bilinear_case)

    def ce_case(rng):
        targets = rng.integers(0, 3, (4, 4))
        mask = rng.uniform(size=(4, 4)) < 0.8
        mask.flat[0] = True
        return (lambda z: dc.softmax_cross_entropy(z, targets, mask),
                [vals(rng, 3, 4, 4)])

    run("softmax_cross_entropy", ce_case)

    def stam_case(rng):
        params = stfusion.init_stam_params(np.random.default_rng(rng.integers(1 << 31)), 3)
        names = sorted(params)

        def fn(z, *flat):
            p = {n: t for n, t in zip(names, flat)}
            return stfusion.stam_apply(z, p).sum()

        return fn, [vals(rng, 2, 3, 4, 4)] + [params[n].data for n in names]

    run("stam_apply", stam_case)

    def contrast_case(rng):
        ids_q = rng.integers(0, 3, 8)
        ids_k = rng.integers(0, 3, 8)

        def fn(q, k):
            batch = ContrastBatch(queries=q, query_ids=ids_q,
                                  keys=k, key_ids=ids_k, tau=0.3)
            return contrastive_loss(batch)

        return fn, [rng.standard_normal((8, 4)), rng.standard_normal((8, 4))]

    run("contrastive_loss", contrast_case)

    def composite_case(rng):
        cfg = ModelConfig(widths=(3, 3, 3), feat_channels=3, classes=3,
                          proj_dim=3, fusion="stam")
        model = SegModel.initialize(cfg, seed=int(rng.integers(1 << 31)))
        names = [n for n in model.param_names() if model.params[n].requires_grad]
        frames = rng.uniform(0.0, 1.0, (2, 3, 8, 8))
        flow = np.zeros((2, 4, 4))
        flow[0] = 1.0
        targets = rng.integers(0, 3, (4, 4))
        mask = np.ones((4, 4), dtype=bool)
        qidx = rng.permutation(16)[:10]
        kidx = rng.permutation(16)[:10]
        qids = rng.integers(0, 3, 10)
        kids = rng.integers(0, 3, 10)

        def fn(*flat):
            m = model.with_params({n: t for n, t in zip(names, flat)})
            z_prev = m.encode(frames[0])
            z_cur = m.encode(frames[1])
            warped = stfusion.warp(z_prev, flow)
            fused = stfusion.fuse(warped, z_cur, m.config.fusion, m.params_view())
            emb = m.project(fused)
            flat_emb = emb.reshape(emb.shape[0], -1).T
            batch = ContrastBatch(queries=flat_emb[qidx], query_ids=qids,
                                  keys=flat_emb[kidx], key_ids=kids, tau=0.3)
            ce = dc.softmax_cross_entropy(m.classify(fused), targets, mask)
            return contrastive_loss(batch) + ce

        return fn, [model.params[n].data for n in names]

    run("model_composite", composite_case)

    return rows
