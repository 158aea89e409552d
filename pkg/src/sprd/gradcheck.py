"""Central finite-difference checks of the recorded vector-Jacobian products."""
from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import ConvParams, Tensor


@dataclass
class GradReport:
    max_rel_error: float
    tol: float
    errors: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute deviation over the larger of the two gradients' max-norms."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def numeric_grad(f: Callable, x: Tensor, eps: float = 1e-6, coords=None) -> np.ndarray:
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    with T.no_grad():
        for i in idx:
            old = flat[i]
            flat[i] = old + eps
            fp = float(f().data)
            flat[i] = old - eps
            fm = float(f().data)
            flat[i] = old
            gflat[i] = (fp - fm) / (2 * eps)
    return grad


def finite_diff_check(f: Callable, inputs, eps: float = 1e-6, tol: float = 1e-5,
                      max_coords: int | None = None, rng=None) -> GradReport:
    """Compare ``backward()`` of scalar ``f()`` with central differences.

    ``inputs`` are the tensors perturbed in place (all must be float64 for
    the comparison to mean anything).  With ``max_coords`` only a random
    subset of each input's coordinates is differenced.
    """
    inputs = list(inputs)
    for x in inputs:
        x.grad = None
        x.requires_grad = True
    out = f()
    if out.data.size != 1:
        raise ValueError(f"finite_diff_check needs a scalar function, got shape {out.shape}")
    out.backward()
    rng = rng or np.random.default_rng(0)
    errors = {}
    worst = 0.0
    for k, x in enumerate(inputs):
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
        coords = None
        if max_coords is not None and x.data.size > max_coords:
            coords = np.sort(rng.choice(x.data.size, max_coords, replace=False))
        numeric = numeric_grad(f, x, eps, coords)
        if coords is not None:
            analytic = analytic.reshape(-1)[coords]
            numeric = numeric.reshape(-1)[coords]
        err = relative_error(analytic, numeric)
        errors[x.name or f"input{k}"] = err
        worst = max(worst, err)
    return GradReport(worst, tol, errors)


# ---------------------------------------------------------------------------
# randomized cases for every differentiable op


def _t(rng, *shape, name=None, away_from_zero=False):
    a = rng.normal(size=shape)
    if away_from_zero:
        a = np.where(np.abs(a) < 0.1, np.sign(a + 1e-12) * (0.1 + rng.random(shape)), a)
    return Tensor(a.astype(np.float64), requires_grad=True, name=name)


def _probe(out_fn, rng):
    """Scalarise ``out_fn()`` against a fixed random cotangent."""
    probe = {}

    def f():
        out = out_fn()
        if "r" not in probe:
            probe["r"] = Tensor(rng.normal(size=out.shape))
        return T.sum(T.mul(out, probe["r"]))

    return f


def _conv_case(rng):
    k = int(rng.integers(1, 4))
    d = int(rng.choice([1, 2]))
    s = int(rng.choice([1, 2]))
    pad = int(rng.integers(0, 3))
    n, ci, co = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
    ext = d * (k - 1) + 1
    h = int(rng.integers(max(ext - 2 * pad, 1), max(ext - 2 * pad, 1) + 4))
    w = int(rng.integers(max(ext - 2 * pad, 1), max(ext - 2 * pad, 1) + 4))
    x = _t(rng, n, ci, h, w, name="x")
    wt = _t(rng, co, ci, k, k, name="w")
    b = _t(rng, co, name="b")
    p = ConvParams(wt, b, s, pad, d)
    return _probe(lambda: T.conv2d(x, p), rng), [x, wt, b]


def _deconv_case(rng):
    k = int(rng.integers(1, 4))
    s = int(rng.choice([1, 2]))
    pad = int(rng.integers(0, k))
    n, ci, co = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
    h, w = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    while T.conv_transpose_output_size(min(h, w), k, s, pad) < 1:
        h, w = h + 1, w + 1
    x = _t(rng, n, ci, h, w, name="x")
    wt = _t(rng, ci, co, k, k, name="w")
    b = _t(rng, co, name="b")
    p = ConvParams(wt, b, s, pad, 1)
    return _probe(lambda: T.conv2d_transpose(x, p), rng), [x, wt, b]


def _depthwise_case(rng):
    c, k = int(rng.integers(1, 4)), int(rng.choice([1, 3]))
    x = _t(rng, 1, c, int(rng.integers(3, 6)), int(rng.integers(3, 6)), name="x")
    wt = _t(rng, c, 1, k, k, name="w")
    b = _t(rng, c, name="b")
    p = ConvParams(wt, b, 1, k // 2, 1)
    return _probe(lambda: T.depthwise_conv2d(x, p), rng), [x, wt, b]


def _separable_case(rng):
    c, co = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    x = _t(rng, 1, c, int(rng.integers(3, 6)), int(rng.integers(3, 6)), name="x")
    dw = ConvParams(_t(rng, c, 1, 3, 3, name="dw"), _t(rng, c, name="dwb"), 1, 1, 1)
    pw = ConvParams(_t(rng, co, c, 1, 1, name="pw"), _t(rng, co, name="pwb"))
    return _probe(lambda: T.separable_conv2d(x, dw, pw), rng), [x, dw.weight, dw.bias, pw.weight, pw.bias]


def _shape(rng):
    return (int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 5)), int(rng.integers(1, 5)))


def _binary_case(op):
    def case(rng):
        s = _shape(rng)
        a, b = _t(rng, *s, name="a"), _t(rng, *s, name="b")
        return _probe(lambda: op(a, b), rng), [a, b]
    return case


def _unary_case(op, away_from_zero=False):
    def case(rng):
        a = _t(rng, *_shape(rng), name="a", away_from_zero=away_from_zero)
        return _probe(lambda: op(a), rng), [a]
    return case


def _concat_case(rng):
    n, h, w = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
    parts = [_t(rng, n, int(rng.integers(1, 4)), h, w, name=f"p{i}") for i in range(int(rng.integers(1, 4)))]
    return _probe(lambda: T.concat_channels(parts), rng), parts


def _slice_case(rng):
    a = _t(rng, 1, 5, 3, 3, name="a")
    lo = int(rng.integers(0, 4))
    hi = int(rng.integers(lo + 1, 6))
    return _probe(lambda: T.slice_channels(a, lo, hi), rng), [a]


def _nearest_case(rng):
    a = _t(rng, *_shape(rng), name="a")
    f = int(rng.integers(1, 5))
    return _probe(lambda: T.upsample_nearest(a, f), rng), [a]


def _bilinear_case(rng):
    a = _t(rng, *_shape(rng), name="a")
    oh, ow = int(rng.integers(1, 9)), int(rng.integers(1, 9))
    return _probe(lambda: T.upsample_bilinear(a, oh, ow), rng), [a]


def _gather_case(rng):
    n, c, h, w = _shape(rng)
    a = _t(rng, n, c, h, w, name="a")
    m = int(rng.integers(1, 6))
    ni, yi, xi = rng.integers(0, n, m), rng.integers(0, h, m), rng.integers(0, w, m)
    return _probe(lambda: T.gather_pixels(a, ni, yi, xi), rng), [a]


def _take_channel_case(rng):
    m, k = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    a = _t(rng, m, k, 3, 3, name="a")
    ch = rng.integers(0, k, m)
    return _probe(lambda: T.take_channel(a, ch), rng), [a]


def _take_rows_case(rng):
    r, c = int(rng.integers(2, 7)), int(rng.integers(1, 5))
    a = _t(rng, r, c, name="a")
    rows = rng.integers(0, r, int(rng.integers(1, 8)))
    return _probe(lambda: T.take_rows(a, rows), rng), [a]


def _reshape_transpose_case(rng):
    a = _t(rng, *_shape(rng), name="a")
    axes = tuple(rng.permutation(4))
    return _probe(lambda: T.reshape(T.transpose(a, axes), (-1,)), rng), [a]


def _focal_case(rng):
    from .losses import focal_loss
    r, k = int(rng.integers(2, 8)), int(rng.integers(1, 4))
    x = _t(rng, r, k, name="logits")
    cls = rng.integers(-1, k, r)
    valid = rng.random(r) > 0.2
    gamma = float(rng.choice([0.0, 1.0, 2.0, 2.5]))
    return (lambda: focal_loss(x, cls, valid, 0.25, gamma)), [x]


def _smooth_l1_case(rng):
    from .losses import smooth_l1_loss
    beta = float(rng.choice([1 / 9, 0.5, 1.0]))
    pred = _t(rng, int(rng.integers(1, 5)), 4, name="pred")
    target = pred.data - rng.normal(size=pred.shape)
    d = pred.data - target
    target = np.where(np.abs(np.abs(d) - beta) < 1e-3, target + 0.01, target)
    return (lambda: smooth_l1_loss(pred, target, beta)), [pred]


def _bce_case(rng):
    from .losses import bce_with_logits
    x = _t(rng, int(rng.integers(1, 4)), 1, 4, 4, name="logits")
    t = (rng.random(x.shape) > 0.5).astype(np.float64)
    return (lambda: bce_with_logits(x, t)), [x]


def _gate_case(rng):
    from .backbone import GateParams, gate_fuse
    c = int(rng.integers(1, 4))
    s = (1, c, int(rng.integers(2, 5)), int(rng.integers(2, 5)))
    a, b = _t(rng, *s, name="a"), _t(rng, *s, name="b")
    g = GateParams(ConvParams(_t(rng, c, 1, 3, 3, name="dw"), _t(rng, c, name="dwb"), 1, 1, 1),
                   ConvParams(_t(rng, c, c, 1, 1, name="pw"), _t(rng, c, name="pwb")))
    return _probe(lambda: gate_fuse(a, b, g, "gfpn"), rng), [a, b] + g.parameters()


def redraw_parameters(store, rng) -> None:
    """Fan-in scaled weights and non-zero biases, so no relu input is exactly 0."""
    for p in store.params.values():
        fan_in = max(1, p.data.size // p.shape[0]) if p.ndim > 1 else 4
        p.data = rng.normal(0.0, 1.0 / np.sqrt(fan_in), p.shape).astype(p.data.dtype)


def _store_case(build):
    """Case whose parameters live in a fresh float64 store.

    Parameters are redrawn at fan-in scale: the 0.01-std output init would
    otherwise shrink upstream gradients to where difference noise dominates.
    """
    def case(rng):
        from .optim import ParamStore
        store = ParamStore(seed=int(rng.integers(1 << 30)), dtype=np.float64)
        x, fn = build(rng, store)
        with T.no_grad():
            fn()
        redraw_parameters(store, rng)
        return _probe(fn, rng), [x] + [store[n] for n in store.names()]
    return case


def _lateral(rng, store):
    from .backbone import lateral_project
    x = _t(rng, 1, int(rng.integers(1, 5)), int(rng.integers(1, 5)), int(rng.integers(1, 5)), name="x")
    width = int(rng.integers(1, 4))
    return x, lambda: lateral_project(x, width, store, "lat")


def _head(rng, store):
    from .heads import HeadConfig, box_head_forward, class_head_forward
    c = int(rng.integers(1, 4))
    cfg = HeadConfig(c, int(rng.integers(0, 3)), int(rng.integers(1, 3)), int(rng.integers(1, 3)), 0.01)
    x = _t(rng, 1, c, int(rng.integers(1, 4)), int(rng.integers(1, 4)), name="x")
    return x, lambda: T.concat_channels([class_head_forward(x, cfg, store), box_head_forward(x, cfg, store)])


def _fusion(rng, store):
    from .maskbranch import FUSION_KINDS, FusionConfig, fuse_multiscale
    c = int(rng.integers(1, 3))
    cfg = FusionConfig(str(rng.choice(FUSION_KINDS)), c, 2, 1, (2, 4, 6))
    x = _t(rng, 1, c, int(rng.integers(2, 5)), int(rng.integers(2, 5)), name="x")
    return x, lambda: fuse_multiscale(x, cfg, store)


def _decoder(rng, store):
    from .maskbranch import DecoderConfig, reconstruct_mask
    cin = int(rng.integers(1, 4))
    cfg = DecoderConfig(cin, tuple(int(v) for v in rng.integers(1, 3, 3)), (1, 1), int(rng.integers(1, 3)),
                        bool(rng.integers(2)))
    x = _t(rng, int(rng.integers(1, 3)), cin, 1, 1, name="pixel")
    return x, lambda: reconstruct_mask(x, cfg, store)


def _mask_bce_case(rng):
    from .losses import mask_bce_loss
    m, k = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    x = _t(rng, m, k, 4, 4, name="logits")
    targets = rng.random((m, 4, 4)) > 0.5
    ids = rng.integers(0, k, m)
    return (lambda: mask_bce_loss(x, targets, ids)), [x]


OPS: dict = {
    "conv2d": _conv_case,
    "conv2d_transpose": _deconv_case,
    "depthwise_conv2d": _depthwise_case,
    "separable_conv2d": _separable_case,
    "add": _binary_case(T.add),
    "mul": _binary_case(T.mul),
    "sigmoid": _unary_case(T.sigmoid),
    "relu": _unary_case(T.relu, away_from_zero=True),
    "concat_channels": _concat_case,
    "slice_channels": _slice_case,
    "upsample_nearest": _nearest_case,
    "upsample_nearest2x": _unary_case(T.upsample_nearest2x),
    "upsample_bilinear": _bilinear_case,
    "gather_pixels": _gather_case,
    "take_channel": _take_channel_case,
    "take_rows": _take_rows_case,
    "reshape_transpose": _reshape_transpose_case,
    "focal_loss": _focal_case,
    "smooth_l1_loss": _smooth_l1_case,
    "bce_with_logits": _bce_case,
    "mask_bce_loss": _mask_bce_case,
    "gate_fuse": _gate_case,
    "lateral_project": _store_case(_lateral),
    "head_towers": _store_case(_head),
    "fuse_multiscale": _store_case(_fusion),
    "reconstruct_mask": _store_case(_decoder),
}


KINK_MARGIN = 1e-4


@contextmanager
def _relu_watch():
    """Record the smallest |pre-activation| seen by any relu inside the block."""
    seen = [np.inf]
    orig = T.relu

    def watched(x):
        if x.data.size:
            seen[0] = min(seen[0], float(np.abs(x.data).min()))
        return orig(x)

    T.relu = watched
    try:
        yield seen
    finally:
        T.relu = orig


def _draw(name, rng, tries=50):
    # redraw cases whose relus sit within KINK_MARGIN of the kink, where
    # central differences straddle the non-differentiable point
    for _ in range(tries):
        f, inputs = OPS[name](rng)
        with _relu_watch() as seen, T.no_grad():
            f()
        if seen[0] >= KINK_MARGIN:
            return f, inputs
    raise RuntimeError(f"{name}: no case clear of the relu kink after {tries} draws")


def check_op(name: str, trials: int = 100, tol: float = 1e-5, eps: float = 1e-6, seed: int = 0) -> GradReport:
    if name not in OPS:
        raise KeyError(f"unknown op {name!r}; known: {', '.join(OPS)}")
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    worst = 0.0
    with T.verification_mode():
        for _ in range(trials):
            f, inputs = _draw(name, rng)
            worst = max(worst, finite_diff_check(f, inputs, eps, tol).max_rel_error)
    return GradReport(worst, tol, {name: worst})


def network_gradcheck(tol: float = 1e-4, eps: float = 1e-6, seed: int = 0, max_coords: int | None = None,
                      tries: int = 50) -> GradReport:
    """Loss gradient of the whole network on a one-image micro configuration.

    Seeds are walked from ``seed`` until the scene yields mask targets and
    every relu pre-activation clears ``KINK_MARGIN``.
    """
    from .config import micro_config
    from .data import SceneSpec, synth_scene
    from .losses import total_loss
    from .model import SPRModel
    from .train import compute_losses, loss_config, prepare_targets

    with T.verification_mode():
        for s in range(seed, seed + tries):
            cfg = micro_config(seed=s, num_classes=3, mask_iou_thresh=0.5)
            spec = SceneSpec(seed=s + 11, image_size=cfg.image_size, size_range=(10, 22), max_instances=2)
            scene = synth_scene(spec, 0)
            model = SPRModel(cfg).build()
            rng = np.random.default_rng(s)
            redraw_parameters(model.store, rng)
            targets = [prepare_targets(model, scene)]
            lc = loss_config(cfg)

            def f():
                parts = compute_losses(model, [scene], targets)
                return total_loss({k: parts[k] for k in ("cls", "reg", "mask")}, lc)

            with _relu_watch() as seen, T.no_grad():
                f()
            if targets[0].masks and seen[0] >= KINK_MARGIN:
                break
        else:
            raise RuntimeError(f"no usable micro case in seeds {seed}..{seed + tries - 1}")
        params = [model.store[n] for n in model.store.names()]
        report = finite_diff_check(f, params, eps, tol, max_coords=max_coords, rng=rng)
    report.errors["seed"] = s
    report.errors["num_mask_targets"] = len(targets[0].masks)
    return report


def run_all(ops=None, trials: int = 100, tol: float = 1e-5, network_tol: float = 1e-4, log=print) -> bool:
    names = list(OPS) if ops in (None, "all") else [o.strip() for o in ops.split(",")]
    ok = True
    t0 = time.perf_counter()
    for name in names:
        if name == "network":
            continue
        r = check_op(name, trials, tol)
        log(f"{'PASS' if r.passed else 'FAIL'} {name:20s} max_rel_error={r.max_rel_error:.3e} tol={tol:g}")
        ok &= r.passed
    if ops in (None, "all") or "network" in names:
        r = network_gradcheck(network_tol)
        log(f"{'PASS' if r.passed else 'FAIL'} {'network':20s} max_rel_error={r.max_rel_error:.3e} tol={network_tol:g}")
        ok &= r.passed
    log(f"gradcheck finished in {time.perf_counter() - t0:.1f}s")
    return ok
