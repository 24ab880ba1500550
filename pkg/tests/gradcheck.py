"""Central finite-difference gradient checks in float64.

The numeric side perturbs one coordinate by +-STEP.  ReLU and max-pool are
piecewise linear, so a perturbation that flips an activation pattern would
compare the analytic gradient against a secant across a kink.  Every
evaluation therefore records the ReLU masks and pool argmaxes it produced;
coordinates whose +-STEP evaluations change that pattern are skipped and
counted.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

import pathonet.model as model_mod
import pathonet.tensor as T

STEP = 1e-3
TOL = 1e-4


@dataclass
class CheckResult:
    rel_error: float
    checked: int
    skipped: int

    @property
    def ok(self) -> bool:
        return self.checked > 0 and self.rel_error < TOL


def rel_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


class _Recorder:
    def __init__(self):
        self.pattern: list[bytes] = []

    def relu(self, x):
        self.pattern.append(np.packbits(x.data > 0).tobytes())
        return T.relu(x)

    def max_pool2(self, x):
        n, c, h, w = x.shape
        win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
        self.pattern.append(win.argmax(axis=-1).astype(np.uint8).tobytes())
        return T.max_pool2(x)


@contextlib.contextmanager
def recording():
    """Route the model's ReLU / pool calls through a pattern recorder."""
    rec = _Recorder()
    saved = model_mod.relu, model_mod.max_pool2
    model_mod.relu, model_mod.max_pool2 = rec.relu, rec.max_pool2
    try:
        yield rec
    finally:
        model_mod.relu, model_mod.max_pool2 = saved


def check(loss_fn, arrays, n_coords=None, rng=None) -> CheckResult:
    """Compare analytic and numeric gradients of ``loss_fn(*tensors)``.

    ``arrays`` are float64 arrays, each wrapped in a fresh Tensor with
    requires_grad for the analytic pass and perturbed in place for the
    numeric pass.  ``n_coords`` limits the number of coordinates checked per
    array (chosen with ``rng``); None checks all.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]

    def evaluate():
        with recording() as rec:
            tensors = [T.Tensor(a.copy()) for a in arrays]
            value = float(loss_fn(*tensors).data)
        return value, rec.pattern

    with recording() as rec:
        tensors = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
        loss = loss_fn(*tensors)
        base_pattern = rec.pattern
    grads = T.grad(loss, tensors)

    analytic, numeric = [], []
    skipped = 0
    for arr, g in zip(arrays, grads):
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if n_coords is not None and flat.size > n_coords:
            idx = np.sort((rng or np.random.default_rng(0)).choice(flat.size, n_coords, replace=False))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + STEP
            fp, pp = evaluate()
            flat[i] = orig - STEP
            fm, pm = evaluate()
            flat[i] = orig
            if pp != base_pattern or pm != base_pattern:
                skipped += 1
                continue
            analytic.append(g.reshape(-1)[i])
            numeric.append((fp - fm) / (2 * STEP))
    return CheckResult(rel_error(analytic, numeric), len(analytic), skipped)


def away_from_zero(rng, shape, gap=0.05):
    """Normals pushed at least ``gap`` away from 0 (keeps ReLU off its kink)."""
    x = rng.normal(size=shape)
    return np.sign(x + (x == 0)) * (np.abs(x) + gap)


def distinct_values(rng, shape, spacing=0.01):
    """Values pairwise at least ``spacing`` apart (keeps max-pool off ties)."""
    n = int(np.prod(shape))
    return (rng.permutation(n).astype(np.float64) * spacing - n * spacing / 2).reshape(shape)


def _target(rng, shape):
    return rng.normal(size=shape)


def operator_cases(seed: int = 0):
    """Yield (name, loss_fn, arrays) cases covering every differentiable operator.

    Each loss is mse(op(...), random target) so every output element feeds
    the loss with a distinct weight.
    """
    rng = np.random.default_rng(seed)
    for _ in range(30):
        k = int(rng.choice([1, 3, 5]))
        d = int(rng.choice([1, 2, 4]))
        s = int(rng.choice([1, 2]))
        p = int(rng.integers(0, d * (k - 1) // 2 + 2))
        cin, cout = (int(v) for v in rng.integers(1, 4, size=2))
        h, w = (int(v) for v in rng.integers(5, 10, size=2))
        spec = T.ConvSpec(k, cin, cout, dilation=d, stride=s, padding=p)
        if spec.output_size(h) < 1 or spec.output_size(w) < 1:
            p = d * (k - 1) // 2
            spec = T.ConvSpec(k, cin, cout, dilation=d, stride=s, padding=p)
        n = int(rng.integers(1, 3))
        tgt = _target(rng, (n, cout, spec.output_size(h), spec.output_size(w)))
        arrays = [rng.normal(size=(n, cin, h, w)), rng.normal(size=spec.weight_shape), rng.normal(size=cout)]
        yield (f"conv2d k={k} d={d} s={s} p={p}",
               lambda x, wt, b, spec=spec, tgt=tgt: T.mse(T.conv2d(x, spec, wt, b), tgt), arrays)
    for _ in range(15):
        n, c = (int(v) for v in rng.integers(1, 3, size=2))
        h, w = (2 * int(v) for v in rng.integers(1, 5, size=2))
        tgt = _target(rng, (n, c, h // 2, w // 2))
        yield "max_pool2", lambda x, tgt=tgt: T.mse(T.max_pool2(x), tgt), [distinct_values(rng, (n, c, h, w))]
    for _ in range(15):
        n = int(rng.integers(1, 3))
        cin, cout = (int(v) for v in rng.integers(1, 4, size=2))
        h, w = (int(v) for v in rng.integers(1, 5, size=2))
        tgt = _target(rng, (n, cout, 2 * h, 2 * w))
        arrays = [rng.normal(size=(n, cin, h, w)), rng.normal(size=(cin, cout, 2, 2)), rng.normal(size=cout)]
        yield "upsample2", lambda x, wt, b, tgt=tgt: T.mse(T.upsample2(x, wt, b), tgt), arrays
    for _ in range(10):
        shape = tuple(int(v) for v in rng.integers(1, 6, size=4))
        tgt = _target(rng, shape)
        yield "relu", lambda x, tgt=tgt: T.mse(T.relu(x), tgt), [away_from_zero(rng, shape)]
    for _ in range(10):
        shape = tuple(int(v) for v in rng.integers(1, 6, size=4))
        tgt = _target(rng, shape)
        yield "add", lambda a, b, tgt=tgt: T.mse(T.add(a, b), tgt), [rng.normal(size=shape), rng.normal(size=shape)]
    for _ in range(5):
        shape = tuple(int(v) for v in rng.integers(1, 5, size=4))
        tgt = _target(rng, (shape[0], 2 * shape[1], shape[2], shape[3]))
        yield "duplicate_channels", lambda x, tgt=tgt: T.mse(T.duplicate_channels(x), tgt), [rng.normal(size=shape)]
    for _ in range(10):
        shape = tuple(int(v) for v in rng.integers(1, 6, size=4))
        tgt = _target(rng, shape)
        yield "mse", lambda x, tgt=tgt: T.mse(x, tgt), [rng.normal(size=shape)]


def random_params(params, rng, scale=0.5):
    """Replace every tensor (biases included) with float64 normals so no
    gradient path is trivially zero."""
    out = params.astype(np.float64)
    for t in out.tensors.values():
        fan = int(np.prod(t.shape[1:])) if t.data.ndim > 1 else 1
        t.data = rng.normal(0.0, scale / np.sqrt(fan), size=t.shape)
    return out


def model_case(params, image, target, n_coords, rng) -> CheckResult:
    """Gradient of mse(forward(params, image), target) w.r.t. sampled
    coordinates of every parameter tensor and the input."""
    names = list(params.tensors)
    arrays = [params.tensors[n].data for n in names] + [image]

    def loss_fn(*tensors):
        view = model_mod.ModelParams(params.arch, dict(zip(names, tensors[:-1])))
        return T.mse(model_mod.forward(view, tensors[-1]), target)

    return check(loss_fn, arrays, n_coords=n_coords, rng=rng)


def rdim_case(variant, cin, rng) -> CheckResult:
    cout = 2 * cin if variant == "encoder" else int(rng.integers(1, 4))
    convs = {}
    arrays = []
    names = ["a1", "a2", "b1", "b2"] + (["proj"] if variant == "decoder" else [])
    specs = {}
    for name in names:
        if name == "proj":
            spec = T.ConvSpec(1, cin, cout)
        else:
            first = name.endswith("1")
            spec = T.ConvSpec(3, cin if first else cout, cout, dilation=4 if name[0] == "b" else 1)
        specs[name] = spec
        arrays += [rng.normal(0, 0.5, size=spec.weight_shape), rng.normal(0, 0.3, size=spec.out_channels)]
    h = int(rng.integers(4, 9))
    x = rng.normal(size=(1, cin, h, h))
    tgt = rng.normal(size=(1, cout, h, h))

    def loss_fn(*tensors):
        for i, name in enumerate(names):
            convs[name] = (specs[name], tensors[2 * i], tensors[2 * i + 1])
        block = model_mod.RdimBlock(variant, cin, cout, dict(convs))
        return T.mse(model_mod.rdim_forward(block, tensors[-1]), tgt)

    return check(loss_fn, arrays + [x], n_coords=25, rng=rng)
