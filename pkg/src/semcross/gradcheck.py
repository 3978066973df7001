"""Finite-difference verification of every gradient rule in the engine.

The oracle is deliberately independent of the engine internals: central
differences (f(x+h) - f(x-h)) / 2h on the raw parameter arrays, compared
elementwise against what backward() produced, with relative error
|a - b| / max(1, |a|, |b|). Checks always run in float64.

Kinked ops (relu, max pooling) get inputs pushed away from their kinks,
otherwise a finite step can straddle the non-differentiable point and the
comparison would be meaningless rather than wrong.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import VerificationError
from .tensor import RunningStats, Tensor

FD_STEP = 1e-5
DEFAULT_TOL = 1e-4


def finite_difference_gradient(f, theta, h=FD_STEP):
    """Central-difference gradient of scalar-valued ``f`` at Tensor ``theta``.

    ``f`` is called with ``theta`` after each in-place perturbation and must
    return a python float computed from ``theta.data``. The array is
    restored exactly between probes.
    """
    arr = theta.data
    grad = np.zeros(arr.shape, dtype=np.float64)
    for idx in np.ndindex(arr.shape):
        orig = arr[idx]
        arr[idx] = orig + h
        fp = f(theta)
        arr[idx] = orig - h
        fm = f(theta)
        arr[idx] = orig
        grad[idx] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a, b):
    """Elementwise |a - b| / max(1, |a|, |b|), reduced to the maximum."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    if a.size == 0:
        return 0.0
    return float((np.abs(a - b) / denom).max())


@dataclass
class OpCheckResult:
    op: str
    cases: int
    max_rel_err: float
    tol: float

    @property
    def passed(self):
        return self.max_rel_err < self.tol


def _distinct_values(rng, shape, step=0.1):
    """Array of pairwise-distinct values (separation ``step``), shuffled."""
    n = int(np.prod(shape))
    vals = (rng.permutation(n).astype(np.float64) - n / 2.0) * step
    return vals.reshape(shape)


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.normal(size=shape)
    return x + margin * np.where(x >= 0, 1.0, -1.0)


# Each case builder returns (inputs, forward) where ``forward(*inputs)``
# yields the op output tensor. Builders draw shapes/values from ``rng`` and
# vary with the case index so five cases cover distinct configurations.


def _cases_binary(op_fn, safe_b=False):
    shapes = [
        ((3, 4), (3, 4)),
        ((2, 3, 4), (3, 4)),
        ((4, 1), (1, 5)),
        ((6,), (6,)),
        ((2, 1, 3), (4, 3)),
    ]

    def build(rng, i):
        sa, sb = shapes[i % len(shapes)]
        a = Tensor(rng.normal(size=sa), requires_grad=True)
        bdata = _away_from_zero(rng, sb, 0.3) if safe_b else rng.normal(size=sb)
        b = Tensor(bdata, requires_grad=True)
        return [a, b], op_fn

    return build


def _cases_unary(op_fn, sampler):
    shapes = [(7,), (3, 4), (2, 3, 4), (5, 2), (1, 6)]

    def build(rng, i):
        x = Tensor(sampler(rng, shapes[i % len(shapes)]), requires_grad=True)
        return [x], op_fn

    return build


def _build_scale(rng, i):
    c = float(rng.normal()) or 0.7
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    return [x], lambda t: T.scale(t, c)


def _build_sum(rng, i):
    axes = [None, 0, 1, (0, 2), -1]
    x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    return [x], lambda t: T.sum_(t, axes[i % len(axes)])


def _build_mean(rng, i):
    axes = [None, 0, 2, (1, 2), -2]
    x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    return [x], lambda t: T.mean(t, axes[i % len(axes)])


def _build_reshape(rng, i):
    targets = [(4, 6), (24,), (2, 2, 6), (6, 4), (1, 24)]
    x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    return [x], lambda t: T.reshape(t, targets[i % len(targets)])


def _build_permute(rng, i):
    x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    axes = tuple(rng.permutation(3).tolist())
    return [x], lambda t: T.permute(t, axes)


def _build_transpose_last(rng, i):
    shape = [(3, 4), (2, 3, 4), (4, 4), (2, 2, 3), (5, 1)][i % 5]
    x = Tensor(rng.normal(size=shape), requires_grad=True)
    return [x], T.transpose_last


def _build_matmul(rng, i):
    shapes = [
        ((3, 4), (4, 5)),
        ((2, 3, 4), (4, 5)),
        ((2, 3, 4), (2, 4, 5)),
        ((1, 3, 4), (6, 4, 2)),
        ((5, 2), (2, 2)),
    ]
    sa, sb = shapes[i % len(shapes)]
    a = Tensor(rng.normal(size=sa), requires_grad=True)
    b = Tensor(rng.normal(size=sb), requires_grad=True)
    return [a, b], T.matmul


def _build_softmax(rng, i):
    axis, tau = [(-1, 1.0), (0, 1.0), (1, 0.5), (-1, 2.0), (0, 0.25)][i % 5]
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    return [x], lambda t: T.softmax(t, axis=axis, tau=tau)


def _build_concat(rng, i):
    shapes = [
        ((2, 3), (4, 3), 0),
        ((3, 2), (3, 5), 1),
        ((2, 2, 2), (2, 1, 2), 1),
        ((4,), (2,), 0),
        ((2, 3, 2), (2, 3, 3), -1),
    ]
    sa, sb, axis = shapes[i % len(shapes)]
    a = Tensor(rng.normal(size=sa), requires_grad=True)
    b = Tensor(rng.normal(size=sb), requires_grad=True)
    return [a, b], lambda x, y: T.concat(x, y, axis=axis)


def _build_narrow(rng, i):
    specs = [(0, 1, 2), (1, 0, 3), (2, 2, 2), (0, 0, 4), (-1, 1, 3)]
    axis, start, length = specs[i % len(specs)]
    x = Tensor(rng.normal(size=(4, 3, 4)), requires_grad=True)
    return [x], lambda t: T.narrow(t, axis, start, length)


def _conv_inputs(rng, x_shape, out_channels, nhwc):
    cin = x_shape[-1] if nhwc else x_shape[-3]
    x = Tensor(rng.normal(size=x_shape), requires_grad=True)
    w = Tensor(rng.normal(size=(out_channels, cin, 3, 3)) * 0.5, requires_grad=True)
    b = Tensor(rng.normal(size=(out_channels,)), requires_grad=True)
    return [x, w, b]


def _build_conv_nhwc(rng, i):
    shapes = [((2, 5, 4, 3), 4), ((1, 3, 3, 2), 3), ((3, 4, 4, 1), 2), ((2, 2, 2, 4), 5), ((1, 6, 5, 2), 1)]
    xs, oc = shapes[i % len(shapes)]
    return _conv_inputs(rng, xs, oc, nhwc=True), T.conv2d_nhwc


def _build_conv_cf(rng, i):
    shapes = [((3, 5, 5), 4), ((2, 3, 4, 5), 2), ((1, 4, 4), 3), ((2, 2, 5, 3), 4), ((4, 3, 3), 2)]
    xs, oc = shapes[i % len(shapes)]
    return _conv_inputs(rng, xs, oc, nhwc=False), T.conv2d


def _build_pool_nhwc(rng, i):
    shapes = [(2, 4, 4, 3), (1, 2, 2, 1), (2, 5, 5, 2), (1, 6, 4, 2), (3, 3, 7, 1)]
    x = Tensor(_distinct_values(rng, shapes[i % len(shapes)]), requires_grad=True)
    return [x], T.max_pool2d_nhwc


def _build_pool_cf(rng, i):
    shapes = [(3, 4, 4), (2, 3, 6, 4), (1, 5, 5), (2, 2, 2, 2), (4, 7, 3)]
    x = Tensor(_distinct_values(rng, shapes[i % len(shapes)]), requires_grad=True)
    return [x], T.max_pool2d


def _bn_inputs(rng, x_shape, channels):
    x = Tensor(rng.normal(size=x_shape), requires_grad=True)
    gamma = Tensor(1.0 + 0.2 * rng.normal(size=channels), requires_grad=True)
    beta = Tensor(rng.normal(size=channels), requires_grad=True)
    return x, gamma, beta


def _build_bn_nhwc(rng, i):
    shapes = [(4, 3, 3, 2), (2, 4, 4, 3), (8, 2, 2, 1), (3, 5, 2, 4), (2, 2, 6, 2)]
    xs = shapes[i % len(shapes)]
    training = i != 3  # one eval-mode case in the rotation
    x, gamma, beta = _bn_inputs(rng, xs, xs[-1])
    stats = RunningStats(
        mean=rng.normal(size=xs[-1]),
        var=0.5 + rng.uniform(size=xs[-1]),
    )

    def forward(xv, gv, bv):
        return T.batch_norm2d_nhwc(xv, gv, bv, stats, training)

    return [x, gamma, beta], forward


def _build_bn_cf(rng, i):
    shapes = [(2, 4, 4), (3, 2, 3, 3), (1, 6, 2), (2, 3, 2, 4), (4, 2, 2)]
    xs = shapes[i % len(shapes)]
    channels = xs[0] if len(xs) == 3 else xs[1]
    training = i != 2
    x, gamma, beta = _bn_inputs(rng, xs, channels)
    stats = RunningStats(mean=rng.normal(size=channels), var=0.5 + rng.uniform(size=channels))

    def forward(xv, gv, bv):
        return T.batch_norm2d(xv, gv, bv, stats, training)

    return [x, gamma, beta], forward


OP_CASES = {
    "add": _cases_binary(T.add),
    "sub": _cases_binary(T.sub),
    "mul": _cases_binary(T.mul),
    "div": _cases_binary(T.div, safe_b=True),
    "scale": _build_scale,
    "relu": _cases_unary(T.relu, lambda rng, s: _away_from_zero(rng, s)),
    "sigmoid": _cases_unary(T.sigmoid, lambda rng, s: rng.normal(size=s)),
    "exp": _cases_unary(T.exp, lambda rng, s: 0.5 * rng.normal(size=s)),
    "log": _cases_unary(T.log, lambda rng, s: 0.2 + rng.uniform(size=s) * 3.0),
    "sum": _build_sum,
    "mean": _build_mean,
    "reshape": _build_reshape,
    "permute": _build_permute,
    "matmul": _build_matmul,
    "softmax": _build_softmax,
    "narrow": _build_narrow,
    "concat": _build_concat,
    "conv2d_nhwc": _build_conv_nhwc,
    "max_pool2d_nhwc": _build_pool_nhwc,
    "batch_norm2d_nhwc": _build_bn_nhwc,
    # channel-first adapters, checked end to end as compositions
    "conv2d": _build_conv_cf,
    "max_pool2d": _build_pool_cf,
    "batch_norm2d": _build_bn_cf,
    "transpose_last": _build_transpose_last,
}


def check_op_gradients(seed=0, cases_per_op=5, tol=DEFAULT_TOL, ops=None, corrupt=None):
    """Run the per-op finite-difference suite; returns one result per op.

    ``corrupt`` names an op whose analytic gradient is scaled by 1.01
    before comparison, to demonstrate the harness actually rejects a wrong
    rule. Raises VerificationError for an unknown op name.
    """
    missing = [op for op in T.PRIMITIVE_OPS if op not in OP_CASES]
    if missing:
        raise VerificationError(f"ops without gradient-check coverage: {missing}")
    names = list(OP_CASES) if ops is None else list(ops)
    unknown = [op for op in names if op not in OP_CASES]
    if unknown:
        raise VerificationError(f"unknown ops requested: {unknown}")
    if corrupt is not None and corrupt not in OP_CASES:
        raise VerificationError(f"cannot corrupt unknown op {corrupt!r}")

    results = []
    with T.precision("float64"):
        for op in names:
            build = OP_CASES[op]
            worst = 0.0
            for case in range(cases_per_op):
                rng = np.random.default_rng(
                    np.random.SeedSequence(seed, spawn_key=(zlib.crc32(op.encode()), case))
                )
                inputs, forward = build(rng, case)
                weights = rng.normal(size=forward(*_fresh(inputs)).data.shape)
                worst = max(worst, _check_case(inputs, forward, weights, op == corrupt))
            results.append(OpCheckResult(op=op, cases=cases_per_op, max_rel_err=worst, tol=tol))
    return results


@dataclass
class EndToEndResult:
    parameters: int
    max_rel_err: float
    tol: float
    per_param: dict

    @property
    def passed(self):
        return self.max_rel_err < self.tol


def check_end_to_end(seed=0, tol=1e-3, lambda_=0.5, h=FD_STEP, corrupt=False):
    """Finite differences through the whole composite: embed, fuse, classify.

    A deliberately tiny configuration (2-way 1-shot with one query per
    class, 8x8 inputs, a single conv block, attention fusion, both loss
    terms at equal weight) keeps the parameter count small enough to probe
    every coordinate. Training-mode batch norm normalizes with batch
    statistics, so the loss is a pure function of the parameters even
    though the running stats drift as a side effect of each probe.

    ``corrupt`` scales the analytic gradients by 1.01 before comparison to
    demonstrate the check rejects a wrong composite gradient.
    """
    from .backbone import aux_predict
    from .metric import classification_loss, compute_prototypes, distances, posterior
    from .model import Model, ModelConfig, episode_embeddings
    from .semantics import aux_loss
    from .training import total_loss

    rng = np.random.default_rng(
        np.random.SeedSequence(seed, spawn_key=(zlib.crc32(b"end2end"),))
    )
    l_out = 5
    with T.precision("float64"):
        model = Model.create(
            ModelConfig(fusion="cam", l_out=l_out, filters=(4,), in_channels=3), seed=seed
        )
        sup = rng.uniform(size=(2, 3, 8, 8))
        qry = rng.uniform(size=(2, 3, 8, 8))
        labels = np.array([0, 1])
        logits = rng.normal(size=(2, l_out))
        targets = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        rows = np.concatenate([targets, targets[labels]], axis=0)

        def loss_value():
            fwd = episode_embeddings(model, sup, qry, training=True, need_aux=True)
            d = fwd.support_emb.data.shape[1]
            protos = compute_prototypes(T.reshape(fwd.support_emb, (2, 1, d)))
            post = posterior(distances(fwd.query_emb, protos))
            l_cls = classification_loss(post, labels)
            preds = aux_predict(fwd.aux_patches, tau=1.0)
            return total_loss(l_cls, aux_loss(preds, rows, kind="kl"), lambda_)

        T.backward(loss_value())
        params = model.parameters()
        analytic = {}
        for name, p in params.items():
            if p.grad is None:
                raise VerificationError(f"no gradient reached parameter {name!r}")
            analytic[name] = p.grad * 1.01 if corrupt else p.grad.copy()
            p.grad = None

        per_param = {}
        with T.no_grad():
            for name, p in params.items():
                fd = finite_difference_gradient(lambda _: float(loss_value().data), p, h=h)
                per_param[name] = relative_error(analytic[name], fd)
    n_params = sum(int(np.prod(p.data.shape)) for p in params.values())
    return EndToEndResult(
        parameters=n_params,
        max_rel_err=max(per_param.values()),
        tol=tol,
        per_param=per_param,
    )


def _fresh(inputs):
    """Detached copies so probing forward shapes does not consume anything."""
    return [Tensor(t.data.copy(), requires_grad=False) for t in inputs]


def _scalarize(out, weights):
    return T.sum_(T.mul(out, Tensor(weights)))


def _check_case(inputs, forward, weights, corrupted):
    loss = _scalarize(forward(*inputs), weights)
    loss.backward()
    worst = 0.0
    for pos, inp in enumerate(inputs):
        if inp.grad is None:
            raise VerificationError(f"no gradient reached input {pos} of {forward}")
        analytic = inp.grad.copy()
        if corrupted:
            analytic *= 1.01

        def f(theta, _pos=pos):
            probe = [Tensor(t.data, requires_grad=False) for t in inputs]
            probe[_pos] = Tensor(theta.data, requires_grad=False)
            return _scalarize(forward(*probe), weights).item()

        fd = finite_difference_gradient(f, inp, h=FD_STEP)
        worst = max(worst, relative_error(analytic, fd))
    return worst
