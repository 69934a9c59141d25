"""Gradient verification suite: every differentiable operator, the
attention gate, and the end-to-end model against central finite
differences at double precision."""

import numpy as np

from . import model, ops
from .metrics import soft_tversky_loss, one_hot
from .ops import grad_check
from .rng import make_rng
from .tensor import Tensor

OP_TOL = 1e-4
MODEL_TOL = 1e-3


def _t(rng, shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, size=shape), dtype=np.float64)


def run_gradient_checks(seed: int = 0, full: bool = True):
    """Returns [(name, max relative error, tolerance)] for every check."""
    rng = make_rng(seed, "verification")
    results = []

    def check(name, fn, inputs, tol=OP_TOL, **kw):
        results.append((name, grad_check(fn, inputs, **kw), tol))

    conv_shapes = [((2, 4, 4, 4), (3, 2, 3, 3, 3), 1, 1),
                   ((2, 5, 5, 5), (2, 2, 3, 3, 3), 2, 1),
                   ((3, 4, 4, 4), (2, 3, 1, 1, 1), 1, 0)]
    if not full:
        conv_shapes = conv_shapes[:1]
    for i, (xs, ws, stride, pad) in enumerate(conv_shapes):
        x, w = _t(rng, xs), _t(rng, ws)
        b = _t(rng, (ws[0],))
        check(f"conv3d[{i}] s={stride} p={pad}",
              lambda a, ww, bb: (ops.conv3d(a, ww, bb, stride, pad) ** 2).sum(),
              [x, w, b])

    x = _t(rng, (3, 4, 4, 4))
    w = _t(rng, (2, 3, 1, 1, 1))
    b = _t(rng, (2,))
    check("conv3d_1x1",
          lambda a, ww, bb: (ops.conv3d_1x1(a, ww, bb) ** 2).sum(), [x, w, b])

    x = _t(rng, (2, 3, 3, 3))
    w = _t(rng, (2, 3, 2, 2, 2))
    check("transposed_conv3d s=2",
          lambda a, ww: (ops.transposed_conv3d(a, ww, 2) ** 2).sum(), [x, w])

    x = _t(rng, (2, 3, 3, 3))
    tgt = Tensor(rng.normal(size=(2, 6, 6, 6)), dtype=np.float64)
    check("upsample_trilinear f=2",
          lambda a: (ops.upsample_trilinear(a, 2) * tgt).sum(), [x])

    x = _t(rng, (2, 4, 4, 4))
    tgt = Tensor(rng.normal(size=(2, 2, 2, 2)), dtype=np.float64)
    check("maxpool3d k=2",
          lambda a: (ops.maxpool3d(a, 2) * tgt).sum(), [x])

    x = _t(rng, (2, 3, 2, 4, 4))
    g = Tensor(rng.uniform(0.5, 1.5, size=(3,)), dtype=np.float64)
    bb = _t(rng, (3,))
    tgt = Tensor(rng.normal(size=x.shape), dtype=np.float64)
    rm, rv = np.zeros(3), np.ones(3)
    check("batchnorm train",
          lambda a, gg, be: (ops.batchnorm(a, gg, be, rm.copy(), rv.copy(), True) * tgt).sum(),
          [x, g, bb])
    check("batchnorm eval",
          lambda a, gg, be: (ops.batchnorm(a, gg, be, rm, rv, False) * tgt).sum(),
          [x, g, bb])

    x = _t(rng, (3, 4, 4, 4))
    tgt = Tensor(rng.normal(size=x.shape), dtype=np.float64)
    check("relu", lambda a: (ops.relu(a) * tgt).sum(), [x])
    check("leaky_relu", lambda a: (ops.leaky_relu(a, 0.01) * tgt).sum(), [x])
    check("sigmoid", lambda a: (ops.sigmoid(a) * tgt).sum(), [x], eps=1e-5)
    check("softmax_channels", lambda a: (ops.softmax_channels(a) * tgt).sum(), [x])

    x = _t(rng, (3, 4, 4, 4))
    drop_rng_key = (seed, "verification", "dropout")
    check("dropout rate=0.3",
          lambda a: (ops.dropout(a, 0.3, True, make_rng(*drop_rng_key)) * tgt).sum(), [x])

    labels = make_rng(seed, "labels").integers(0, 4, size=(4, 4, 4))
    onehot = Tensor(one_hot(labels, dtype=np.float64))
    logits = _t(rng, (4, 4, 4, 4))
    check("soft_tversky_loss",
          lambda a: soft_tversky_loss(ops.softmax_channels(a), onehot), [logits],
          tol=1e-4)

    # attention gate: all five parameter tensors plus both feature maps
    f_x, f_g = 3, 4
    x = _t(rng, (f_x, 4, 4, 4))
    g = _t(rng, (f_g, 2, 2, 2))
    wx = _t(rng, (f_g, f_x, 2, 2, 2), scale=0.5)
    wg = _t(rng, (f_g, f_g, 1, 1, 1), scale=0.5)
    wgb = _t(rng, (f_g,), scale=0.1)
    psi = _t(rng, (1, f_g, 1, 1, 1), scale=0.5)
    psib = _t(rng, (1,), scale=0.1)
    tgt = Tensor(rng.normal(size=x.shape), dtype=np.float64)

    def gate_loss(a, b, c, d, e, f, h):
        gate = model.AttentionGateParams(wx=c, wg=d, wg_bias=e, psi=f, psi_bias=h)
        return (model.attention_gate(a, b, gate) * tgt).sum()

    check("attention_gate", gate_loss, [x, g, wx, wg, wgb, psi, psib])

    if full:
        results.append(("model end-to-end", model_end_to_end_check(seed), MODEL_TOL))
    return results


def model_end_to_end_check(seed: int = 0, coords_per_tensor: int = 2) -> float:
    """Finite-difference check through the whole depth-2 network at
    double precision, sampling a few coordinates per parameter tensor."""
    cfg = model.UNetConfig(depth=2, base_filters=4, min_extent=8)
    params = model.build_model(cfg, seed=seed, dtype=np.float64)
    rng = make_rng(seed, "e2e")
    x = rng.random((1, 3, 8, 8, 8))
    labels = rng.integers(0, 4, size=(8, 8, 8))
    onehot = Tensor(one_hot(labels, dtype=np.float64)[None])

    tensors = list(params.tensors.values())

    def loss_fn(*_):
        probs = model.forward(params, Tensor(x, dtype=np.float64),
                              training=True, step=0)
        return soft_tversky_loss(probs, onehot)

    return ops.grad_check(loss_fn, tensors, eps=1e-5,
                          max_entries_per_input=coords_per_tensor, seed=seed)
