"""Training-mode forward pass, analytic gradients, and the softmax
cross-entropy loss for the layer DAG.

Gradients follow the usual conventions: the ReLU subgradient is 0 at x == 0
and batch norm differentiates through the batch statistics. Elementwise math
runs at the ops storage dtype; axis reductions accumulate in float64.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .graph import LayerKind, ModelGraph
from .ops import conv_output_hw, im2col


def col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Scatter-add inverse of `im2col`. `cols` is (N, C*kh*kw, OH*OW)."""
    n, c, h, w = x_shape
    oh, ow = conv_output_hw(h, w, kh, kw, stride, padding)
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    padded = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for ki in range(kh):
        for kj in range(kw):
            padded[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride] += \
                cols[:, :, ki, kj]
    if padding:
        padded = padded[:, :, padding:-padding, padding:-padding]
    return padded


# -- per-op backward rules ----------------------------------------------------


def conv2d_backward(dout: np.ndarray, x: np.ndarray, weights: np.ndarray,
                    stride: int, padding: int):
    """Returns (dx, dweights, dbias)."""
    dt = ops.DTYPE
    n = x.shape[0]
    oc, ic, kh, kw = weights.shape
    dout_mat = dout.reshape(n, oc, -1).astype(dt, copy=False)
    cols = im2col(x, kh, kw, stride, padding, dtype=dt)
    # dW[o, j] = sum_n dout[n, o, :] . cols[n, j, :]
    dw = np.matmul(dout_mat, cols.transpose(0, 2, 1)).sum(axis=0, dtype=np.float64)
    db = dout_mat.sum(axis=(0, 2), dtype=np.float64)
    wmat = weights.reshape(oc, -1).astype(dt, copy=False)
    dcols = np.matmul(wmat.T[None], dout_mat)
    dx = col2im(dcols, x.shape, kh, kw, stride, padding)
    return dx.astype(dt, copy=False), dw.reshape(weights.shape).astype(dt), db.astype(dt)


def batchnorm_train_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                            epsilon: float):
    """Normalise with batch statistics; returns (out, cache, batch_mean, batch_var).

    Batch variance is the biased (1/N) estimate, and the same convention is
    used for the running statistics so folding is exactly consistent.
    """
    dt = ops.DTYPE
    mean = x.mean(axis=(0, 2, 3), dtype=np.float64)
    var = x.var(axis=(0, 2, 3), dtype=np.float64)
    inv_std = (1.0 / np.sqrt(var + epsilon)).astype(dt)
    xhat = (x - mean.astype(dt)[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.astype(dt)[None, :, None, None] * xhat
    out += beta.astype(dt)[None, :, None, None]
    cache = (xhat, inv_std)
    return out.astype(dt, copy=False), cache, mean.astype(dt), var.astype(dt)


def batchnorm_backward(dout: np.ndarray, cache, gamma: np.ndarray):
    xhat, inv_std = cache
    dt = ops.DTYPE
    n, c, h, w = dout.shape
    m = n * h * w
    dgamma = (dout * xhat).sum(axis=(0, 2, 3), dtype=np.float64)
    dbeta = dout.sum(axis=(0, 2, 3), dtype=np.float64)
    dxhat = dout * gamma.astype(dt)[None, :, None, None]
    s1 = dxhat.sum(axis=(0, 2, 3), dtype=np.float64).astype(dt)[None, :, None, None]
    s2 = (dxhat * xhat).sum(axis=(0, 2, 3), dtype=np.float64).astype(dt)[None, :, None, None]
    dx = (inv_std[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)
    return dx.astype(dt, copy=False), dgamma.astype(dt), dbeta.astype(dt)


def fully_connected_backward(dout: np.ndarray, x_flat: np.ndarray, weights: np.ndarray):
    dt = ops.DTYPE
    dw = np.matmul(dout.T.astype(np.float64), x_flat.astype(np.float64))
    db = dout.sum(axis=0, dtype=np.float64)
    dx = np.matmul(dout.astype(dt, copy=False), weights.astype(dt, copy=False))
    return dx.astype(dt, copy=False), dw.astype(dt), db.astype(dt)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch; returns (loss, dlogits)."""
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    expz = np.exp(z)
    probs = expz / expz.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    loss = float(-np.log(probs[np.arange(n), labels] + 1e-300).mean())
    dlogits = probs
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return loss, dlogits.astype(ops.DTYPE)


# -- graph-level forward/backward ---------------------------------------------


def forward_train(g: ModelGraph, x: np.ndarray):
    """Forward pass with batch-statistics batch norm.

    Returns (logits, values, bn_caches, bn_batch_stats); `values` keeps every
    node output for the backward pass.
    """
    values: dict[int, np.ndarray] = {}
    bn_caches: dict[int, tuple] = {}
    bn_stats: dict[int, tuple] = {}
    for nid in g.topo_order():
        node = g.nodes[nid]
        if node.kind == LayerKind.INPUT:
            values[nid] = x
        elif node.kind == LayerKind.BATCHNORM:
            out, cache, bmean, bvar = batchnorm_train_forward(
                values[node.inputs[0]],
                node.params["gamma"], node.params["beta"],
                float(node.attrs.get("epsilon", 1e-5)),
            )
            values[nid] = out
            bn_caches[nid] = cache
            bn_stats[nid] = (bmean, bvar)
        elif node.kind == LayerKind.ADD:
            a, b = (values[i] for i in node.inputs)
            scale = float(node.attrs.get("shortcut_scale", 1.0))
            values[nid] = a + b if scale == 1.0 else a + (scale * b).astype(ops.DTYPE)
        else:
            values[nid] = g._node_forward(node, values[node.inputs[0]])
    return values[g.output_id], values, bn_caches, bn_stats


def backward(g: ModelGraph, values: dict, bn_caches: dict, dlogits: np.ndarray):
    """Backpropagate from the terminal node; returns {node_id: {param: grad}}."""
    grads_out: dict[int, np.ndarray] = {g.output_id: dlogits}
    param_grads: dict[int, dict[str, np.ndarray]] = {}
    for nid in reversed(g.topo_order()):
        node = g.nodes[nid]
        dout = grads_out.pop(nid, None)
        if dout is None or node.kind == LayerKind.INPUT:
            continue

        def send(src: int, grad: np.ndarray) -> None:
            if src in grads_out:
                grads_out[src] = grads_out[src] + grad
            else:
                grads_out[src] = grad

        if node.kind == LayerKind.CONV:
            x = values[node.inputs[0]]
            dx, dw, db = conv2d_backward(
                dout, x, node.params["weight"],
                int(node.attrs.get("stride", 1)), int(node.attrs.get("padding", 0)),
            )
            if node.trainable:
                param_grads[nid] = {"weight": dw, "bias": db}
            send(node.inputs[0], dx)
        elif node.kind == LayerKind.BATCHNORM:
            dx, dgamma, dbeta = batchnorm_backward(dout, bn_caches[nid], node.params["gamma"])
            param_grads[nid] = {"gamma": dgamma, "beta": dbeta}
            send(node.inputs[0], dx)
        elif node.kind == LayerKind.RELU:
            x = values[node.inputs[0]]
            send(node.inputs[0], dout * (x > 0))
        elif node.kind == LayerKind.ADD:
            scale = float(node.attrs.get("shortcut_scale", 1.0))
            send(node.inputs[0], dout)
            send(node.inputs[1], dout if scale == 1.0 else (scale * dout).astype(ops.DTYPE))
        elif node.kind == LayerKind.GLOBAL_AVG_POOL:
            x = values[node.inputs[0]]
            _, _, h, w = x.shape
            send(node.inputs[0],
                 np.broadcast_to(dout / (h * w), x.shape).astype(ops.DTYPE))
        elif node.kind == LayerKind.FULLY_CONNECTED:
            x = values[node.inputs[0]]
            x_flat = x.reshape(x.shape[0], -1)
            dx, dw, db = fully_connected_backward(dout, x_flat, node.params["weight"])
            param_grads[nid] = {"weight": dw, "bias": db}
            send(node.inputs[0], dx.reshape(x.shape))
    return param_grads


def loss_and_grads(g: ModelGraph, x: np.ndarray, labels: np.ndarray):
    """One training step's worth of math: loss, logits, parameter grads,
    and the batch statistics every BN node saw."""
    logits, values, bn_caches, bn_stats = forward_train(g, x)
    loss, dlogits = softmax_cross_entropy(logits, labels)
    grads = backward(g, values, bn_caches, dlogits)
    return loss, logits, grads, bn_stats
