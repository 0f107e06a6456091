"""Pure-numpy reference implementations of the hot kernels.

Signatures mirror the compiled extension exactly: 2-d C-contiguous float
arrays, float32 or float64. These are the import-time fallback and the
ground truth the extension is tested against.
"""

import numpy as np


def softmax_forward(x):
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    e /= e.sum(axis=-1, keepdims=True)
    return e


def softmax_backward(y, grad):
    dot = (y * grad).sum(axis=-1, keepdims=True)
    return y * (grad - dot)


def layernorm_forward(x, gain, bias, eps):
    mean = x.mean(axis=-1)
    var = x.var(axis=-1)
    rstd = 1.0 / np.sqrt(var + eps)
    y = (x - mean[:, None]) * rstd[:, None] * gain + bias
    return y, mean, rstd


def layernorm_backward(x, gain, mean, rstd, grad):
    xhat = (x - mean[:, None]) * rstd[:, None]
    dgain = (grad * xhat).sum(axis=0)
    dbias = grad.sum(axis=0)
    gx = grad * gain
    dx = (gx - gx.mean(axis=-1, keepdims=True)
          - xhat * (gx * xhat).mean(axis=-1, keepdims=True)) * rstd[:, None]
    return dx, dgain, dbias


def adam_update(param, grad, m, v, lr, beta1, beta2, eps, step):
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1 ** step)
    vhat = v / (1.0 - beta2 ** step)
    param -= lr * mhat / (np.sqrt(vhat) + eps)


def scatter_add_rows(out, index, rows):
    np.add.at(out, index, rows)
