"""Shared oracles for the training tests and the acceptance suite."""

import numpy as np

from fedbalance.training import (Conv3x3, Dense, MaxPool2, ReLU, forward,
                                 init_model, loss_and_grad,
                                 softmax_cross_entropy)
from fedbalance.training import _im2col, _conv_forward, _param_views, _pool_forward


def min_pool_gap(params, x):
    """Smallest top-2 gap over every max-pool window the forward pass sees.

    Central differences at h=1e-3 are only trustworthy when no pool argmax
    can flip inside the probe interval; callers assert a floor on this gap.
    """
    act = np.asarray(x, dtype=params.flat.dtype)
    views = _param_views(params.schema, params.flat)
    gaps = [np.inf]
    for layer, view in zip(params.schema, views):
        if isinstance(layer, Dense):
            act = act.reshape(act.shape[0], -1) @ view[0] + view[1]
        elif isinstance(layer, Conv3x3):
            cols = _im2col(act)
            act = _conv_forward(act, cols, view[0], view[1])
        elif isinstance(layer, MaxPool2):
            b, h, w, c = act.shape
            h2, w2 = h // 2, w // 2
            windows = (act[:, :h2 * 2, :w2 * 2, :]
                       .reshape(b, h2, 2, w2, 2, c)
                       .transpose(0, 1, 3, 5, 2, 4).reshape(b, h2, w2, c, 4))
            top2 = np.sort(windows, axis=-1)[..., 2:]
            gaps.append(float((top2[..., 1] - top2[..., 0]).min()))
            act, _ = _pool_forward(act)
        elif isinstance(layer, ReLU):
            act = np.maximum(act, 0)
    return min(gaps)


def finite_difference_worst(schema, x, y, params_seed, n_coords=None, h=1e-3):
    """Max relative error between analytic and central-difference gradients.

    Runs on 64-bit shadow parameters. Returns (worst_error, min_pool_gap).
    """
    params = init_model(schema, params_seed, dtype=np.float64)
    params.flat += np.random.default_rng(params_seed + 1).normal(
        0, 0.15, params.flat.size)
    x = np.asarray(x, dtype=np.float64)
    gap = min_pool_gap(params, x)
    _, grad = loss_and_grad(params, x, y)
    if n_coords is None or n_coords >= params.flat.size:
        coords = np.arange(params.flat.size)
    else:
        coords = np.random.default_rng(params_seed + 2).choice(
            params.flat.size, size=n_coords, replace=False)
    worst = 0.0
    for c in coords:
        saved = params.flat[c]
        params.flat[c] = saved + h
        up, _ = softmax_cross_entropy(forward(params, x)[0], y)
        params.flat[c] = saved - h
        down, _ = softmax_cross_entropy(forward(params, x)[0], y)
        params.flat[c] = saved
        fd = (up - down) / (2 * h)
        worst = max(worst, abs(fd - grad[c]) / max(abs(fd), abs(grad[c]), 1e-8))
    return worst, gap


def gradient_check_cases():
    """(name, schema, x, y, params_seed) covering every layer type."""
    from fedbalance.training import Softmax
    rng = np.random.default_rng(0)
    x_flat = rng.random((6, 8, 8, 2))
    y_flat = rng.integers(0, 4, 6)
    rng_cnn = np.random.default_rng(5)
    x_cnn = rng_cnn.random((4, 6, 6, 2)) * 2.0
    y_cnn = rng_cnn.integers(0, 3, 4)
    return [
        ("dense", (Dense(128, 4), Softmax()), x_flat, y_flat, 3),
        ("mlp", (Dense(128, 16), ReLU(), Dense(16, 4), Softmax()),
         x_flat, y_flat, 3),
        ("cnn", (Conv3x3(2, 3), MaxPool2(), ReLU(),
                 Conv3x3(3, 4), MaxPool2(), ReLU(), Dense(4, 3), Softmax()),
         x_cnn, y_cnn, 105),
    ]
