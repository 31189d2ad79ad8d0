"""FedAvg training over client datasets with small hand-differentiated models.

Models are a flat float32 parameter vector plus a layer schema (Dense,
Conv3x3, MaxPool2, ReLU, terminal Softmax). Forward/backward are written
directly in numpy and are dtype-generic so gradient checks can run on 64-bit
shadow parameters. Every shuffle and participation draw flows through named
seed streams, which makes full runs reproducible bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .datasets import ClientDataset
from .seeding import rng_for


class TrainingError(ValueError):
    pass


class ShapeMismatch(TrainingError):
    pass


class NonFiniteGradient(TrainingError):
    pass


class SchemaMismatch(TrainingError):
    pass


class NonFiniteParam(TrainingError):
    pass


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int


@dataclass(frozen=True)
class Conv3x3:
    in_channels: int
    out_channels: int


@dataclass(frozen=True)
class MaxPool2:
    pass


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Softmax:
    pass


Layer = Union[Dense, Conv3x3, MaxPool2, ReLU, Softmax]


def layer_param_count(layer: Layer) -> int:
    if isinstance(layer, Dense):
        return layer.in_features * layer.out_features + layer.out_features
    if isinstance(layer, Conv3x3):
        return 9 * layer.in_channels * layer.out_channels + layer.out_channels
    return 0


def schema_param_count(schema: Sequence[Layer]) -> int:
    return sum(layer_param_count(layer) for layer in schema)


@dataclass
class ModelParams:
    """Layer schema plus the flat parameter vector backing it."""

    schema: tuple[Layer, ...]
    flat: np.ndarray

    def copy(self) -> "ModelParams":
        return ModelParams(self.schema, self.flat.copy())

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.schema, self.flat.astype(dtype))


def _param_views(schema: Sequence[Layer], flat: np.ndarray) -> list[tuple | None]:
    """Per-layer (W, b) views into the flat vector; None for parameterless layers."""
    views: list[tuple | None] = []
    offset = 0
    for layer in schema:
        if isinstance(layer, Dense):
            n_w = layer.in_features * layer.out_features
            w = flat[offset:offset + n_w].reshape(layer.in_features, layer.out_features)
            b = flat[offset + n_w:offset + n_w + layer.out_features]
            views.append((w, b))
            offset += n_w + layer.out_features
        elif isinstance(layer, Conv3x3):
            n_w = 9 * layer.in_channels * layer.out_channels
            w = flat[offset:offset + n_w].reshape(3, 3, layer.in_channels,
                                                  layer.out_channels)
            b = flat[offset + n_w:offset + n_w + layer.out_channels]
            views.append((w, b))
            offset += n_w + layer.out_channels
        else:
            views.append(None)
    if offset != flat.size:
        raise SchemaMismatch(f"flat vector holds {flat.size} params, schema needs {offset}")
    return views


def init_model(schema: Sequence[Layer], seed: int, dtype=np.float32) -> ModelParams:
    """Glorot-uniform weights, zero biases; deterministic under seed."""
    schema = tuple(schema)
    flat = np.zeros(schema_param_count(schema), dtype=dtype)
    rng = np.random.default_rng(seed)
    for layer, view in zip(schema, _param_views(schema, flat)):
        if view is None:
            continue
        w, b = view
        if isinstance(layer, Dense):
            fan_in, fan_out = layer.in_features, layer.out_features
        else:
            fan_in = 9 * layer.in_channels
            fan_out = 9 * layer.out_channels
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        w[...] = rng.uniform(-limit, limit, size=w.shape).astype(dtype)
        b[...] = 0
    return ModelParams(schema, flat)


def _pool_forward(x: np.ndarray):
    b, h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    cropped = x[:, :h2 * 2, :w2 * 2, :]
    windows = cropped.reshape(b, h2, 2, w2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    windows = windows.reshape(b, h2, w2, c, 4)
    argmax = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]
    return out, (x.shape, argmax)


def _pool_backward(dout: np.ndarray, cache) -> np.ndarray:
    in_shape, argmax = cache
    b, h, w, c = in_shape
    h2, w2 = h // 2, w // 2
    grad_windows = np.zeros((b, h2, w2, c, 4), dtype=dout.dtype)
    np.put_along_axis(grad_windows, argmax[..., None], dout[..., None], axis=-1)
    grad = grad_windows.reshape(b, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    grad = grad.reshape(b, h2 * 2, w2 * 2, c)
    dx = np.zeros(in_shape, dtype=dout.dtype)
    dx[:, :h2 * 2, :w2 * 2, :] = grad
    return dx


def _im2col(x: np.ndarray) -> np.ndarray:
    """(B, H, W, C) -> (B*H*W, 9*C) patch matrix for same-padded 3x3 convs."""
    b, h, w, c = x.shape
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((b, h, w, 9, c), dtype=x.dtype)
    for dy in range(3):
        for dx in range(3):
            cols[:, :, :, dy * 3 + dx, :] = padded[:, dy:dy + h, dx:dx + w, :]
    return cols.reshape(b * h * w, 9 * c)


def _conv_forward(x: np.ndarray, cols: np.ndarray, w: np.ndarray,
                  bias: np.ndarray) -> np.ndarray:
    b, h, width, c_in = x.shape
    out2d = cols @ w.reshape(9 * c_in, w.shape[-1])
    return out2d.reshape(b, h, width, w.shape[-1]) + bias


def _conv_backward(dout: np.ndarray, x: np.ndarray, cols: np.ndarray,
                   w: np.ndarray):
    b, h, width, c_in = x.shape
    c_out = w.shape[-1]
    dout2d = dout.reshape(b * h * width, c_out)
    w_mat = w.reshape(9 * c_in, c_out)
    dw = (cols.T @ dout2d).reshape(3, 3, c_in, c_out)
    db = dout2d.sum(axis=0)
    dcols = (dout2d @ w_mat.T).reshape(b, h, width, 9, c_in)
    dpadded = np.zeros((b, h + 2, width + 2, c_in), dtype=dout.dtype)
    for dy in range(3):
        for dx in range(3):
            dpadded[:, dy:dy + h, dx:dx + width, :] += dcols[:, :, :, dy * 3 + dx, :]
    return dpadded[:, 1:1 + h, 1:1 + width, :], dw, db


def forward(params: ModelParams, x: np.ndarray) -> tuple[np.ndarray, list]:
    """Run the schema over a batch of inputs; returns (logits, cache).

    Dense layers flatten whatever rank they receive; Conv3x3 expects
    (batch, H, W, channels). The terminal Softmax marker is a no-op here;
    loss and gradients use it through softmax_cross_entropy.
    """
    views = _param_views(params.schema, params.flat)
    act = np.asarray(x, dtype=params.flat.dtype)
    cache: list = []
    for layer, view in zip(params.schema, views):
        if isinstance(layer, Dense):
            flat_in = act.reshape(act.shape[0], -1)
            if flat_in.shape[1] != layer.in_features:
                raise ShapeMismatch(
                    f"Dense expects {layer.in_features} features, got {flat_in.shape[1]}")
            w, b = view
            cache.append((act.shape, flat_in))
            act = flat_in @ w + b
        elif isinstance(layer, Conv3x3):
            if act.ndim != 4 or act.shape[3] != layer.in_channels:
                raise ShapeMismatch(
                    f"Conv3x3 expects (B,H,W,{layer.in_channels}), got {act.shape}")
            w, b = view
            cols = _im2col(act)
            cache.append((act, cols))
            act = _conv_forward(act, cols, w, b)
        elif isinstance(layer, MaxPool2):
            act, pool_cache = _pool_forward(act)
            cache.append(pool_cache)
        elif isinstance(layer, ReLU):
            cache.append(act > 0)
            act = np.maximum(act, 0)
        elif isinstance(layer, Softmax):
            cache.append(None)
        else:
            raise SchemaMismatch(f"unknown layer {layer!r}")
    cache.append(act)  # final logits, consumed by backward
    return act, cache


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    loss = -log_probs[np.arange(n), labels].mean()
    dlogits = np.exp(log_probs)
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return float(loss), dlogits


def backward(params: ModelParams, labels: np.ndarray, cache: list) -> np.ndarray:
    """Gradient of the mean cross-entropy w.r.t. the flat parameter vector,
    from a matching forward's cache."""
    logits = cache[-1]
    _, delta = softmax_cross_entropy(logits, labels)
    return _backward_from_delta(params, delta, cache)


def loss_and_grad(params: ModelParams, x: np.ndarray, labels: np.ndarray):
    """One forward/backward pass: (mean cross-entropy, flat gradient)."""
    logits, cache = forward(params, x)
    loss, delta = softmax_cross_entropy(logits, labels)
    return loss, _backward_from_delta(params, delta, cache)


def _backward_from_delta(params: ModelParams, delta: np.ndarray,
                         cache: list) -> np.ndarray:
    views = _param_views(params.schema, params.flat)
    grad_flat = np.zeros_like(params.flat)
    grad_views = _param_views(params.schema, grad_flat)
    for i in range(len(params.schema) - 1, -1, -1):
        layer = params.schema[i]
        if isinstance(layer, Dense):
            in_shape, flat_in = cache[i]
            w, _ = views[i]
            gw, gb = grad_views[i]
            gw[...] = flat_in.T @ delta
            gb[...] = delta.sum(axis=0)
            delta = (delta @ w.T).reshape(in_shape)
        elif isinstance(layer, Conv3x3):
            x_in, cols = cache[i]
            w, _ = views[i]
            gw, gb = grad_views[i]
            delta, dw, db = _conv_backward(delta, x_in, cols, w)
            gw[...] = dw
            gb[...] = db
        elif isinstance(layer, MaxPool2):
            delta = _pool_backward(delta, cache[i])
        elif isinstance(layer, ReLU):
            delta = delta * cache[i]
        elif isinstance(layer, Softmax):
            continue
    return grad_flat


@dataclass
class OptState:
    """Adam moments and hyperparameters for one flat parameter vector."""

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.float32))
    v: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.float32))
    step: int = 0

    @classmethod
    def fresh(cls, n_params: int, lr: float = 0.001, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8,
              dtype=np.float32) -> "OptState":
        return cls(lr, beta1, beta2, eps,
                   np.zeros(n_params, dtype=dtype), np.zeros(n_params, dtype=dtype), 0)


def adam_step(flat: np.ndarray, grads: np.ndarray, opt: OptState) -> np.ndarray:
    """Standard bias-corrected Adam update; mutates opt, returns new params."""
    if not np.all(np.isfinite(grads)):
        raise NonFiniteGradient("gradient contains NaN or Inf")
    if flat.shape != grads.shape:
        raise ShapeMismatch(f"params {flat.shape} vs grads {grads.shape}")
    opt.step += 1
    opt.m = opt.beta1 * opt.m + (1.0 - opt.beta1) * grads
    opt.v = opt.beta2 * opt.v + (1.0 - opt.beta2) * grads * grads
    m_hat = opt.m / (1.0 - opt.beta1 ** opt.step)
    v_hat = opt.v / (1.0 - opt.beta2 ** opt.step)
    return flat - np.asarray(opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps),
                             dtype=flat.dtype)


def fedavg_aggregate(client_params: Sequence[ModelParams],
                     weights: Sequence[float]) -> ModelParams:
    """Elementwise weighted mean of client parameter vectors.

    Accumulates in float64 so the result stays inside the elementwise convex
    hull of the inputs after the cast back to the parameter dtype.
    """
    if not client_params:
        raise SchemaMismatch("no client params to aggregate")
    schema = client_params[0].schema
    for p in client_params[1:]:
        if p.schema != schema:
            raise SchemaMismatch("client schemas differ")
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(client_params),):
        raise SchemaMismatch(f"{len(client_params)} clients vs weights {w.shape}")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-6:
        raise TrainingError(f"weights must be nonnegative and sum to 1, got {w}")
    w = w / w.sum()
    acc = np.zeros(client_params[0].flat.size, dtype=np.float64)
    for wi, p in zip(w, client_params):
        if not np.all(np.isfinite(p.flat)):
            raise NonFiniteParam("client parameters contain NaN or Inf")
        acc += wi * p.flat.astype(np.float64)
    return ModelParams(schema, acc.astype(client_params[0].flat.dtype))


def evaluate(params: ModelParams, x: np.ndarray, labels: np.ndarray,
             batch_size: int = 512) -> float:
    """Top-1 accuracy, evaluated in chunks."""
    correct = 0
    for i in range(0, x.shape[0], batch_size):
        logits, _ = forward(params, x[i:i + batch_size])
        correct += int((logits.argmax(axis=1) == labels[i:i + batch_size]).sum())
    return correct / x.shape[0]


@dataclass
class TrainClient:
    """A client's training arrays: pixels already scaled to [0, 1]."""

    client_id: int
    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return self.x.shape[0]


def training_arrays(dataset: ClientDataset) -> TrainClient:
    """Stack a client dataset into model-boundary arrays (pixels / 255)."""
    x = np.stack([ex.pixels for ex in dataset.examples]).astype(np.float32) / 255.0
    y = np.array([ex.label for ex in dataset.examples], dtype=np.int64)
    return TrainClient(dataset.client_id, x, y)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 128
    local_epochs: int = 1
    participation_fraction: float = 1.0
    seed: int = 0


@dataclass(frozen=True)
class RoundReport:
    round_index: int
    test_accuracy: float
    client_losses: tuple[float, ...]
    mean_train_loss: float


def local_train(global_params: ModelParams, client: TrainClient, cfg: TrainConfig,
                rng: np.random.Generator) -> tuple[ModelParams, float]:
    """Local epochs of Adam from fresh optimizer state; returns (params, mean loss)."""
    params = global_params.copy()
    opt = OptState.fresh(params.flat.size, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps,
                         dtype=params.flat.dtype)
    n = len(client)
    losses = []
    for _ in range(cfg.local_epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            loss, grad = loss_and_grad(params, client.x[idx], client.y[idx])
            params.flat = adam_step(params.flat, grad, opt)
            losses.append(loss)
    return params, float(np.mean(losses)) if losses else 0.0


def run_round(global_params: ModelParams, clients: Sequence[TrainClient],
              test_x: np.ndarray, test_y: np.ndarray, cfg: TrainConfig,
              round_index: int) -> tuple[ModelParams, RoundReport]:
    """One communication round: broadcast, local training, weighted averaging.

    Aggregation weights are proportional to each participant's local dataset
    size (pseudo-images included). Per-client shuffle streams are derived from
    (seed, round, client id), so execution order never changes results.
    """
    if cfg.participation_fraction < 1.0:
        n_pick = max(1, math.ceil(cfg.participation_fraction * len(clients)))
        pick_rng = rng_for(cfg.seed, "participation", round_index)
        chosen = sorted(pick_rng.choice(len(clients), size=n_pick, replace=False))
        participants = [clients[i] for i in chosen]
    else:
        participants = list(clients)

    trained = []
    losses = []
    for client in participants:
        shuffle_rng = rng_for(cfg.seed, "shuffle", round_index, client.client_id)
        params, loss = local_train(global_params, client, cfg, shuffle_rng)
        trained.append(params)
        losses.append(loss)
    sizes = np.array([len(c) for c in participants], dtype=np.float64)
    new_global = fedavg_aggregate(trained, sizes / sizes.sum())
    accuracy = evaluate(new_global, test_x, test_y)
    report = RoundReport(round_index, accuracy, tuple(losses), float(np.mean(losses)))
    return new_global, report


def build_model(name: str, input_dims: tuple[int, int, int],
                num_classes: int) -> tuple[Layer, ...]:
    """Schemas for the three desk-scale models: logreg, mlp, cnn."""
    h, w, ch = input_dims
    flat = h * w * ch
    if name == "logreg":
        return (Dense(flat, num_classes), Softmax())
    if name == "mlp":
        return (Dense(flat, 256), ReLU(), Dense(256, num_classes), Softmax())
    if name == "cnn":
        h2, w2 = h // 2, w // 2
        h4, w4 = h2 // 2, w2 // 2
        return (Conv3x3(ch, 8), MaxPool2(), ReLU(),
                Conv3x3(8, 16), MaxPool2(), ReLU(),
                Dense(h4 * w4 * 16, num_classes), Softmax())
    raise TrainingError(f"unknown model {name!r}; pick logreg, mlp, or cnn")
