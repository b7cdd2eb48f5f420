"""Batch normalization with train/eval modes and target-statistics adaptation.

The train path normalizes each channel by the biased batch statistics and
folds them into the running estimates with ``running <- m*running +
(1-m)*batch``. The eval path is a pure function of the stored running
estimates. ``collect_target_statistics`` re-estimates every BN layer's
running statistics as the equal-weight average of per-batch statistics over
one pass of an unlabeled image set, leaving all weights untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .ops import ShapeError


@dataclass
class BNState:
    """Per-channel affine parameters and running statistics of one BN layer."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5

    def __post_init__(self):
        c = self.gamma.shape[0]
        for name in ("beta", "running_mean", "running_var"):
            if getattr(self, name).shape != (c,):
                raise ShapeError(f"BNState.{name} shape != ({c},)")
        if not 0 < self.momentum <= 1:
            raise ValueError(f"BN momentum must be in (0, 1], got {self.momentum}")
        if self.epsilon <= 0:
            raise ValueError(f"BN epsilon must be > 0, got {self.epsilon}")


def bn_init(channels: int, dtype=np.float32) -> BNState:
    return BNState(
        gamma=np.ones(channels, dtype=dtype),
        beta=np.zeros(channels, dtype=dtype),
        running_mean=np.zeros(channels, dtype=dtype),
        running_var=np.ones(channels, dtype=dtype),
    )


def batch_stats(x: np.ndarray):
    """Per-channel mean and biased variance over (N, H, W) of an NCHW batch."""
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    return mean, var


def ema_running_update(running_mean, running_var, batch_mean, batch_var,
                       momentum: float):
    """running <- momentum*running + (1-momentum)*batch, for both statistics."""
    m = momentum
    return (m * running_mean + (1 - m) * batch_mean,
            m * running_var + (1 - m) * batch_var)


def bn_apply(x: np.ndarray, mean, var, gamma, beta, epsilon: float):
    """gamma * (x - mean)/sqrt(var + eps) + beta with per-channel factors."""
    inv_std = 1.0 / np.sqrt(var + epsilon)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    return gamma[None, :, None, None] * xhat + beta[None, :, None, None], xhat, inv_std


def bn_forward(x: np.ndarray, state: BNState, train: bool):
    """Normalize an NCHW batch.

    Returns (output, state', cache). In train mode state' carries the
    updated running estimates and cache holds values for bn_backward; in
    eval mode the input state is returned untouched and cache is None.
    """
    if x.ndim != 4 or x.shape[1] != state.gamma.shape[0]:
        raise ShapeError(
            f"bn_forward: input {x.shape} does not match {state.gamma.shape[0]} channels")
    if train:
        n = x.shape[0] * x.shape[2] * x.shape[3]
        if n < 2:
            raise ShapeError("bn_forward train mode needs >= 2 values per channel")
        mean, var = batch_stats(x)
        out, xhat, inv_std = bn_apply(x, mean, var, state.gamma, state.beta, state.epsilon)
        rm, rv = ema_running_update(state.running_mean, state.running_var,
                                    mean, var, state.momentum)
        new_state = replace(
            state,
            running_mean=rm.astype(x.dtype),
            running_var=rv.astype(x.dtype),
        )
        cache = (xhat, inv_std, state.gamma)
        return out, new_state, cache
    out, _, _ = bn_apply(x, state.running_mean, state.running_var,
                         state.gamma, state.beta, state.epsilon)
    return out, state, None


def bn_backward(dout: np.ndarray, cache):
    """Gradients of train-mode bn_forward w.r.t. (input, gamma, beta)."""
    if cache is None:
        raise ValueError("bn_backward: no gradient path for eval-mode forward")
    xhat, inv_std, gamma = cache
    n = dout.shape[0] * dout.shape[2] * dout.shape[3]
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    dbeta = dout.sum(axis=(0, 2, 3))
    dxhat = dout * gamma[None, :, None, None]
    s1 = dxhat.sum(axis=(0, 2, 3))
    s2 = (dxhat * xhat).sum(axis=(0, 2, 3))
    dx = (inv_std[None, :, None, None] / n) * (
        n * dxhat - s1[None, :, None, None] - xhat * s2[None, :, None, None]
    )
    return dx, dgamma, dbeta


def collect_target_statistics(model, images, batch_size: int = 4):
    """AdaBN: one pass over the image set, replacing every BN layer's
    running statistics with the equal-weight average of per-batch statistics.

    The sweep runs the backbone with each batch normalized by its own batch
    statistics (so later layers see activations consistent with earlier
    layers' fresh statistics). Weights, gamma and beta are bit-identical in
    the returned model.
    """
    from .detector import backbone_batch_statistics, images_to_batch

    images = list(images)
    if not images:
        raise ValueError("collect_target_statistics: empty target stream")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")

    sums = None
    n_batches = 0
    for start in range(0, len(images), batch_size):
        batch = images_to_batch(images[start:start + batch_size])
        stats = backbone_batch_statistics(model, batch)
        if sums is None:
            sums = [(m.astype(np.float64), v.astype(np.float64)) for m, v in stats]
        else:
            sums = [(sm + m, sv + v) for (sm, sv), (m, v) in zip(sums, stats)]
        n_batches += 1

    adapted = model.copy()
    for (layer_name, _), (sm, sv) in zip(model.arch.bn_layers(), sums):
        adapted.params[f"{layer_name}.running_mean"] = (sm / n_batches).astype(np.float32)
        adapted.params[f"{layer_name}.running_var"] = (sv / n_batches).astype(np.float32)
    return adapted
