"""Mini-batch training loop: SGD with classic momentum and a cosine-annealed
learning rate.

One step runs forward -> decompose -> kernel matrix -> loss -> analytic
backprop -> SGD update.  Pairs are reshuffled every epoch with the seeded
generator; a trailing batch is kept if it still has at least 2 rows (batch
norm needs batch statistics) and dropped only when it degenerates to a
single pair.  Every update asserts parameter finiteness and aborts with a
diagnostic on the first violation, so a diverging run fails loudly instead
of silently producing NaN checkpoints.

Training is bitwise deterministic for a fixed (config, dataset): the
adapter init consumes ``seed`` (and ``seed + 1`` for a second adapter) and
the shuffling generator consumes ``seed + 2``.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .adapter import AdapterConfig, Model, backward, decompose_batch, forward, init_model
from .objective import LikelihoodMatrix, backprop_kernel_batch, infonce, kernel_matrix, siglip_loss

LOSS_KINDS = ("infonce", "siglip")


@dataclass
class TrainConfig:
    """Optimization settings.

    batch_size defaults to the desk-scale 256; 2048 is the documented
    full-scale setting for real encoder embeddings.
    """

    epochs: int
    seed: int = 0
    lr0: float = 1e-2
    lr_min: float = 1e-6
    momentum: float = 0.9
    batch_size: int = 256
    loss_kind: str = "infonce"
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.lr0 <= 0 or self.lr_min <= 0:
            raise ValueError("learning rates must be positive")
        if self.lr_min > self.lr0:
            raise ValueError(f"lr_min ({self.lr_min}) must not exceed lr0 ({self.lr0})")
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")


@dataclass
class TrainHistory:
    step_losses: list = field(default_factory=list)
    epoch_mean_losses: list = field(default_factory=list)
    final_lr: float = 0.0
    wall_seconds: float = 0.0


def cosine_lr(step: int, total_steps: int, lr0: float, lr_min: float) -> float:
    """lr_min + (lr0 - lr_min) (1 + cos(pi step/total)) / 2."""
    if total_steps < 1:
        raise ValueError(f"total_steps must be >= 1, got {total_steps}")
    if not (0 <= step <= total_steps):
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


def sgd_momentum_step(params: dict, grads: dict, velocity: dict, lr: float, momentum: float):
    """Classic momentum: v <- momentum v + g; p <- p - lr v.

    Operates on name-keyed dicts of arrays and returns fresh dicts.
    """
    new_params, new_velocity = {}, {}
    for name, p in params.items():
        g = grads[name]
        if np.shape(g) != np.shape(p):
            raise ValueError(f"shape mismatch for {name!r}: param {np.shape(p)} vs grad {np.shape(g)}")
        v = momentum * velocity[name] + g
        new_velocity[name] = v
        new_params[name] = p - lr * v
    return new_params, new_velocity


def _loss_and_grads(model: Model, texts: np.ndarray, images: np.ndarray, loss_kind: str):
    """One train-mode pass; returns (loss, {role: AdapterGrads})."""
    cfg = model.config
    primary = model.primary

    def run_loss(entries):
        lm = LikelihoodMatrix(entries=entries, kernel="cosine" if cfg.dist_family == "deterministic" else cfg.dist_family)
        if loss_kind == "siglip":
            return siglip_loss(lm, primary.log_tau, primary.siglip_bias)
        return infonce(lm, primary.log_tau)

    if cfg.variant == "asym_text":
        out = forward(model.text_adapter, texts, "train")
        dec = decompose_batch(out.raw, cfg)
        lv = run_loss(kernel_matrix(dec, images))
        d_raw, _ = backprop_kernel_batch(dec, images, lv.d_entries, cfg.kappa_floor)
        grads = backward(model.text_adapter, out, d_raw)
        grads.log_tau = lv.d_log_tau
        grads.siglip_bias = lv.d_bias
        return lv.loss, {"text": grads}

    if cfg.variant == "asym_image":
        out = forward(model.image_adapter, images, "train")
        dec = decompose_batch(out.raw, cfg)
        # rows of the kernel are image distributions; transpose back to
        # the global rows-are-texts orientation
        lv = run_loss(kernel_matrix(dec, texts).T)
        d_raw, _ = backprop_kernel_batch(dec, texts, lv.d_entries.T, cfg.kappa_floor)
        grads = backward(model.image_adapter, out, d_raw)
        grads.log_tau = lv.d_log_tau
        grads.siglip_bias = lv.d_bias
        return lv.loss, {"image": grads}

    # symmetric: both sides are distributions, each scored at the other
    # side's point representation, then averaged
    out_t = forward(model.text_adapter, texts, "train")
    dec_t = decompose_batch(out_t.raw, cfg)
    out_i = forward(model.image_adapter, images, "train")
    dec_i = decompose_batch(out_i.raw, cfg)
    a = kernel_matrix(dec_t, dec_i.points)
    b = kernel_matrix(dec_i, dec_t.points)
    lv = run_loss(0.5 * (a + b.T))

    d_raw_t, d_pts_i = backprop_kernel_batch(dec_t, dec_i.points, 0.5 * lv.d_entries, cfg.kappa_floor)
    d_raw_i, d_pts_t = backprop_kernel_batch(dec_i, dec_t.points, 0.5 * lv.d_entries.T, cfg.kappa_floor)
    d_raw_t += _point_backward(dec_t, d_pts_t, cfg)
    d_raw_i += _point_backward(dec_i, d_pts_i, cfg)

    grads_t = backward(model.text_adapter, out_t, d_raw_t)
    grads_t.log_tau = lv.d_log_tau
    grads_t.siglip_bias = lv.d_bias
    grads_i = backward(model.image_adapter, out_i, d_raw_i)
    return lv.loss, {"text": grads_t, "image": grads_i}


def _point_backward(dec, d_points, cfg: AdapterConfig) -> np.ndarray:
    """Chain gradients w.r.t. a batch's point representation to its raw rows."""
    from .adapter import decompose_backward, normalize_backward

    if dec.family == "gauss":
        d_half = normalize_backward(dec.mean, dec.norm, d_points)
        return np.hstack([d_half, np.zeros_like(d_points)])
    return decompose_backward(dec, d_points, np.zeros(d_points.shape[0]), cfg.kappa_floor)


def train(config: TrainConfig, adapter_config: AdapterConfig, dataset):
    """Train a model on a paired embedding dataset.

    Returns (Model, TrainHistory); with epochs = 0 the freshly initialized
    model is returned unchanged.
    """
    if dataset.n_pairs == 0:
        raise ValueError("dataset has no pairs")
    if dataset.dim != adapter_config.d_in:
        raise ValueError(
            f"dataset dimension {dataset.dim} does not match adapter d_in {adapter_config.d_in}"
        )
    model = init_model(adapter_config, config.seed)
    history = TrainHistory()
    if config.epochs == 0:
        return model, history

    start = time.perf_counter()
    rng = np.random.default_rng(config.seed + 2)
    pairs = dataset.pairs
    n = pairs.shape[0]
    starts = list(range(0, n, config.batch_size))
    sizes = [min(config.batch_size, n - s) for s in starts]
    step_slices = [(s, s + z) for s, z in zip(starts, sizes) if z >= 2]
    if not step_slices:
        raise ValueError("dataset too small: no batch with >= 2 pairs")
    total_steps = config.epochs * len(step_slices)

    velocity = {name: np.zeros_like(arr) for name, arr in model.trainable_items()}
    lr = config.lr0
    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(n) if config.shuffle else np.arange(n)
        epoch_losses = []
        for lo, hi in step_slices:
            idx = order[lo:hi]
            texts = dataset.text_embs[pairs[idx, 0]]
            images = dataset.image_embs[pairs[idx, 1]]
            loss, grads_by_role = _loss_and_grads(model, texts, images, config.loss_kind)

            grad_dict = {}
            for role, grads in grads_by_role.items():
                for name, arr in grads.items():
                    grad_dict[f"{role}.{name}"] = arr
            param_dict = dict(model.trainable_items())
            grad_dict = {name: grad_dict[name] for name in param_dict}

            lr = cosine_lr(step, total_steps, config.lr0, config.lr_min)
            new_params, velocity = sgd_momentum_step(param_dict, grad_dict, velocity, lr, config.momentum)
            for name, value in new_params.items():
                if not np.all(np.isfinite(value)):
                    raise RuntimeError(
                        f"non-finite parameter {name!r} at step {step} (loss {loss!r}); aborting"
                    )
                model.set_trainable(name, value)

            history.step_losses.append(float(loss))
            epoch_losses.append(float(loss))
            step += 1
        history.epoch_mean_losses.append(float(np.mean(epoch_losses)))

    history.final_lr = lr
    history.wall_seconds = time.perf_counter() - start
    return model, history
