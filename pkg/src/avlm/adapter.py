"""Trainable text/image adapter: a three-layer perceptron with batch norm.

Layer structure (fixed): affine -> batch norm -> ReLU for the two hidden
layers, affine -> batch norm (no activation) on the output layer.  The
un-normalized output row z' is decomposed into z' = kappa * mu with
|mu| = 1, kappa = |z'|, which parameterizes the spherical distribution of
the corresponding input; for the Gaussian family the output is split into
mean and log-variance halves instead.

Forward and backward passes are explicit (no autodiff).  Train-mode
forward normalizes with batch statistics and updates the running
mean/variance in place; eval-mode forward uses the running statistics and
never mutates the parameters.

Checkpoint/optimizer parameter order (per adapter):
    layer{i}.weight, layer{i}.bias, layer{i}.bn_scale, layer{i}.bn_shift
    for i in 0..2, followed by log_tau and siglip_bias; the batch-norm
    running mean/var (per layer) are state, not trainables.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

BN_EPS = 1e-5
N_LAYERS = 3

FAMILIES = ("vmf", "ps", "gauss", "deterministic")
VARIANTS = ("asym_text", "asym_image", "symmetric")


@dataclass
class AdapterConfig:
    """Architecture and distribution-family settings.

    d_out defaults to d_in (2 * d_in for the Gaussian family, whose output
    concatenates mean and log-variance).
    """

    d_in: int
    d_hidden: int = 512
    d_out: int | None = None
    dist_family: str = "vmf"
    variant: str = "asym_text"
    bn_momentum: float = 0.1
    kappa_floor: float = 1e-6

    def __post_init__(self):
        if self.dist_family not in FAMILIES:
            raise ValueError(f"unknown dist_family {self.dist_family!r}, expected one of {FAMILIES}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.d_in < 2:
            raise ValueError(f"d_in must be >= 2, got {self.d_in}")
        if self.d_hidden < 1:
            raise ValueError(f"d_hidden must be >= 1, got {self.d_hidden}")
        expected = 2 * self.d_in if self.dist_family == "gauss" else self.d_in
        if self.d_out is None:
            self.d_out = expected
        elif self.d_out != expected:
            raise ValueError(
                f"d_out must be {expected} for family {self.dist_family!r}, got {self.d_out}"
            )
        if not (0.0 < self.bn_momentum < 1.0):
            raise ValueError(f"bn_momentum must lie in (0, 1), got {self.bn_momentum}")
        if self.kappa_floor <= 0:
            raise ValueError(f"kappa_floor must be positive, got {self.kappa_floor}")


@dataclass
class AdapterParams:
    """Weights, biases and batch-norm state of one adapter, plus the
    trainable log-temperature and sigmoid-loss bias."""

    config: AdapterConfig
    weights: list
    biases: list
    bn_scale: list
    bn_shift: list
    bn_running_mean: list
    bn_running_var: list
    log_tau: float = 0.0
    siglip_bias: float = -10.0

    def layer_dims(self) -> list:
        c = self.config
        return [c.d_in, c.d_hidden, c.d_hidden, c.d_out]

    def trainable_items(self) -> list:
        """(name, array) pairs in the documented deterministic order."""
        items = []
        for i in range(N_LAYERS):
            items.append((f"layer{i}.weight", self.weights[i]))
            items.append((f"layer{i}.bias", self.biases[i]))
            items.append((f"layer{i}.bn_scale", self.bn_scale[i]))
            items.append((f"layer{i}.bn_shift", self.bn_shift[i]))
        items.append(("log_tau", np.asarray(self.log_tau, dtype=np.float64)))
        items.append(("siglip_bias", np.asarray(self.siglip_bias, dtype=np.float64)))
        return items

    def state_items(self) -> list:
        items = []
        for i in range(N_LAYERS):
            items.append((f"layer{i}.bn_running_mean", self.bn_running_mean[i]))
        for i in range(N_LAYERS):
            items.append((f"layer{i}.bn_running_var", self.bn_running_var[i]))
        return items

    def set_trainable(self, name: str, value: np.ndarray) -> None:
        if name == "log_tau":
            self.log_tau = float(value)
            return
        if name == "siglip_bias":
            self.siglip_bias = float(value)
            return
        layer, tensor = name.split(".")
        i = int(layer.removeprefix("layer"))
        {"weight": self.weights, "bias": self.biases,
         "bn_scale": self.bn_scale, "bn_shift": self.bn_shift}[tensor][i] = value

    def copy(self) -> "AdapterParams":
        return AdapterParams(
            config=self.config,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            bn_scale=[g.copy() for g in self.bn_scale],
            bn_shift=[b.copy() for b in self.bn_shift],
            bn_running_mean=[m.copy() for m in self.bn_running_mean],
            bn_running_var=[v.copy() for v in self.bn_running_var],
            log_tau=self.log_tau,
            siglip_bias=self.siglip_bias,
        )


@dataclass
class AdapterGrads:
    """Gradients aligned with ``AdapterParams.trainable_items`` order."""

    weights: list
    biases: list
    bn_scale: list
    bn_shift: list
    log_tau: float = 0.0
    siglip_bias: float = 0.0

    def items(self) -> list:
        out = []
        for i in range(N_LAYERS):
            out.append((f"layer{i}.weight", self.weights[i]))
            out.append((f"layer{i}.bias", self.biases[i]))
            out.append((f"layer{i}.bn_scale", self.bn_scale[i]))
            out.append((f"layer{i}.bn_shift", self.bn_shift[i]))
        out.append(("log_tau", np.asarray(self.log_tau, dtype=np.float64)))
        out.append(("siglip_bias", np.asarray(self.siglip_bias, dtype=np.float64)))
        return out


@dataclass
class _LayerCache:
    x_in: np.ndarray      # input to the affine map
    x_hat: np.ndarray     # batch-normalized pre-scale activations
    inv_std: np.ndarray   # 1 / sqrt(batch_var + eps)
    bn_out: np.ndarray    # scale * x_hat + shift (pre-activation)


@dataclass
class BatchOutput:
    """Adapter output; ``cache`` is present iff forward ran in train mode."""

    raw: np.ndarray
    cache: list | None = None


def init_adapter(config: AdapterConfig, seed: int) -> AdapterParams:
    """He-initialized weights, unit batch-norm scale, zero shifts/biases."""
    rng = np.random.default_rng(seed)
    dims = [config.d_in, config.d_hidden, config.d_hidden, config.d_out]
    weights, biases, scale, shift, rmean, rvar = [], [], [], [], [], []
    for i in range(N_LAYERS):
        fan_in, fan_out = dims[i], dims[i + 1]
        weights.append(rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in))
        biases.append(np.zeros(fan_out))
        scale.append(np.ones(fan_out))
        shift.append(np.zeros(fan_out))
        rmean.append(np.zeros(fan_out))
        rvar.append(np.ones(fan_out))
    return AdapterParams(config, weights, biases, scale, shift, rmean, rvar)


def forward(params: AdapterParams, batch: np.ndarray, mode: str) -> BatchOutput:
    """Run the three-layer stack.

    Train mode requires a batch of at least 2 rows (batch statistics),
    updates the running statistics in place and returns a backward cache;
    eval mode uses running statistics, is row-independent and pure.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.config.d_in:
        raise ValueError(
            f"expected a (B, {params.config.d_in}) batch, got shape {x.shape}"
        )
    train = mode == "train"
    if train and x.shape[0] < 2:
        raise ValueError("train-mode forward needs a batch of at least 2 rows")
    if x.shape[0] < 1:
        raise ValueError("empty batch")

    mom = params.config.bn_momentum
    caches = [] if train else None
    h = x
    for i in range(N_LAYERS):
        a = h @ params.weights[i] + params.biases[i]
        if train:
            mean = a.mean(axis=0)
            var = a.var(axis=0)
            params.bn_running_mean[i] = (1.0 - mom) * params.bn_running_mean[i] + mom * mean
            params.bn_running_var[i] = (1.0 - mom) * params.bn_running_var[i] + mom * var
        else:
            mean = params.bn_running_mean[i]
            var = params.bn_running_var[i]
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        x_hat = (a - mean) * inv_std
        y = params.bn_scale[i] * x_hat + params.bn_shift[i]
        if train:
            caches.append(_LayerCache(x_in=h, x_hat=x_hat, inv_std=inv_std, bn_out=y))
        h = np.maximum(y, 0.0) if i < N_LAYERS - 1 else y
    return BatchOutput(raw=h, cache=caches)


def backward(params: AdapterParams, output: BatchOutput, grad_raw: np.ndarray) -> AdapterGrads:
    """Backpropagate d(loss)/d(raw) to every trainable tensor.

    The batch-norm backward accounts for the dependence of the batch mean
    and (biased) variance on the inputs.  Gradients for log_tau and
    siglip_bias are produced by the objective and merged by the trainer;
    they are returned as zeros here.
    """
    if output.cache is None:
        raise ValueError("backward requires a train-mode forward (missing cache)")
    g = np.asarray(grad_raw, dtype=np.float64)
    if g.shape != output.raw.shape:
        raise ValueError(f"grad_raw shape {g.shape} does not match output shape {output.raw.shape}")

    d_w = [None] * N_LAYERS
    d_b = [None] * N_LAYERS
    d_scale = [None] * N_LAYERS
    d_shift = [None] * N_LAYERS
    for i in range(N_LAYERS - 1, -1, -1):
        c = output.cache[i]
        if i < N_LAYERS - 1:
            g = g * (c.bn_out > 0.0)
        d_shift[i] = g.sum(axis=0)
        d_scale[i] = (g * c.x_hat).sum(axis=0)
        dxh = g * params.bn_scale[i]
        n = g.shape[0]
        da = (c.inv_std / n) * (
            n * dxh - dxh.sum(axis=0) - c.x_hat * (dxh * c.x_hat).sum(axis=0)
        )
        d_w[i] = c.x_in.T @ da
        d_b[i] = da.sum(axis=0)
        g = da @ params.weights[i].T
    return AdapterGrads(weights=d_w, biases=d_b, bn_scale=d_scale, bn_shift=d_shift)


def decompose(raw_row: np.ndarray, kappa_floor: float = 1e-6):
    """Split an output row into (mu, kappa) with kappa = max(|row|, floor).

    A numerically zero row falls back to the first standard basis vector
    with a logged warning.
    """
    r = np.asarray(raw_row, dtype=np.float64)
    norm = float(np.linalg.norm(r))
    if norm > 1e-12:
        mu = r / norm
    else:
        log.warning("degenerate adapter output (|z'| = %.3g); using e1 as direction", norm)
        mu = np.zeros_like(r)
        mu[0] = 1.0
    return mu, max(norm, kappa_floor)


@dataclass
class DecomposedBatch:
    """Per-row distribution parameters extracted from raw adapter outputs."""

    family: str
    mu: np.ndarray | None = None        # (B, d) unit rows
    kappa: np.ndarray | None = None     # (B,)
    norm: np.ndarray | None = None      # (B,) raw row norms (kappa before flooring)
    mean: np.ndarray | None = None      # (B, d) Gaussian means
    log_var: np.ndarray | None = None   # (B, d) Gaussian log-variances

    @property
    def points(self) -> np.ndarray:
        """Point representation of each row (mean direction, or Gaussian mean)."""
        return self.mean if self.family == "gauss" else self.mu


def decompose_batch(raw: np.ndarray, config: AdapterConfig) -> DecomposedBatch:
    raw = np.asarray(raw, dtype=np.float64)
    if config.dist_family == "gauss":
        # mean half is normalized onto the sphere where the deterministic
        # embeddings live; log-variance half passes through unchanged
        d = config.d_in
        half = raw[:, :d]
        norms = np.linalg.norm(half, axis=1)
        ok = norms > 1e-12
        if not np.all(ok):
            log.warning("%d degenerate adapter output rows; using e1 as mean", int((~ok).sum()))
        mean = np.where(ok[:, None], half / np.where(ok, norms, 1.0)[:, None], 0.0)
        mean[~ok, 0] = 1.0
        return DecomposedBatch(family="gauss", mean=mean, log_var=raw[:, d:], norm=norms)
    norms = np.linalg.norm(raw, axis=1)
    ok = norms > 1e-12
    if not np.all(ok):
        log.warning("%d degenerate adapter output rows; using e1 as direction", int((~ok).sum()))
    mu = np.where(ok[:, None], raw / np.where(ok, norms, 1.0)[:, None], 0.0)
    mu[~ok, 0] = 1.0
    kappa = np.maximum(norms, config.kappa_floor)
    family = "cosine" if config.dist_family == "deterministic" else config.dist_family
    return DecomposedBatch(family=family, mu=mu, kappa=kappa, norm=norms)


def normalize_backward(unit: np.ndarray, norm: np.ndarray, d_unit: np.ndarray) -> np.ndarray:
    """Gradient of v/|v| in terms of the unit rows and original norms.

    Degenerate rows (|v| <= 1e-12 were replaced by e1) receive zero gradient.
    """
    ok = norm > 1e-12
    safe = np.where(ok, norm, 1.0)
    radial = (d_unit * unit).sum(axis=1, keepdims=True)
    out = (d_unit - radial * unit) / safe[:, None]
    out[~ok] = 0.0
    return out


def decompose_backward(dec: DecomposedBatch, d_mu: np.ndarray, d_kappa: np.ndarray,
                       kappa_floor: float) -> np.ndarray:
    """Chain (d_mu, d_kappa) back to the raw adapter outputs.

    mu = raw/|raw| and kappa = max(|raw|, floor), so
        d_raw = (d_mu - (d_mu . mu) mu) / |raw| + [|raw| > floor] d_kappa mu.
    """
    d_raw = normalize_backward(dec.mu, dec.norm, d_mu)
    d_raw += np.where((dec.norm > kappa_floor) & (dec.norm > 1e-12), d_kappa, 0.0)[:, None] * dec.mu
    return d_raw


@dataclass
class Model:
    """One or two adapters plus their shared configuration.

    asym_text adapts texts (images stay deterministic points), asym_image
    adapts images, symmetric adapts both.  The primary adapter owns the
    trainable temperature and sigmoid-loss bias.
    """

    config: AdapterConfig
    text_adapter: AdapterParams | None = None
    image_adapter: AdapterParams | None = None

    @property
    def primary(self) -> AdapterParams:
        return self.text_adapter if self.text_adapter is not None else self.image_adapter

    @property
    def log_tau(self) -> float:
        return self.primary.log_tau

    @property
    def siglip_bias(self) -> float:
        return self.primary.siglip_bias

    def adapters(self) -> list:
        out = []
        if self.text_adapter is not None:
            out.append(("text", self.text_adapter))
        if self.image_adapter is not None:
            out.append(("image", self.image_adapter))
        return out

    def trainable_items(self) -> list:
        """Prefixed (name, array) pairs; only the primary adapter
        contributes log_tau / siglip_bias."""
        primary = self.primary
        out = []
        for role, params in self.adapters():
            for name, arr in params.trainable_items():
                if name in ("log_tau", "siglip_bias") and params is not primary:
                    continue
                out.append((f"{role}.{name}", arr))
        return out

    def set_trainable(self, name: str, value: np.ndarray) -> None:
        role, rest = name.split(".", 1)
        {"text": self.text_adapter, "image": self.image_adapter}[role].set_trainable(rest, value)

    def copy(self) -> "Model":
        return Model(
            config=self.config,
            text_adapter=self.text_adapter.copy() if self.text_adapter else None,
            image_adapter=self.image_adapter.copy() if self.image_adapter else None,
        )


def init_model(config: AdapterConfig, seed: int) -> Model:
    """Instantiate the adapters the variant calls for (deterministic per seed)."""
    if config.variant == "asym_text":
        return Model(config, text_adapter=init_adapter(config, seed))
    if config.variant == "asym_image":
        return Model(config, image_adapter=init_adapter(config, seed))
    return Model(
        config,
        text_adapter=init_adapter(config, seed),
        image_adapter=init_adapter(config, seed + 1),
    )


def apply_adapter(params: AdapterParams, embs: np.ndarray) -> DecomposedBatch:
    """Eval-mode forward + decomposition (pure; shared-params safe)."""
    out = forward(params, embs, "eval")
    return decompose_batch(out.raw, params.config)
