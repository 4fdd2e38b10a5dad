"""3D convolutional VAE with an MLP head on the latent mean, plus its losses.

The encoder maps a two-channel (ED, ES) voxel grid to ``(mu, log_var)``; the
decoder maps a latent vector back to a two-channel soft segmentation; the
classifier sees ``mu`` only. Training minimises

    dice + alpha * KL + beta * cross-entropy.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .layers import LayerSpec, Parameter, apply_layer, init_parameters
from .tensor import ShapeError, Tensor

DICE_SMOOTH = 1.0


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 32
    channels: int = 2
    latent_dim: int = 16
    encoder_channels: tuple = (16, 32, 64)
    kernel: int = 4
    stride: int = 2
    pad: int = 1
    mlp_hidden: tuple = (32,)
    n_classes: int = 2
    alpha: float = 0.1
    beta: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(self.encoder_channels))
        object.__setattr__(self, "mlp_hidden", tuple(self.mlp_hidden))
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")
        sizes = self.spatial_sizes()
        if min(sizes) < 1:
            raise ValueError(f"input size {self.input_size} collapses below one voxel: {sizes}")
        back = sizes[-1]
        for _ in self.encoder_channels:
            back = T.transpose_output_extent(back, self.kernel, self.stride, self.pad)
        if back != self.input_size:
            raise ValueError(
                f"decoder would produce {back}^3 for a {self.input_size}^3 input; "
                "pick an input size divisible by the total stride"
            )

    def spatial_sizes(self) -> list:
        sizes = [self.input_size]
        for _ in self.encoder_channels:
            sizes.append(T.conv_output_extent(sizes[-1], self.kernel, self.stride, self.pad))
        return sizes

    @property
    def bottleneck(self) -> tuple:
        return (self.encoder_channels[-1],) + (self.spatial_sizes()[-1],) * 3

    @property
    def flat_dim(self) -> int:
        return int(np.prod(self.bottleneck))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        d["mlp_hidden"] = list(self.mlp_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def encoder_specs(self) -> list:
        specs, c_in = [], self.channels
        for i, c_out in enumerate(self.encoder_channels, start=1):
            specs.append(LayerSpec(f"encoder.conv{i}", "conv3d", c_in, c_out, self.kernel, self.stride, self.pad, "relu"))
            c_in = c_out
        return specs

    def head_specs(self) -> list:
        return [
            LayerSpec("encoder.mu", "dense", self.flat_dim, self.latent_dim),
            LayerSpec("encoder.log_var", "dense", self.flat_dim, self.latent_dim),
        ]

    def decoder_specs(self) -> list:
        specs = [LayerSpec("decoder.dense", "dense", self.latent_dim, self.flat_dim, activation="relu")]
        chans = list(self.encoder_channels[::-1]) + [self.channels]
        for i, (c_in, c_out) in enumerate(zip(chans[:-1], chans[1:]), start=1):
            act = "sigmoid" if i == len(chans) - 1 else "relu"
            specs.append(LayerSpec(f"decoder.deconv{i}", "conv3d_transpose", c_in, c_out, self.kernel, self.stride, self.pad, act))
        return specs

    def mlp_specs(self) -> list:
        specs, n_in = [], self.latent_dim
        for i, h in enumerate(self.mlp_hidden, start=1):
            specs.append(LayerSpec(f"mlp.fc{i}", "dense", n_in, h, activation="relu"))
            n_in = h
        specs.append(LayerSpec("mlp.out", "dense", n_in, self.n_classes))
        return specs

    def layer_specs(self) -> list:
        return self.encoder_specs() + self.head_specs() + self.decoder_specs() + self.mlp_specs()


PRESETS = {
    "desk32": ModelConfig(),
    "paper80": ModelConfig(input_size=80, latent_dim=64),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    d = PRESETS[name].to_dict()
    d.update({k: v for k, v in overrides.items() if v is not None})
    return ModelConfig.from_dict(d)


@dataclass
class LatentCode:
    mu: Tensor
    log_var: Tensor

    def __post_init__(self):
        if self.mu.shape != self.log_var.shape:
            raise ShapeError(f"mu {self.mu.shape} and log_var {self.log_var.shape} differ")

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_var.data / 2.0)


@dataclass
class ClassDistribution:
    probs: np.ndarray
    logits: np.ndarray = field(default=None, repr=False)

    def predicted(self) -> np.ndarray:
        return np.argmax(self.probs, axis=-1)


class VAENet:
    """Parameters plus the forward passes; holds no optimizer logic."""

    def __init__(self, config: ModelConfig, seed: int = 0, params=None):
        self.config = config
        self.specs = config.layer_specs()
        self.params = params if params is not None else init_parameters(self.specs, seed)
        expected = parameter_shapes(self.specs)
        actual = [(p.name, tuple(p.shape)) for p in self.params]
        if expected != actual:
            for i in range(max(len(expected), len(actual))):
                e = expected[i] if i < len(expected) else None
                a = actual[i] if i < len(actual) else None
                if e != a:
                    raise ShapeError(f"parameter mismatch at position {i}: architecture wants {e}, got {a}")
        self._by_name = {p.name: p for p in self.params}
        self._enc = config.encoder_specs()
        self._heads = config.head_specs()
        self._dec = config.decoder_specs()
        self._mlp = config.mlp_specs()

    def parameter(self, name: str) -> Parameter:
        return self._by_name[name]

    def n_parameters(self) -> int:
        return int(sum(p.value.size for p in self.params))

    def _layer(self, spec: LayerSpec, x: Tensor) -> Tensor:
        w = self._by_name[spec.weight_name()].value
        b = self._by_name[f"{spec.name}.bias"].value
        return apply_layer(spec, w, b, x)

    def encode(self, x) -> LatentCode:
        x = x if isinstance(x, Tensor) else Tensor(x)
        c = self.config
        want = (c.channels,) + (c.input_size,) * 3
        if x.ndim != 5 or x.shape[1:] != want:
            raise ShapeError(f"encoder expects [N, {', '.join(map(str, want))}], got {x.shape}")
        h = x
        for spec in self._enc:
            h = self._layer(spec, h)
        h = T.reshape(h, (x.shape[0], c.flat_dim))
        return LatentCode(self._layer(self._heads[0], h), self._layer(self._heads[1], h))

    def reparameterize(self, code: LatentCode, eps) -> Tensor:
        """``z = mu + exp(log_var / 2) * eps``.

        ``eps`` is either a standard-normal array shaped like ``mu`` or a
        ``numpy.random.Generator`` to draw it from.
        """
        if isinstance(eps, np.random.Generator):
            eps = eps.standard_normal(code.mu.shape)
        eps = Tensor(eps)
        if eps.shape != code.mu.shape:
            raise ShapeError(f"noise shape {eps.shape} does not match mu {code.mu.shape}")
        sigma = T.exp(T.scale(code.log_var, 0.5))
        return T.add(code.mu, T.mul(sigma, eps))

    def decode(self, z) -> Tensor:
        z = z if isinstance(z, Tensor) else Tensor(np.atleast_2d(z))
        if z.ndim != 2 or z.shape[1] != self.config.latent_dim:
            raise ShapeError(f"decoder expects [N, {self.config.latent_dim}], got {z.shape}")
        h = self._layer(self._dec[0], z)
        h = T.reshape(h, (z.shape[0],) + self.config.bottleneck)
        for spec in self._dec[1:]:
            h = self._layer(spec, h)
        return h

    def logits(self, mu) -> Tensor:
        h = mu if isinstance(mu, Tensor) else Tensor(np.atleast_2d(mu))
        if h.ndim != 2 or h.shape[1] != self.config.latent_dim:
            raise ShapeError(f"classifier expects [N, {self.config.latent_dim}], got {h.shape}")
        for spec in self._mlp:
            h = self._layer(spec, h)
        return h

    def classify(self, mu) -> ClassDistribution:
        logits = self.logits(mu)
        return ClassDistribution(T.softmax(logits).data, logits.data)

    def total_loss(self, x, labels, eps, alpha: float = None, beta: float = None):
        """Training objective for one batch; returns ``(total, components)``.

        ``components`` maps ``rec``, ``kl`` and ``mlp`` to the unweighted term
        tensors. ``eps`` feeds :meth:`reparameterize`.
        """
        alpha = self.config.alpha if alpha is None else alpha
        beta = self.config.beta if beta is None else beta
        x = x if isinstance(x, Tensor) else Tensor(x)
        code = self.encode(x)
        z = self.reparameterize(code, eps)
        x_hat = self.decode(z)
        rec = dice_loss(x, x_hat)
        kl = kl_loss(code)
        ce = ce_loss(self.logits(code.mu), labels)
        total = T.add(T.add(rec, T.scale(kl, alpha)), T.scale(ce, beta))
        return total, {"rec": rec, "kl": kl, "mlp": ce}

    def evaluate(self, x):
        """Test-time pass: decode from ``mu`` without sampling."""
        code = self.encode(x)
        return code, self.decode(code.mu), self.classify(code.mu)


def parameter_shapes(specs) -> list:
    """``(name, shape)`` pairs in parameter order, without drawing values."""
    out = []
    for s in specs:
        out.append((s.weight_name(), s.weight_shape))
        out.append((f"{s.name}.bias", (s.n_out,)))
    return out


def dice_loss(x, x_hat, smooth: float = DICE_SMOOTH) -> Tensor:
    """Soft Dice loss, computed per (sample, channel) and averaged."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    x_hat = x_hat if isinstance(x_hat, Tensor) else Tensor(x_hat)
    if x.shape != x_hat.shape:
        raise ShapeError(f"dice_loss shape mismatch: {x.shape} vs {x_hat.shape}")
    if x.ndim < 3:
        raise ShapeError(f"dice_loss expects [N, C, ...], got {x.shape}")
    axes = tuple(range(2, x.ndim))
    inter = T.sum(T.mul(x, x_hat), axis=axes)
    denom = T.add(T.add(T.sum(x, axis=axes), T.sum(x_hat, axis=axes)), Tensor(smooth))
    ratio = T.div(T.add(T.scale(inter, 2.0), Tensor(smooth)), denom)
    return T.sub(Tensor(1.0), T.mean(ratio))


def kl_loss(code: LatentCode) -> Tensor:
    """Batch mean of KL(N(mu, sigma^2) || N(0, I))."""
    mu, lv = code.mu, code.log_var
    terms = T.sub(T.sub(T.add(T.mul(mu, mu), T.exp(lv)), Tensor(1.0)), lv)
    return T.scale(T.sum(terms), 0.5 / mu.shape[0])


def ce_loss(logits, labels) -> Tensor:
    """Batch-mean cross-entropy from logits via log-softmax."""
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    labels = np.asarray(labels, dtype=int).reshape(-1)
    if labels.shape[0] != logits.shape[0]:
        raise ShapeError(f"{labels.shape[0]} labels for {logits.shape[0]} predictions")
    onehot = np.zeros(logits.shape)
    onehot[np.arange(labels.size), labels] = 1.0
    picked = T.sum(T.mul(T.log_softmax(logits), Tensor(onehot)))
    return T.scale(picked, -1.0 / labels.size)


def hard_dice(x: np.ndarray, x_hat: np.ndarray, threshold: float = 0.5) -> float:
    """Mean Dice overlap of thresholded masks over samples and channels."""
    a = np.asarray(x) >= threshold
    b = np.asarray(x_hat) >= threshold
    axes = tuple(range(2, a.ndim))
    inter = (a & b).sum(axis=axes)
    denom = a.sum(axis=axes) + b.sum(axis=axes)
    score = np.where(denom > 0, 2.0 * inter / np.maximum(denom, 1), 1.0)
    return float(score.mean())


def noise_for(seed: int, iteration: int, indices, dim: int) -> np.ndarray:
    """Reparameterization noise keyed by (seed, iteration, sample index)."""
    rows = [np.random.default_rng([seed, iteration, int(i)]).standard_normal(dim) for i in indices]
    return np.stack(rows) if rows else np.zeros((0, dim))
