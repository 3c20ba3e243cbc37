"""Residual convolutional autoencoder: layers, training and checkpoints.

Architecture (``N`` levels, channel plan ``c_l = base * 2**l``):

* encoder: 3x3x3 stem conv (1 -> c_0); per level two residual blocks at
  ``c_l`` followed by a weight-standardized stride-2 conv to ``c_{l+1}``
  (the top level keeps its width); a 1x1x1 latent head (c_top -> Z).
* decoder: 1x1x1 latent tail (Z -> c_top); per level, from the top, a
  nearest-neighbour x2 upsample with a 1x1x1 channel projection to ``c_l``
  followed by two residual blocks; a linear 1x1x1 output head (c_0 -> 1).

A residual block is ``[WS conv 3x3x3 -> GroupNorm -> activation] x 2`` plus
a 1x1x1 conv skip, summed without a trailing activation.
"""

import dataclasses
import json
import logging
import math
import struct
import typing as t
from pathlib import Path

import numpy as np

from mpae.abc import ActivationKind, LossKind, PaddingMode
from mpae.exceptions import (
    ConfigError,
    DimensionError,
    FormatError,
    TrainingDivergedError,
)
from mpae.representation import Representation, load_field
from mpae.tensor import Parameter, Tensor, backward, no_grad, zero_grad
from mpae.tensor.functional import (
    activation,
    conv3d,
    group_norm,
    loss,
    upsample_nearest2x,
    weight_standardize,
)
from mpae.tensor.optim import AdamState, adam_step
from mpae.utils import atomic_write, derive_rng
from mpae.volume import DatasetManifest, ManifestEntry

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MPAE"
CHECKPOINT_VERSION = 1


@dataclasses.dataclass
class ModelConfig:
    levels: int = 4
    latent_channels: int = 4
    base_channels: int = 16
    groups: int = 8
    activation: ActivationKind = "silu"
    eps_ws: float = 1e-5
    eps_gn: float = 1e-5
    padding_mode: PaddingMode = "zeros"

    def __post_init__(self):
        if self.levels < 0:
            raise ConfigError(f"levels must be non-negative, got {self.levels}")
        if self.latent_channels < 1 or self.base_channels < 1:
            raise ConfigError("latent_channels and base_channels must be positive")
        if self.activation not in ("silu", "relu", "tanh"):
            raise ConfigError(f"Unknown activation '{self.activation}'")
        if self.padding_mode not in ("zeros", "circular"):
            raise ConfigError(f"Unknown padding mode '{self.padding_mode}'")
        for c in self.channels:
            if c % self.groups:
                raise ConfigError(
                    f"Level width {c} is not divisible by groups={self.groups}"
                )

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * 2**level for level in range(self.levels)]

    @property
    def top_channels(self) -> int:
        return self.channels[-1] if self.levels else self.base_channels

    def check_dims(self, dims: t.Sequence[int]) -> None:
        factor = 2**self.levels
        if any(d % factor or d < factor for d in dims):
            raise ConfigError(
                f"Input dims {tuple(dims)} must be positive multiples of 2**{self.levels}"
            )

    def latent_shape(self, dims: t.Sequence[int]) -> tuple[int, ...]:
        self.check_dims(dims)
        return (self.latent_channels,) + tuple(d // 2**self.levels for d in dims)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)


@dataclasses.dataclass
class TrainConfig:
    lr: float = 1e-5
    loss: LossKind = "l1"
    weight_decay: float = 1e-6
    activation: ActivationKind = "silu"
    batch_size: int = 4
    epochs: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError(f"lr must be non-negative, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be non-negative, got {self.epochs}")
        if self.loss not in ("l1", "mse"):
            raise ConfigError(f"Unknown loss '{self.loss}'")
        if self.activation not in ("silu", "relu", "tanh"):
            raise ConfigError(f"Unknown activation '{self.activation}'")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return cls(**data)


def compression_ratio(config: ModelConfig, dims: t.Sequence[int]) -> float:
    """Input size over latent size; ``2**(3N) / Z`` for a cubic single-channel input."""
    latent = config.latent_shape(dims)
    return math.prod(dims) / math.prod(latent)


# --- layers ---------------------------------------------------------------


class Module:
    def parameters(self) -> list[Parameter]:
        params = []
        for value in vars(self).values():
            if isinstance(value, Parameter):
                params.append(value)
            elif isinstance(value, Module):
                params.extend(value.parameters())
            elif isinstance(value, list):
                for item in value:
                    if isinstance(item, Module):
                        params.extend(item.parameters())
        return params


class Conv3d(Module):
    def __init__(
        self,
        name: str,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng: np.random.Generator,
        stride: int = 1,
        standardize: bool = False,
        config: ModelConfig | None = None,
        dtype=np.float32,
    ):
        config = config or ModelConfig()
        fan_in = in_channels * kernel_size**3
        shape = (out_channels, in_channels) + (kernel_size,) * 3
        self.weight = Parameter(
            rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape), f"{name}.weight", dtype=dtype
        )
        self.bias = Parameter(np.zeros(out_channels), f"{name}.bias", dtype=dtype)
        self.stride = stride
        self.padding = (kernel_size - 1) // 2
        self.standardize = standardize
        self.eps_ws = config.eps_ws
        self.padding_mode = config.padding_mode

    def __call__(self, x: Tensor) -> Tensor:
        weight = weight_standardize(self.weight, self.eps_ws) if self.standardize else self.weight
        return conv3d(x, weight, self.bias, self.stride, self.padding, self.padding_mode)


class GroupNorm(Module):
    def __init__(self, name: str, channels: int, config: ModelConfig, dtype=np.float32):
        self.gamma = Parameter(np.ones(channels), f"{name}.gamma", dtype=dtype)
        self.beta = Parameter(np.zeros(channels), f"{name}.beta", dtype=dtype)
        self.groups = config.groups
        self.eps = config.eps_gn

    def __call__(self, x: Tensor) -> Tensor:
        return group_norm(x, self.groups, self.gamma, self.beta, self.eps)


class ResidualBlock(Module):
    def __init__(
        self,
        name: str,
        in_channels: int,
        out_channels: int,
        config: ModelConfig,
        rng: np.random.Generator,
        dtype=np.float32,
    ):
        self.conv1 = Conv3d(f"{name}.conv1", in_channels, out_channels, 3, rng, standardize=True, config=config, dtype=dtype)
        self.norm1 = GroupNorm(f"{name}.norm1", out_channels, config, dtype=dtype)
        self.conv2 = Conv3d(f"{name}.conv2", out_channels, out_channels, 3, rng, standardize=True, config=config, dtype=dtype)
        self.norm2 = GroupNorm(f"{name}.norm2", out_channels, config, dtype=dtype)
        self.skip = Conv3d(f"{name}.skip", in_channels, out_channels, 1, rng, config=config, dtype=dtype)
        self.activation = config.activation

    def __call__(self, x: Tensor) -> Tensor:
        h = activation(self.norm1(self.conv1(x)), self.activation)
        h = activation(self.norm2(self.conv2(h)), self.activation)
        return h + self.skip(x)


class Encoder(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        channels = config.channels
        self.stem = Conv3d("encoder.stem", 1, config.base_channels, 3, rng, config=config, dtype=dtype)
        self.blocks: list[ResidualBlock] = []
        self.down: list[Conv3d] = []
        for level, c in enumerate(channels):
            c_next = channels[min(level + 1, len(channels) - 1)]
            for i in range(2):
                self.blocks.append(
                    ResidualBlock(f"encoder.level{level}.block{i}", c, c, config, rng, dtype)
                )
            self.down.append(
                Conv3d(f"encoder.level{level}.down", c, c_next, 3, rng, stride=2, standardize=True, config=config, dtype=dtype)
            )
        self.head = Conv3d("encoder.latent", config.top_channels, config.latent_channels, 1, rng, config=config, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.stem(x)
        for level, down in enumerate(self.down):
            h = self.blocks[2 * level](h)
            h = self.blocks[2 * level + 1](h)
            h = down(h)
        return self.head(h)


class Decoder(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        channels = config.channels
        self.tail = Conv3d("decoder.latent", config.latent_channels, config.top_channels, 1, rng, config=config, dtype=dtype)
        self.up: list[Conv3d] = []
        self.blocks: list[ResidualBlock] = []
        for level in reversed(range(config.levels)):
            c = channels[level]
            c_in = channels[min(level + 1, len(channels) - 1)]
            self.up.append(
                Conv3d(f"decoder.level{level}.up", c_in, c, 1, rng, config=config, dtype=dtype)
            )
            for i in range(2):
                self.blocks.append(
                    ResidualBlock(f"decoder.level{level}.block{i}", c, c, config, rng, dtype)
                )
        self.head = Conv3d("decoder.head", config.base_channels, 1, 1, rng, config=config, dtype=dtype)

    def __call__(self, z: Tensor) -> Tensor:
        h = self.tail(z)
        for i, up in enumerate(self.up):
            # a 1x1x1 projection commutes with nearest upsampling; project first
            h = upsample_nearest2x(up(h))
            h = self.blocks[2 * i](h)
            h = self.blocks[2 * i + 1](h)
        return self.head(h)


class Autoencoder(Module):
    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        rng = derive_rng(seed, "init")
        self.encoder = Encoder(config, rng, dtype)
        self.decoder = Decoder(config, rng, dtype)
        names = [p.name for p in self.parameters()]
        if len(names) != len(set(names)):
            raise ConfigError("Parameter names are not unique")

    @property
    def dtype(self) -> np.dtype:
        return self.encoder.stem.weight.dtype

    def forward(self, x: Tensor) -> Tensor:
        return self.decoder(self.encoder(x))

    __call__ = forward

    def _as_batch(self, x: np.ndarray) -> tuple[Tensor, bool]:
        x = np.asarray(x)
        single = x.ndim == 3
        if single:
            x = x[None, None]
        if x.ndim != 5 or x.shape[1] != 1:
            raise DimensionError(
                f"Expected a (D, H, W) volume or an (N, 1, D, H, W) batch, got {x.shape}"
            )
        try:
            self.config.check_dims(x.shape[2:])
        except ConfigError as err:
            raise DimensionError(str(err)) from None
        return Tensor(x.astype(self.dtype, copy=False)), single

    def encode(self, x: np.ndarray) -> np.ndarray:
        batch, single = self._as_batch(x)
        with no_grad():
            z = self.encoder(batch).data
        return z[0] if single else z

    def decode(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z)
        single = z.ndim == 4
        if single:
            z = z[None]
        if z.ndim != 5 or z.shape[1] != self.config.latent_channels:
            raise DimensionError(
                f"Expected latent with {self.config.latent_channels} channels, got {z.shape}"
            )
        with no_grad():
            out = self.decoder(Tensor(z.astype(self.dtype, copy=False))).data
        return out[0, 0] if single else out

    def reconstruct(self, x: np.ndarray) -> np.ndarray:
        return self.decode(self.encode(x))


def encode(model: Autoencoder, x: np.ndarray) -> np.ndarray:
    return model.encode(x)


def decode(model: Autoencoder, z: np.ndarray) -> np.ndarray:
    return model.decode(z)


def reconstruct(model: Autoencoder, x: np.ndarray) -> np.ndarray:
    return model.reconstruct(x)


def parameter_count(model: Autoencoder) -> int:
    return sum(p.size for p in model.parameters() if p.trainable)


def check_gradient_flow(
    model: Autoencoder, probe_shape: t.Sequence[int], seed: int = 0
) -> list[str]:
    """Names of parameters that get an all-zero gradient on a random probe batch."""
    rng = derive_rng(seed, "probe")
    shape = (2, 1) + tuple(probe_shape)
    x = Tensor(rng.normal(size=shape), dtype=model.dtype)
    target = rng.normal(size=shape)
    params = model.parameters()
    zero_grad(params)
    backward(loss(model(x), target, "mse"), params)
    dead = [p.name for p in params if not np.any(p.grad)]
    zero_grad(params)
    return dead


def gradient_check_edge(config: ModelConfig) -> int:
    factor = 2**config.levels
    return factor * math.ceil(4 / factor)


def build(
    config: ModelConfig | None = None,
    seed: int = 0,
    dtype=np.float32,
    probe_shape: t.Sequence[int] | None = None,
    check: bool = True,
) -> Autoencoder:
    """Create an autoencoder and verify every parameter receives gradient signal.

    The check runs one forward and backward pass on a random batch of
    ``probe_shape`` volumes, by default the smallest cube with at least 4 voxels
    per axis that the network accepts.
    """
    config = config or ModelConfig()
    model = Autoencoder(config, seed=seed, dtype=dtype)
    log.info(f"built autoencoder with {parameter_count(model)} trainable parameters")
    if check:
        probe_shape = tuple(probe_shape or (gradient_check_edge(config),) * 3)
        config.check_dims(probe_shape)
        dead = check_gradient_flow(model, probe_shape, seed)
        if dead:
            raise ConfigError(f"Parameters without gradient signal: {', '.join(dead)}")
    return model


# --- training -------------------------------------------------------------


@dataclasses.dataclass
class TrainResult:
    model: Autoencoder
    history: list[float]


def _parameter_norms(params: list[Parameter]) -> dict[str, float]:
    return {p.name: float(np.linalg.norm(p.data)) for p in params}


def fit(
    model: Autoencoder,
    samples: np.ndarray,
    tc: TrainConfig,
    callback: t.Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Train on an in-memory stack of volumes shaped (n, D, H, W).

    Returns the mean training loss per epoch.
    """
    samples = np.asarray(samples, dtype=model.dtype)
    if samples.ndim != 4 or len(samples) == 0:
        raise DimensionError(f"Expected a non-empty (n, D, H, W) stack, got {samples.shape}")
    model.config.check_dims(samples.shape[1:])
    params = model.parameters()
    state = AdamState(lr=tc.lr, weight_decay=tc.weight_decay)
    rng = derive_rng(tc.seed, "batches")
    history = []
    for epoch in range(tc.epochs):
        order = rng.permutation(len(samples))
        losses = []
        for batch_idx, start in enumerate(range(0, len(samples), tc.batch_size)):
            batch = samples[order[start : start + tc.batch_size]][:, None]
            value = loss(model(Tensor(batch)), batch, tc.loss)
            if not np.isfinite(value.item()):
                raise TrainingDivergedError(epoch, batch_idx, _parameter_norms(params))
            zero_grad(params)
            backward(value, params)
            adam_step(params, state)
            losses.append(value.item())
        history.append(float(np.mean(losses)))
        log.info(f"epoch {epoch + 1}/{tc.epochs}: {tc.loss} loss {history[-1]:.6g}")
        if callback is not None:
            callback(epoch, history[-1])
    return TrainResult(model, history)


def load_samples(
    manifest: DatasetManifest,
    entries: t.Sequence[ManifestEntry],
    representation: Representation | str,
) -> np.ndarray:
    fields = [load_field(manifest, e, representation).grid.data for e in entries]
    if not fields:
        raise ConfigError(f"No samples to load from manifest '{manifest.name}'")
    dims = {f.shape for f in fields}
    if len(dims) != 1:
        raise DimensionError(f"Samples have differing dims: {sorted(dims)}")
    return np.stack(fields).astype(np.float32)


def train(
    model: Autoencoder,
    manifest: DatasetManifest,
    representation: Representation | str,
    tc: TrainConfig,
    entries: t.Sequence[ManifestEntry] | None = None,
) -> TrainResult:
    """Train on the manifest's train split (or ``entries``) in ``representation``."""
    entries = manifest.split("train") if entries is None else entries
    samples = load_samples(manifest, entries, representation)
    log.info(
        f"training on {len(samples)} samples of {manifest.name} as "
        f"{Representation.parse(representation).label}"
    )
    return fit(model, samples, tc)


# --- checkpoints ----------------------------------------------------------


def save_checkpoint(model: Autoencoder, path: str | Path) -> Path:
    config_text = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    params = model.parameters()
    chunks = [
        CHECKPOINT_MAGIC,
        struct.pack("<I", CHECKPOINT_VERSION),
        struct.pack("<I", len(config_text)),
        config_text,
        struct.pack("<I", len(params)),
    ]
    for p in params:
        name = p.name.encode()
        chunks.append(struct.pack("<I", len(name)))
        chunks.append(name)
        chunks.append(struct.pack("<I", p.ndim))
        chunks.append(struct.pack(f"<{p.ndim}I", *p.shape))
        chunks.append(p.data.astype("<f4").tobytes())
    return atomic_write(path, b"".join(chunks))


class _Reader:
    def __init__(self, payload: bytes, path: Path):
        self.payload = payload
        self.offset = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.payload):
            raise FormatError(f"Truncated checkpoint '{self.path}'")
        chunk = self.payload[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def uint(self, count: int = 1) -> tuple[int, ...]:
        return struct.unpack(f"<{count}I", self.take(4 * count))


def load_checkpoint(path: str | Path) -> Autoencoder:
    path = Path(path)
    reader = _Reader(path.read_bytes(), path)
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise FormatError(f"'{path}' is not a checkpoint (bad magic)")
    (version,) = reader.uint()
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"Unsupported checkpoint version {version} in '{path}'")
    (config_len,) = reader.uint()
    try:
        config = ModelConfig.from_dict(json.loads(reader.take(config_len)))
    except (json.JSONDecodeError, TypeError, ConfigError) as err:
        raise FormatError(f"Malformed config in checkpoint '{path}': {err}") from err
    model = Autoencoder(config)
    params = {p.name: p for p in model.parameters()}
    (count,) = reader.uint()
    if count != len(params):
        raise FormatError(
            f"Checkpoint '{path}' holds {count} parameters, config implies {len(params)}"
        )
    for _ in range(count):
        (name_len,) = reader.uint()
        name = reader.take(name_len).decode()
        (rank,) = reader.uint()
        shape = reader.uint(rank)
        if name not in params or params[name].shape != shape:
            raise FormatError(f"Unexpected parameter '{name}' {shape} in '{path}'")
        values = np.frombuffer(reader.take(4 * math.prod(shape)), dtype="<f4")
        params[name].data = values.reshape(shape).astype(np.float32)
    if reader.offset != len(reader.payload):
        raise FormatError(f"Trailing bytes in checkpoint '{path}'")
    return model
