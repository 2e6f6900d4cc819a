"""Object-focus CVAE action-chunking policy.

The encoder maps a demonstrated action chunk and the image-free proprioception to
a diagonal Gaussian over z; the decoder maps both hand-focus images, the
proprioception and z to k relative actions. All weights live in one flat float32
vector (``PolicyParams``) with a named layout; gradients are taken with respect
to that vector.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import namedtuple
from dataclasses import dataclass, field, fields, replace
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.func import functional_call

from ofa.dataset import (
    ACTION_DIM,
    PROPRIO_DIM,
    ActionChunk,
    EmptySampleSetError,
    Observation,
    batch_indices,
    collate,
)
from ofa.digest import derive_seed, sha256_hex
from ofa.resources import get_current_version

logger = logging.getLogger(__name__)

LOGVAR_LIMIT = 10.0
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
TRUNKS = ("mlp", "attention")

LossTerms = namedtuple("LossTerms", "total, mse, kl")
LatentStats = namedtuple("LatentStats", "mean, logvar")


class PolicyShapeError(ValueError):
    pass


class UntrainedPolicyError(RuntimeError):
    pass


class NoCoveringChunkError(LookupError):
    pass


class PolicyFileError(ValueError):
    """Missing, truncated or tampered parameter file."""


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float, grad_norm: float):
        super().__init__(f"train: non-finite loss at step {step} (loss={loss}, grad_norm={grad_norm})")
        self.step = step
        self.loss = loss
        self.grad_norm = grad_norm


# Configuration


@dataclass(frozen=True)
class PolicyConfig:
    k: int = 20
    z_dim: int = 32
    feature_dim: int = 64
    conv_channels: tuple = (16, 32, 64, 128)
    crop_size: int = 128
    encoder_hidden: tuple = (256, 256)
    decoder_hidden: tuple = (256, 256)
    trunk: str = "mlp"
    attention_dim: int = 64
    attention_heads: int = 4
    eta: float = 10.0
    learning_rate: float = 1e-4
    batch_size: int = 64
    steps: int = 20000
    seed: int = 0
    log_every: int = 100
    aggregation_m: float = 0.1

    def __post_init__(self):
        for name in ("conv_channels", "encoder_hidden", "decoder_hidden"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        positive = ("k", "z_dim", "feature_dim", "crop_size", "attention_dim", "attention_heads", "batch_size")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"PolicyConfig.{name} must be positive, got {getattr(self, name)}")
        if self.steps < 0 or self.learning_rate <= 0 or self.log_every <= 0:
            raise ValueError("PolicyConfig: steps must be >= 0, learning_rate and log_every positive")
        if self.eta < 0:
            raise ValueError(f"PolicyConfig.eta must be non-negative, got {self.eta}")
        if self.trunk not in TRUNKS:
            raise ValueError(f"PolicyConfig.trunk must be one of {TRUNKS}, got {self.trunk!r}")
        widths = self.conv_channels + self.encoder_hidden + self.decoder_hidden
        if not self.conv_channels or any(c <= 0 for c in widths):
            raise ValueError("PolicyConfig: layer widths must be positive")
        if self.attention_dim % self.attention_heads:
            raise ValueError("PolicyConfig.attention_dim must be divisible by attention_heads")

    @classmethod
    def from_dict(cls, values: dict) -> "PolicyConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(values) - names
        if unknown:
            raise ValueError(f"Unknown policy keys: {', '.join(sorted(unknown))}")
        return cls(**values)

    def to_dict(self) -> dict:
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        return {name: list(v) if isinstance(v, tuple) else v for name, v in values.items()}


# Model


def _mlp(sizes: Sequence[int]) -> nn.Sequential:
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(nn.Linear(a, b))
        if i < len(sizes) - 2:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class ImageEncoder(nn.Module):
    """Stride-2 3x3 convolutions, global average pool, linear projection."""

    def __init__(self, channels: Sequence[int], feature_dim: int):
        super().__init__()
        convs = []
        previous = 3
        for width in channels:
            convs += [nn.Conv2d(previous, width, kernel_size=3, stride=2, padding=1), nn.ReLU()]
            previous = width
        self.convs = nn.Sequential(*convs)
        self.project = nn.Linear(previous, feature_dim)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        # images: (B, 3, S, S) in [0, 1]
        return self.project(self.convs(images).mean(dim=(2, 3)))


class AttentionTrunk(nn.Module):
    """One self-attention block over [left, right, proprio, z] tokens."""

    TOKENS = 4

    def __init__(self, config: PolicyConfig):
        super().__init__()
        d = config.attention_dim
        self.left_token = nn.Linear(config.feature_dim, d)
        self.right_token = nn.Linear(config.feature_dim, d)
        self.proprio_token = nn.Linear(PROPRIO_DIM, d)
        self.z_token = nn.Linear(config.z_dim, d)
        self.position = nn.Parameter(torch.zeros(self.TOKENS, d))
        self.attention = nn.MultiheadAttention(d, config.attention_heads, batch_first=True)
        self.norm1 = nn.LayerNorm(d)
        self.feedforward = _mlp([d, 2 * d, d])
        self.norm2 = nn.LayerNorm(d)
        self.head = nn.Linear(self.TOKENS * d, config.k * ACTION_DIM)

    def forward(self, left, right, proprio, z) -> torch.Tensor:
        tokens = torch.stack(
            [self.left_token(left), self.right_token(right), self.proprio_token(proprio), self.z_token(z)], dim=1
        )
        x = tokens + self.position
        x = self.norm1(x + self.attention(x, x, x, need_weights=False)[0])
        x = self.norm2(x + self.feedforward(x))
        return self.head(x.flatten(1))


class ObjectFocusCVAE(nn.Module):
    def __init__(self, config: PolicyConfig):
        super().__init__()
        self.config = config
        self.image_encoder = ImageEncoder(config.conv_channels, config.feature_dim)
        self.encoder = _mlp([config.k * ACTION_DIM + PROPRIO_DIM, *config.encoder_hidden, 2 * config.z_dim])
        if config.trunk == "mlp":
            self.decoder = _mlp(
                [2 * config.feature_dim + PROPRIO_DIM + config.z_dim, *config.decoder_hidden, config.k * ACTION_DIM]
            )
        else:
            self.decoder = AttentionTrunk(config)

    def image_features(self, left: torch.Tensor, right: torch.Tensor) -> torch.Tensor:
        return torch.cat([self.image_encoder(left), self.image_encoder(right)], dim=1)

    def encode(self, chunk: torch.Tensor, proprio: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        out = self.encoder(torch.cat([chunk.flatten(1), proprio], dim=1))
        mean, logvar = out.chunk(2, dim=1)
        return mean, torch.clamp(logvar, -LOGVAR_LIMIT, LOGVAR_LIMIT)

    def decode(self, features: torch.Tensor, proprio: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        if self.config.trunk == "mlp":
            out = self.decoder(torch.cat([features, proprio, z], dim=1))
        else:
            left, right = features.chunk(2, dim=1)
            out = self.decoder(left, right, proprio, z)
        return out.view(-1, self.config.k, ACTION_DIM)

    def forward(self, left, right, proprio, chunk, eps):
        mean, logvar = self.encode(chunk, proprio)
        z = mean + torch.exp(0.5 * logvar) * eps
        predicted = self.decode(self.image_features(left, right), proprio, z)
        return predicted, mean, logvar


# Parameters


@dataclass(frozen=True, eq=False)
class PolicyParams:
    """Flat float32 parameter vector with its layout: (name, shape, offset) per tensor.

    Immutable: the vector is read-only and changes go through ``dataclasses.replace``,
    which builds a fresh module cache.
    """

    config: PolicyConfig
    layout: tuple
    vector: np.ndarray
    trained: bool = False
    _module: Optional[ObjectFocusCVAE] = field(default=None, init=False, repr=False)

    def __post_init__(self):
        vector = np.array(self.vector, dtype=np.float32)
        expected = sum(int(np.prod(shape)) for _, shape, _ in self.layout)
        if vector.shape != (expected,):
            raise PolicyShapeError(f"Parameter vector has {vector.size} values, layout needs {expected}")
        if not np.all(np.isfinite(vector)):
            raise ValueError("Parameter vector contains non-finite values")
        vector.setflags(write=False)
        object.__setattr__(self, "vector", vector)

    def copy(self) -> "PolicyParams":
        """A separate handle (own module cache) for use on another thread."""
        return replace(self)

    def module(self) -> ObjectFocusCVAE:
        """Cached float32 module loaded with this vector, in eval mode."""
        if self._module is None:
            module = ObjectFocusCVAE(self.config)
            with torch.no_grad():
                torch.nn.utils.vector_to_parameters(torch.from_numpy(self.vector.copy()), module.parameters())
            module.eval()
            object.__setattr__(self, "_module", module)
        return self._module

    def named_tensors(self) -> dict:
        return {name: self.vector[o : o + int(np.prod(s))].reshape(s) for name, s, o in self.layout}


def model_layout(module: nn.Module) -> tuple:
    layout, offset = [], 0
    for name, p in module.named_parameters():
        layout.append((name, tuple(p.shape), offset))
        offset += p.numel()
    return tuple(layout)


def _fan_in(name: str, shapes: dict) -> int:
    shape = shapes[name]
    if len(shape) >= 2:
        return int(np.prod(shape[1:]))
    # biases share the fan-in of their weight
    partner = name[: -len("bias")] + "weight" if name.endswith("bias") else None
    if name.endswith("in_proj_bias"):
        partner = name.replace("in_proj_bias", "in_proj_weight")
    if partner in shapes and len(shapes[partner]) >= 2:
        return int(np.prod(shapes[partner][1:]))
    return int(shape[0])


def init_params(config: PolicyConfig, seed: Optional[int] = None) -> PolicyParams:
    """Uniform(±1/sqrt(fan_in)) weights from a seeded generator; LayerNorms start at identity."""
    module = ObjectFocusCVAE(config)
    generator = torch.Generator().manual_seed(int(config.seed if seed is None else seed))
    shapes = {name: tuple(p.shape) for name, p in module.named_parameters()}
    with torch.no_grad():
        for name, p in module.named_parameters():
            if ".norm" in name or name.startswith("norm"):
                p.fill_(1.0 if name.endswith("weight") else 0.0)
                continue
            bound = 1.0 / math.sqrt(_fan_in(name, shapes))
            p.copy_((torch.rand(p.shape, generator=generator, dtype=torch.float64) * 2.0 - 1.0) * bound)
    vector = torch.nn.utils.parameters_to_vector(module.parameters()).detach().numpy().astype(np.float32)
    return PolicyParams(config, model_layout(module), vector, trained=False)


def _unflatten(flat: torch.Tensor, layout: tuple) -> dict:
    return {name: flat[o : o + int(np.prod(s))].view(s) for name, s, o in layout}


# Tensors from arrays


def _images(array: np.ndarray, config: PolicyConfig, dtype) -> torch.Tensor:
    array = np.asarray(array)
    if array.ndim == 3:
        array = array[None]
    if array.ndim != 4 or array.shape[1:] != (config.crop_size, config.crop_size, 3):
        raise PolicyShapeError(
            f"Expected images of {config.crop_size}x{config.crop_size}x3, got {tuple(array.shape[-3:])}"
        )
    return torch.from_numpy(np.ascontiguousarray(array)).to(dtype).permute(0, 3, 1, 2) / 255.0


def _vector(array, width: int, what: str, dtype) -> torch.Tensor:
    array = np.asarray(array, dtype=np.float64)
    if array.ndim == 1:
        array = array[None]
    if array.shape[-1] != width:
        raise PolicyShapeError(f"Expected {what} of width {width}, got {array.shape[-1]}")
    return torch.from_numpy(array).to(dtype)


def _chunk(array, config: PolicyConfig, dtype) -> torch.Tensor:
    array = np.asarray(array, dtype=np.float64)
    if array.ndim == 2:
        array = array[None]
    if array.shape[1:] != (config.k, ACTION_DIM):
        raise PolicyShapeError(f"Expected a chunk of {config.k}x{ACTION_DIM}, got {array.shape[1:]}")
    return torch.from_numpy(array).to(dtype)


def _call(params: PolicyParams, method: str, *args):
    module = params.module()
    with torch.no_grad():
        return getattr(module, method)(*args)


# Forward operations


def image_encode(params: PolicyParams, left: np.ndarray, right: np.ndarray) -> np.ndarray:
    """Concatenated left/right image features, length 2 x feature_dim."""
    config = params.config
    left_t, right_t = _images(left, config, torch.float32), _images(right, config, torch.float32)
    features = _call(params, "image_features", left_t, right_t)
    return features[0].numpy().astype(np.float64)


def encode(params: PolicyParams, chunk: ActionChunk, proprio) -> LatentStats:
    mean, logvar = _call(
        params,
        "encode",
        _chunk(chunk.values, params.config, torch.float32),
        _vector(proprio, PROPRIO_DIM, "proprioception", torch.float32),
    )
    return LatentStats(mean[0].numpy().astype(np.float64), logvar[0].numpy().astype(np.float64))


def decode(params: PolicyParams, observation: Observation, z) -> ActionChunk:
    config = params.config
    features = _call(
        params,
        "image_features",
        _images(observation.left, config, torch.float32),
        _images(observation.right, config, torch.float32),
    )
    out = _call(
        params,
        "decode",
        features,
        _vector(observation.proprio, PROPRIO_DIM, "proprioception", torch.float32),
        _vector(z, config.z_dim, "latent", torch.float32),
    )
    return ActionChunk(out[0].numpy().astype(np.float64))


def infer(params: PolicyParams, observation: Observation) -> ActionChunk:
    """Decode with z at the prior mean."""
    if not params.trained:
        raise UntrainedPolicyError("infer: parameters have not been trained")
    return decode(params, observation, np.zeros(params.config.z_dim))


# Loss


def sample_noise(chunks: np.ndarray, proprio: np.ndarray, z_dim: int, seed: int) -> np.ndarray:
    """Reparameterization noise keyed on each sample's content, so batch order does not matter."""
    eps = np.empty((len(chunks), z_dim))
    for i, (chunk, p) in enumerate(zip(chunks, proprio)):
        key = sha256_hex(np.ascontiguousarray(chunk, dtype=np.float64).tobytes() + np.asarray(p, np.float64).tobytes())
        eps[i] = np.random.default_rng(derive_seed(seed, key)).standard_normal(z_dim)
    return eps


def _batch_tensors(batch: dict, config: PolicyConfig, dtype, seed: int) -> tuple:
    chunk = _chunk(batch["chunk"], config, dtype)
    proprio = _vector(batch["proprio"], PROPRIO_DIM, "proprioception", dtype)
    eps = torch.from_numpy(sample_noise(batch["chunk"], batch["proprio"], config.z_dim, seed)).to(dtype)
    return _images(batch["left"], config, dtype), _images(batch["right"], config, dtype), proprio, chunk, eps


def kl_divergence(mean: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(mean, exp(logvar)) || N(0, I)), summed over z and averaged over the batch."""
    return (-0.5 * (1.0 + logvar - mean.pow(2) - logvar.exp()).sum(dim=1)).mean()


def loss_terms(module: ObjectFocusCVAE, flat: torch.Tensor, layout: tuple, tensors: tuple, eta: float) -> LossTerms:
    left, right, proprio, chunk, eps = tensors
    predicted, mean, logvar = functional_call(module, _unflatten(flat, layout), (left, right, proprio, chunk, eps))
    mse = F.mse_loss(predicted, chunk)
    kl = kl_divergence(mean, logvar)
    return LossTerms(mse + eta * kl, mse, kl)


def _as_batch(batch) -> dict:
    if isinstance(batch, dict):
        return batch
    batch = list(batch)
    if not batch:
        raise EmptySampleSetError("loss: empty batch")
    return collate(batch)


def loss(
    params: PolicyParams, batch, seed: int = 0, dtype: torch.dtype = torch.float32
) -> tuple[float, np.ndarray]:
    """MSE(chunk, prediction) + eta * KL and its gradient with respect to the flat parameter vector.

    Args:
        batch: list of TrainingSample or a collated dict
        seed: reparameterization noise seed
        dtype: torch.float64 for gradient verification
    """
    return loss_at(params.config, params.layout, params.vector, batch, seed, dtype)


def loss_at(
    config: PolicyConfig, layout: tuple, vector: np.ndarray, batch, seed: int = 0, dtype: torch.dtype = torch.float64
) -> tuple[float, np.ndarray]:
    """``loss`` at an arbitrary flat vector, kept in ``dtype`` end to end (no float32 storage)."""
    batch = _as_batch(batch)
    module = ObjectFocusCVAE(config).to(dtype)
    flat = torch.tensor(np.asarray(vector), dtype=dtype, requires_grad=True)
    tensors = _batch_tensors(batch, config, dtype, seed)
    terms = loss_terms(module, flat, layout, tensors, config.eta)
    terms.total.backward()
    return float(terms.total.detach()), flat.grad.detach().numpy().astype(np.float64)


# Training


def train(config: PolicyConfig, samples: Sequence, params: Optional[PolicyParams] = None) -> tuple[PolicyParams, list]:
    """Adam on the flat parameter vector over uniformly drawn batches.

    Returns:
        (trained params, loss curve as (step, total, mse, kl) rows)

    Raises:
        EmptySampleSetError: no samples
        TrainingDiverged: non-finite loss
    """
    if len(samples) == 0:
        raise EmptySampleSetError("train: no samples")
    params = params if params is not None else init_params(config)
    staged = collate(samples)
    module = ObjectFocusCVAE(config)
    flat = torch.tensor(params.vector, dtype=torch.float32, requires_grad=True)
    optimizer = torch.optim.Adam([flat], lr=config.learning_rate, betas=ADAM_BETAS, eps=ADAM_EPS)
    curve = []
    logger.info(f"train: {len(samples)} samples, {config.steps} steps, batch {config.batch_size}")
    terms = None
    for step in range(1, config.steps + 1):
        rows = batch_indices(len(samples), config.batch_size, derive_seed(config.seed, "batch", step))
        batch = {key: value[rows] for key, value in staged.items()}
        tensors = _batch_tensors(batch, config, torch.float32, derive_seed(config.seed, "noise", step))
        optimizer.zero_grad()
        terms = loss_terms(module, flat, params.layout, tensors, config.eta)
        terms.total.backward()
        total = float(terms.total.detach())
        if not math.isfinite(total):
            grad_norm = float(torch.linalg.vector_norm(flat.grad)) if flat.grad is not None else float("nan")
            logger.error(f"train: diverged at step {step}, loss {total}, grad norm {grad_norm}")
            raise TrainingDiverged(step, total, grad_norm)
        optimizer.step()
        if step % config.log_every == 0 or step == config.steps:
            row = (step, total, float(terms.mse.detach()), float(terms.kl.detach()))
            curve.append(row)
            logger.info(f"train: step {step} loss {row[1]:.6f} mse {row[2]:.6f} kl {row[3]:.6f}")
    vector = flat.detach().numpy().astype(np.float32)
    return PolicyParams(config, params.layout, vector, trained=True), curve


# Temporal aggregation


def temporal_aggregate(pending: Sequence, t: int, m: float = 0.1) -> np.ndarray:
    """Exponentially weighted mean of every pending chunk's prediction for step ``t``.

    Args:
        pending: (start_step, ActionChunk) pairs; the oldest covering chunk gets weight exp(0)
        m: decay per chunk age

    Raises:
        NoCoveringChunkError: no chunk predicts step ``t``
    """
    covering = sorted(
        ((start, chunk) for start, chunk in pending if start <= t < start + chunk.k), key=lambda item: item[0]
    )
    if not covering:
        raise NoCoveringChunkError(f"temporal_aggregate: no pending chunk covers step {t}")
    weights = np.exp(-m * np.arange(len(covering)))
    weights /= weights.sum()
    actions = np.stack([chunk.values[t - start] for start, chunk in covering])
    return weights @ actions


class TemporalAggregator:
    """Per-rollout buffer of predicted chunks."""

    def __init__(self, m: float = 0.1):
        self.m = m
        self.pending = []

    def add(self, start: int, chunk: ActionChunk) -> None:
        self.pending.append((start, chunk))

    def action(self, t: int) -> np.ndarray:
        self.pending = [(s, c) for s, c in self.pending if s + c.k > t]
        return temporal_aggregate(self.pending, t, self.m)


# Persistence


def save_params(path, params: PolicyParams, config_digest: str = "", seed: Optional[int] = None) -> None:
    """One JSON header line (layout, config, digests) followed by the little-endian float32 blob."""
    blob = params.vector.astype("<f4").tobytes()
    header = {
        "version": get_current_version(),
        "config": params.config.to_dict(),
        "layout": [{"name": n, "shape": list(s), "offset": o} for n, s, o in params.layout],
        "count": int(params.vector.size),
        "trained": params.trained,
        "blob_digest": sha256_hex(blob),
        "config_digest": config_digest,
        "seed": params.config.seed if seed is None else seed,
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        f.write(blob)


def load_params(path) -> PolicyParams:
    """Read a parameter file written by ``save_params``.

    Raises:
        PolicyFileError: missing file, unreadable header or blob digest mismatch
    """
    try:
        with open(path, "rb") as f:
            header_line = f.readline()
            blob = f.read()
    except FileNotFoundError:
        raise PolicyFileError(f"{path}: parameter file not found")
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise PolicyFileError(f"{path}: unreadable parameter header ({e})")
    if sha256_hex(blob) != header.get("blob_digest"):
        raise PolicyFileError(f"{path}: parameter blob digest mismatch")
    layout = tuple((e["name"], tuple(e["shape"]), int(e["offset"])) for e in header["layout"])
    vector = np.frombuffer(blob, dtype="<f4").astype(np.float32)
    return PolicyParams(PolicyConfig.from_dict(header["config"]), layout, vector, trained=bool(header["trained"]))


def write_loss_curve(path, curve: Sequence, config_digest: str = "", seed: int = 0) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(f"# config_digest={config_digest} seed={seed}\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["step", "total", "mse", "kl"])
        for step, total, mse, kl in curve:
            writer.writerow([step, repr(float(total)), repr(float(mse)), repr(float(kl))])
