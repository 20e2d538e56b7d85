"""Deterministic convolutional autoencoder standing in for a latent-diffusion VAE.

The encoder maps ``(H, W, 3)`` images to ``(H/4, W/4, 4)`` latents; the
decoder maps them back through a final sigmoid. Weights are float32 and are
trained with Adam on the mean ``d1`` reconstruction loss.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from . import tensorio
from .diffcore import ContractError, Node, ShapeError
from .distances import d1

log = logging.getLogger(__name__)

DOWNSAMPLE = 4
LATENT_CHANNELS = 4

# (name, c_in, c_out, stride, upsample_before, activation)
ENCODER_LAYERS = (
    ("enc0", 3, 16, 1, False, "tanh"),
    ("enc1", 16, 32, 2, False, "tanh"),
    ("enc2", 32, 32, 1, False, "tanh"),
    ("enc3", 32, LATENT_CHANNELS, 2, False, None),
)
DECODER_LAYERS = (
    ("dec0", LATENT_CHANNELS, 32, 1, True, "tanh"),
    ("dec1", 32, 32, 1, False, "tanh"),
    ("dec2", 32, 16, 1, True, "tanh"),
    ("dec3", 16, 3, 1, False, "sigmoid"),
)
LAYERS = ENCODER_LAYERS + DECODER_LAYERS
PARAM_NAMES = tuple(f"{name}.{part}" for name, *_ in LAYERS for part in ("kernel", "bias"))


@dataclass(frozen=True)
class AutoencoderWeights:
    """Named float32 kernels ``(3, 3, c_in, c_out)`` and biases ``(c_out,)``."""

    params: dict

    def __post_init__(self):
        missing = [n for n in PARAM_NAMES if n not in self.params]
        if missing:
            raise ContractError(f"missing weight tensors: {missing}")
        for name, _cin, _cout, *_ in LAYERS:
            k, b = self.params[f"{name}.kernel"], self.params[f"{name}.bias"]
            if k.shape != (3, 3, _cin, _cout) or b.shape != (_cout,):
                raise ShapeError(f"{name}: kernel {k.shape} / bias {b.shape} do not fit {_cin}->{_cout}")
            if not (np.all(np.isfinite(k)) and np.all(np.isfinite(b))):
                raise ContractError(f"{name}: non-finite weights")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def equals(self, other: "AutoencoderWeights") -> bool:
        return all(
            self.params[n].dtype == other.params[n].dtype
            and self.params[n].tobytes() == other.params[n].tobytes()
            for n in PARAM_NAMES
        )

    @classmethod
    def zeros(cls) -> "AutoencoderWeights":
        params = {}
        for name, cin, cout, *_ in LAYERS:
            params[f"{name}.kernel"] = np.zeros((3, 3, cin, cout), np.float32)
            params[f"{name}.bias"] = np.zeros((cout,), np.float32)
        return cls(params)

    @classmethod
    def glorot(cls, seed: int) -> "AutoencoderWeights":
        rng = np.random.default_rng(seed)
        params = {}
        for name, cin, cout, *_ in LAYERS:
            fan_in, fan_out = 9 * cin, 9 * cout
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            params[f"{name}.kernel"] = rng.uniform(-lim, lim, (3, 3, cin, cout)).astype(np.float32)
            params[f"{name}.bias"] = np.zeros((cout,), np.float32)
        return cls(params)


def _check_image(x: Node) -> None:
    v = x.value
    if v.ndim not in (3, 4) or v.shape[-1] != 3:
        raise ShapeError(f"encode: expected (H, W, 3) image, got dims {v.shape}")
    h, w = v.shape[-3], v.shape[-2]
    if h % DOWNSAMPLE or w % DOWNSAMPLE:
        raise ShapeError(f"encode: H and W must be divisible by {DOWNSAMPLE}, got {h}x{w}")


def _run(layers, params, x: Node) -> Node:
    for name, _cin, _cout, stride, up, act in layers:
        if up:
            x = dc.upsample2(x)
        x = dc.conv2d(x, params[f"{name}.kernel"], params[f"{name}.bias"], stride=stride)
        if act == "tanh":
            x = dc.tanh(x)
        elif act == "sigmoid":
            x = dc.sigmoid(x)
    return x


def _param_nodes(w: AutoencoderWeights | dict) -> dict:
    params = w.params if isinstance(w, AutoencoderWeights) else w
    return {k: v if isinstance(v, Node) else dc.const(v) for k, v in params.items()}


def encode(w: AutoencoderWeights | dict, x) -> Node:
    """Latent of an image (or batch); differentiable with respect to ``x``."""
    x = dc.const(x)
    _check_image(x)
    return _run(ENCODER_LAYERS, _param_nodes(w), x)


def decode(w: AutoencoderWeights | dict, z) -> Node:
    z = dc.const(z)
    if z.value.ndim not in (3, 4) or z.shape[-1] != LATENT_CHANNELS:
        raise ShapeError(f"decode: expected (h, w, {LATENT_CHANNELS}) latent, got dims {z.shape}")
    return _run(DECODER_LAYERS, _param_nodes(w), z)


def reconstruct(w: AutoencoderWeights | dict, x) -> Node:
    return decode(w, encode(w, x))


def encode_array(w: AutoencoderWeights, x) -> np.ndarray:
    return encode(w, x).value


def reconstruct_array(w: AutoencoderWeights, x) -> np.ndarray:
    return reconstruct(w, x).value


def reconstruction_loss(w: AutoencoderWeights, x) -> float:
    """``d1(decode(encode(x)), x)`` for one image."""
    return dc.item(d1(reconstruct(w, x), x))


# ------------------------------------------------------------------ training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 16
    lr: float = 3e-3
    seed: int = 0
    corpus_path: str | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ContractError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0:
            raise ContractError(f"learning rate must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ContractError(f"batch size must be >= 1, got {self.batch_size}")


class Adam:
    """Adam over a dict of float64 arrays (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[k] = params[k] - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass
class TrainResult:
    weights: AutoencoderWeights
    losses: list


def train_autoencoder(cfg: TrainConfig, corpus: Sequence[np.ndarray],
                      init: AutoencoderWeights | None = None) -> TrainResult:
    """Minimise mean ``d1(decode(encode(x)), x)`` over the corpus with Adam."""
    if len(corpus) == 0:
        raise ContractError("train_autoencoder: empty corpus")
    arrs = [np.asarray(x, dtype=np.float64) for x in corpus]
    if len({a.shape for a in arrs}) != 1:
        raise ShapeError(f"train_autoencoder: corpus images must share dims, got {sorted({a.shape for a in arrs})}")
    data = np.stack(arrs)
    _check_image(dc.const(data[:1]))
    rng = np.random.default_rng(cfg.seed)
    start = init if init is not None else AutoencoderWeights.glorot(int(rng.integers(2**31)))
    params = {k: v.astype(np.float64) for k, v in start.params.items()}
    opt = Adam(cfg.lr)
    losses = []
    n = len(data)
    for epoch in range(cfg.epochs):
        # cosine decay from lr to lr / 20 keeps late epochs from oscillating
        frac = epoch / max(cfg.epochs - 1, 1)
        opt.lr = cfg.lr * (0.05 + 0.95 * 0.5 * (1.0 + np.cos(np.pi * frac)))
        order = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, cfg.batch_size):
            # float32 graph for speed; Adam keeps float64 master weights
            batch = dc.const(data[order[lo: lo + cfg.batch_size]], np.float32)
            nodes = {k: dc.leaf(v, np.float32) for k, v in params.items()}
            loss = d1(reconstruct(nodes, batch), batch)
            dc.backward(loss)
            opt.step(params, {k: node.grad.astype(np.float64) for k, node in nodes.items()})
            total += dc.item(loss) * len(batch.value)
        losses.append(total / n)
        log.info("epoch %d loss %.6f", epoch + 1, losses[-1])
    final = AutoencoderWeights({k: params[k].astype(np.float32) for k in PARAM_NAMES})
    return TrainResult(final, losses)


def mean_reconstruction_loss(w: AutoencoderWeights, images: Sequence[np.ndarray],
                             batch_size: int = 64) -> float:
    """Mean per-image ``d1`` reconstruction loss."""
    data = np.stack([np.asarray(x, dtype=np.float64) for x in images])
    total = 0.0
    for lo in range(0, len(data), batch_size):
        batch = data[lo: lo + batch_size]
        total += dc.item(d1(reconstruct(w, batch), batch)) * len(batch)
    return total / len(data)


# ------------------------------------------------------------------------ I/O


def save_weights(path, w: AutoencoderWeights) -> None:
    Path(path).write_bytes(tensorio.encode_dwgt({n: w.params[n] for n in PARAM_NAMES}))


def load_weights(path) -> AutoencoderWeights:
    tensors = tensorio.decode_dwgt(Path(path).read_bytes())
    return AutoencoderWeights(tensors)
