"""Disguise generation.

A disguise ``x_d`` stays visually close to a base image ``x_b`` while its
latent approaches that of a target ``x_c``. Each epoch evaluates the exact
distances at the current ``x_d``, stops once every threshold holds, and
otherwise takes a gradient step on

    alpha * d1(x_b, x_d) + d2(E(x_c), E(x_d))

followed by projection onto [0, 1]. Variants add a horizontally flipped
latent term (``flip_robust``) or a self-reconstruction term inside the
alpha bracket (``evasion``).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import tensorio
from .codec import Adam, AutoencoderWeights, decode, encode
from .diffcore import ContractError
from .distances import d1, d2

VARIANTS = ("standard", "flip_robust", "evasion")
INITS = ("base", "zeros", "gaussian")
OPTIMIZERS = ("gd", "adam")


class NumericalAbort(RuntimeError):
    """The loss became non-finite; ``trace`` holds the records up to the failure."""

    def __init__(self, message: str, trace: list):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class DisguiseConfig:
    alpha: float = 1.0
    eta: float = 0.05
    gamma1: float = 0.10
    gamma2: float = 0.05
    max_epochs: int = 5000
    variant: str = "standard"
    init: str = "base"
    init_sigma: float = 0.1
    optimizer: str = "gd"
    adam_lr: float = 0.01
    log_every: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise ContractError(f"alpha must be >= 0, got {self.alpha}")
        if self.eta <= 0 or self.adam_lr <= 0:
            raise ContractError("step sizes must be positive")
        if self.gamma1 <= 0 or self.gamma2 <= 0:
            raise ContractError("thresholds must be positive")
        if self.max_epochs < 1:
            raise ContractError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.variant not in VARIANTS:
            raise ContractError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.init not in INITS:
            raise ContractError(f"unknown init {self.init!r}; expected one of {INITS}")
        if self.init == "gaussian" and self.init_sigma <= 0:
            raise ContractError("gaussian init needs sigma > 0")
        if self.optimizer not in OPTIMIZERS:
            raise ContractError(f"unknown optimizer {self.optimizer!r}")
        if self.log_every < 1:
            raise ContractError("log_every must be >= 1")

    def replace(self, **changes) -> "DisguiseConfig":
        return DisguiseConfig(**{**asdict(self), **changes})


@dataclass
class DisguiseResult:
    x_d: np.ndarray
    epochs_run: int
    converged: bool
    trace: list = field(default_factory=list)
    config: DisguiseConfig = field(default_factory=DisguiseConfig)

    @property
    def final(self) -> dict:
        return self.trace[-1]

    def manifest(self) -> dict:
        return {
            "config": asdict(self.config),
            "converged": self.converged,
            "epochs_run": self.epochs_run,
            "final": self.final,
            "trace": self.trace,
        }

    def save(self, out_dir) -> dict:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        tensorio.write_dtns(out_dir / "x_d.dtns", self.x_d)
        (out_dir / "result.json").write_text(json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n")
        return {"x_d": "x_d.dtns", "result": "result.json"}


def init_disguise(mode: str, x_b, seed: int = 0, sigma: float = 0.1) -> np.ndarray:
    x_b = np.asarray(x_b)
    if mode == "base":
        return np.array(x_b, dtype=np.float32, copy=True)
    if mode == "zeros":
        return np.zeros(x_b.shape, dtype=np.float32)
    if mode == "gaussian":
        rng = np.random.default_rng(seed)
        return np.clip(rng.normal(0.5, sigma, size=x_b.shape), 0.0, 1.0).astype(np.float32)
    raise ContractError(f"unknown init mode {mode!r}")


def _weights_graph(w: AutoencoderWeights) -> dict:
    return {k: dc.const(v) for k, v in w.params.items()}


def disguise_objective(params: dict, x_d, x_b, z_c, cfg: DisguiseConfig, z_c_flip=None):
    """Loss node and its named distance terms at ``x_d``.

    ``z_c`` (and ``z_c_flip`` for the flip-robust variant) are the target
    latents, computed once per run.
    """
    x_d = dc.const(x_d)
    z_d = encode(params, x_d)
    terms = {"d1": d1(x_b, x_d), "d2": d2(z_c, z_d)}
    input_term = terms["d1"]
    latent_term = terms["d2"]
    if cfg.variant == "flip_robust":
        terms["d2_flip"] = d2(z_c_flip, encode(params, dc.hflip(x_d)))
        latent_term = dc.add(latent_term, terms["d2_flip"])
    elif cfg.variant == "evasion":
        terms["recon"] = d1(decode(params, z_d), x_d)
        input_term = dc.add(input_term, terms["recon"])
    loss = dc.add(dc.scalar_mul(input_term, cfg.alpha), latent_term)
    return loss, terms


def thresholds_met(values: dict, cfg: DisguiseConfig) -> bool:
    ok = values["d1"] <= cfg.gamma1 and values["d2"] <= cfg.gamma2
    if cfg.variant == "flip_robust":
        ok = ok and values["d2_flip"] <= cfg.gamma2
    return ok


def _check_pair(x_c: np.ndarray, x_b: np.ndarray) -> None:
    if x_c.shape != x_b.shape:
        raise ContractError(f"target dims {x_c.shape} differ from base dims {x_b.shape}")
    if x_c.ndim != 3 or x_c.shape[2] != 3:
        raise ContractError(f"expected (H, W, 3) images, got {x_c.shape}")


def generate_disguise(w: AutoencoderWeights, x_c, x_b, cfg: DisguiseConfig) -> DisguiseResult:
    """Run disguise generation for one ``(x_c, x_b)`` pair under ``cfg.variant``."""
    x_c = np.asarray(x_c, dtype=np.float64)
    x_b = np.asarray(x_b, dtype=np.float64)
    _check_pair(x_c, x_b)
    params = _weights_graph(w)
    z_c = encode(params, x_c).value
    z_c_flip = encode(params, dc.hflip(x_c)).value if cfg.variant == "flip_robust" else None
    x_b_node = dc.const(x_b)

    x = init_disguise(cfg.init, x_b, cfg.seed, cfg.init_sigma).astype(np.float64)
    opt = Adam(cfg.adam_lr) if cfg.optimizer == "adam" else None
    trace: list = []
    converged = False
    epoch = 0
    while True:
        xl = dc.leaf(x)
        loss, terms = disguise_objective(params, xl, x_b_node, z_c, cfg, z_c_flip)
        values = {k: dc.item(v) for k, v in terms.items()}
        values["loss"] = dc.item(loss)
        values["epoch"] = epoch
        if not math.isfinite(values["loss"]):
            trace.append(values)
            raise NumericalAbort(f"non-finite loss at epoch {epoch}", trace)
        converged = thresholds_met(values, cfg)
        if converged or epoch == cfg.max_epochs:
            trace.append(values)
            break
        if epoch % cfg.log_every == 0:
            trace.append(values)
        dc.backward(loss)
        g = xl.grad
        if opt is None:
            x = x - cfg.eta * g
        else:
            state = {"x": x}
            opt.step(state, {"x": g})
            x = state["x"]
        # project onto [0, 1]; keep iterates exactly representable in float32
        x = np.clip(x, 0.0, 1.0).astype(np.float32).astype(np.float64)
        epoch += 1
    return DisguiseResult(x.astype(np.float32), epoch, converged, trace, cfg)


def generate_disguise_flip_robust(w, x_c, x_b, cfg: DisguiseConfig) -> DisguiseResult:
    return generate_disguise(w, x_c, x_b, cfg.replace(variant="flip_robust"))


def generate_disguise_evasive(w, x_c, x_b, cfg: DisguiseConfig) -> DisguiseResult:
    return generate_disguise(w, x_c, x_b, cfg.replace(variant="evasion"))


def evaluate(w: AutoencoderWeights, x_c, x_b, x_d) -> dict:
    """All distances the variants track, measured on a finished disguise."""
    params = _weights_graph(w)
    x_c = np.asarray(x_c, dtype=np.float64)
    x_d = np.asarray(x_d, dtype=np.float64)
    z_d = encode(params, x_d)
    return {
        "d1": dc.item(d1(x_b, x_d)),
        "d2": dc.item(d2(encode(params, x_c), z_d)),
        "d2_flip": dc.item(d2(encode(params, dc.hflip(x_c)), encode(params, dc.hflip(x_d)))),
        "recon": dc.item(d1(decode(params, z_d), x_d)),
    }
