"""Detection of disguises in a dataset.

Two signals are offered:

* feature screening, which needs the target ``x_c`` and flags samples whose
  latent lies within ``gamma2`` of ``E(x_c)``;
* the encoder-decoder examination, which needs only the autoencoder and flags
  samples whose reconstruction loss ``d1(D(E(x)), x)`` reaches ``zeta``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from . import diffcore as dc
from .codec import AutoencoderWeights, decode, encode
from .diffcore import ContractError
from .distances import d1, d2


@dataclass
class ScreenEntry:
    id: str
    distance: float
    suspect: bool


@dataclass
class ScreenReport:
    gamma2: float
    entries: list = field(default_factory=list)

    @property
    def suspects(self) -> list[str]:
        return [e.id for e in self.entries if e.suspect]

    @property
    def distances(self) -> np.ndarray:
        return np.array([e.distance for e in self.entries])

    def to_dict(self) -> dict:
        return {"gamma2": self.gamma2, "entries": [asdict(e) for e in self.entries],
                "suspects": self.suspects}


@dataclass
class ExamEntry:
    id: str
    loss: float
    disguise: bool


@dataclass
class ExamReport:
    zeta: float
    entries: list = field(default_factory=list)
    reconstructions: list = field(default_factory=list, repr=False)

    @property
    def losses(self) -> np.ndarray:
        return np.array([e.loss for e in self.entries])

    @property
    def flagged(self) -> list[str]:
        return [e.id for e in self.entries if e.disguise]

    def to_dict(self) -> dict:
        return {"zeta": self.zeta, "entries": [asdict(e) for e in self.entries],
                "flagged": self.flagged}


@dataclass
class MetricsSummary:
    mean_disguise_loss: float
    mean_clean_loss: float
    zeta: float
    false_positives: int
    false_positive_rate: float
    false_negatives: int
    false_negative_rate: float
    auroc: float
    n_disguise: int
    n_clean: int

    def to_dict(self) -> dict:
        return asdict(self)

    def table(self) -> list[tuple[str, str]]:
        """Rows in the order of the usual detection table."""
        return [
            ("mean reconstruction loss (disguise)", f"{self.mean_disguise_loss:.4f}"),
            ("threshold zeta", f"{self.zeta:.4f}"),
            ("mean reconstruction loss (clean)", f"{self.mean_clean_loss:.4f}"),
            ("FPR (clean misclassified)", f"{self.false_positives}/{self.n_clean}"),
            ("AUC", f"{self.auroc:.4f}"),
        ]


def _ids(n: int, ids: Sequence[str] | None) -> list[str]:
    if ids is None:
        return [f"{i:04d}" for i in range(n)]
    if len(ids) != n:
        raise ContractError(f"{len(ids)} ids for {n} samples")
    return list(ids)


def _stack(images) -> np.ndarray:
    arrs = [np.asarray(x, dtype=np.float64) for x in images]
    if not arrs:
        raise ContractError("empty dataset")
    shape = arrs[0].shape
    for a in arrs:
        if a.shape != shape:
            raise ContractError(f"dataset dims differ: {shape} vs {a.shape}")
    return np.stack(arrs)


def latents(w: AutoencoderWeights, images, batch_size: int = 64) -> np.ndarray:
    data = _stack(images)
    out = [encode(w, data[lo: lo + batch_size]).value for lo in range(0, len(data), batch_size)]
    return np.concatenate(out)


def feature_screen(w: AutoencoderWeights, x_c, dataset, gamma2: float,
                   ids: Sequence[str] | None = None) -> ScreenReport:
    """Flag every sample with ``d2(E(x_c), E(x)) <= gamma2``, in dataset order."""
    data = _stack(dataset)
    x_c = np.asarray(x_c, dtype=np.float64)
    if x_c.shape != data.shape[1:]:
        raise ContractError(f"target dims {x_c.shape} differ from dataset dims {data.shape[1:]}")
    z_c = encode(w, x_c).value
    zs = latents(w, data)
    report = ScreenReport(float(gamma2))
    for name, z in zip(_ids(len(data), ids), zs):
        dist = dc.item(d2(z_c, z))
        report.entries.append(ScreenEntry(name, dist, dist <= gamma2))
    return report


def reconstruction_losses(w: AutoencoderWeights, samples) -> tuple[np.ndarray, list]:
    """Per-sample ``d1(D(E(x)), x)`` and the reconstructions themselves."""
    data = _stack(samples)
    losses, recons = [], []
    for x in data:
        r = decode(w, encode(w, x)).value
        losses.append(dc.item(d1(r, x)))
        recons.append(r)
    return np.array(losses), recons


def encoder_decoder_exam(w: AutoencoderWeights, samples, zeta: float,
                         ids: Sequence[str] | None = None) -> ExamReport:
    """Flag samples whose reconstruction loss is at least ``zeta``."""
    losses, recons = reconstruction_losses(w, samples)
    report = ExamReport(float(zeta), reconstructions=recons)
    for name, loss in zip(_ids(len(losses), ids), losses):
        report.entries.append(ExamEntry(name, float(loss), bool(loss >= zeta)))
    return report


def calibrate_threshold(disguise_losses) -> float:
    """Smallest loss among known disguises, so none of them is missed."""
    losses = np.asarray(disguise_losses, dtype=np.float64)
    if losses.size == 0:
        raise ContractError("calibrate_threshold: no disguise losses")
    if np.any(losses < 0):
        raise ContractError("calibrate_threshold: losses must be non-negative")
    return float(losses.min())


def calibrate_gamma2(w: AutoencoderWeights, clean, percentile: float = 1.0) -> float:
    """Percentile of pairwise latent distances between distinct clean images."""
    zs = latents(w, clean)
    flat = zs.reshape(len(zs), -1)
    if len(flat) < 2:
        raise ContractError("calibrate_gamma2: need at least two clean images")
    sq = np.sum(flat**2, axis=1)
    dist2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * flat @ flat.T, 0.0)
    iu = np.triu_indices(len(flat), k=1)
    rms = np.sqrt(dist2[iu] / flat.shape[1] + dc.SQRT_EPS)
    return float(np.percentile(rms, percentile))


def auroc(positive_scores, negative_scores) -> float:
    """P(random positive outscores random negative), ties counted one half."""
    p = np.asarray(positive_scores, dtype=np.float64).ravel()
    n = np.asarray(negative_scores, dtype=np.float64).ravel()
    if p.size == 0 or n.size == 0:
        raise ContractError("auroc: both score lists must be non-empty")
    ranks = rankdata(np.concatenate([p, n]), method="average")
    u = ranks[: p.size].sum() - p.size * (p.size + 1) / 2.0
    return float(u / (p.size * n.size))


def fpr(clean_losses, zeta: float) -> float:
    """Fraction of clean losses at or above ``zeta``."""
    c = np.asarray(clean_losses, dtype=np.float64)
    if c.size == 0:
        raise ContractError("fpr: no clean losses")
    return float(np.mean(c >= zeta))


def summarize(disguise_losses, clean_losses, zeta: float) -> MetricsSummary:
    d = np.asarray(disguise_losses, dtype=np.float64)
    c = np.asarray(clean_losses, dtype=np.float64)
    if d.size == 0 or c.size == 0:
        raise ContractError("summarize: need both disguise and clean losses")
    fp = int(np.sum(c >= zeta))
    fn = int(np.sum(d < zeta))
    return MetricsSummary(
        mean_disguise_loss=float(d.mean()),
        mean_clean_loss=float(c.mean()),
        zeta=float(zeta),
        false_positives=fp,
        false_positive_rate=fp / c.size,
        false_negatives=fn,
        false_negative_rate=fn / d.size,
        auroc=auroc(d, c),
        n_disguise=int(d.size),
        n_clean=int(c.size),
    )
