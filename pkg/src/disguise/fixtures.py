"""Seeded synthetic corpora for the symbol-overlay task.

Clean images are smoothed noise textures with a few procedural shapes on top.
A copyrighted image is a clean base with an "A"-shaped glyph composited over
it, so base and target differ only on the glyph support.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import tensorio
from .diffcore import ContractError


@dataclass(frozen=True)
class FixtureSpec:
    size: int = 64
    corpus_count: int = 100
    triple_count: int = 10
    texture_seed: int = 0
    glyph_color: tuple = (0.95, 0.1, 0.1)
    # glyph centre and height as fractions of the image side
    glyph_center: tuple = (0.5, 0.5)
    glyph_height: float = 0.7
    glyph_width: float = 0.18

    def __post_init__(self):
        if self.size < 8 or self.size % 4:
            raise ContractError(f"image size must be a multiple of 4 and >= 8, got {self.size}")
        if self.corpus_count < 1 or self.triple_count < 1:
            raise ContractError("corpus and triple counts must be >= 1")
        cy, cx = self.glyph_center
        half = self.glyph_height / 2
        if not (0 <= cy - half and cy + half <= 1 and 0 <= cx - half and cx + half <= 1):
            raise ContractError("glyph does not fit inside the image")

    @classmethod
    def from_dict(cls, d: dict) -> "FixtureSpec":
        d = dict(d)
        for key in ("glyph_color", "glyph_center"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def _segment_distance(yy, xx, p, q):
    py, px = p
    qy, qx = q
    dy, dx = qy - py, qx - px
    t = np.clip(((yy - py) * dy + (xx - px) * dx) / (dy * dy + dx * dx), 0.0, 1.0)
    return np.hypot(yy - (py + t * dy), xx - (px + t * dx))


def _stroke_mask(size: int, segments, width: float) -> np.ndarray:
    """Anti-aliased coverage of line segments given in pixel coordinates."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dist = np.full((size, size), np.inf)
    for p, q in segments:
        dist = np.minimum(dist, _segment_distance(yy, xx, p, q))
    return np.clip(width / 2 + 0.5 - dist, 0.0, 1.0)


def glyph_mask(spec: FixtureSpec) -> np.ndarray:
    """Coverage in [0, 1] of a procedural capital "A"."""
    n = spec.size
    cy, cx = spec.glyph_center[0] * n, spec.glyph_center[1] * n
    h = spec.glyph_height * n
    top, bottom = cy - h / 2, cy + h / 2
    left, right = cx - 0.4 * h, cx + 0.4 * h
    bar = top + 0.62 * h
    frac = (bar - top) / h
    segments = [
        ((bottom, left), (top, cx)),
        ((top, cx), (bottom, right)),
        ((bar, cx - 0.4 * h * frac), (bar, cx + 0.4 * h * frac)),
    ]
    return _stroke_mask(n, segments, max(1.0, spec.glyph_width * n))


def _texture(rng: np.random.Generator, n: int) -> np.ndarray:
    sigma = rng.uniform(n / 16, n / 5)
    field_ = gaussian_filter(rng.standard_normal((n, n, 3)), sigma=(sigma, sigma, 0), mode="wrap")
    field_ /= field_.std(axis=(0, 1), keepdims=True) + 1e-12
    base = rng.uniform(0.35, 0.65, size=3)
    contrast = rng.uniform(0.05, 0.12)
    img = base + contrast * field_
    fine = gaussian_filter(rng.standard_normal((n, n, 3)), sigma=(1.0, 1.0, 0))
    return img + rng.uniform(0.0, 0.02) * fine


def _shape_mask(rng: np.random.Generator, n: int) -> np.ndarray:
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) + 0.5
    kind = rng.integers(3)
    cy, cx = rng.uniform(0.15 * n, 0.85 * n, size=2)
    if kind == 0:
        r = rng.uniform(0.08 * n, 0.25 * n)
        return np.clip(r + 0.5 - np.hypot(yy - cy, xx - cx), 0.0, 1.0)
    if kind == 1:
        hy, hx = rng.uniform(0.08 * n, 0.25 * n, size=2)
        return np.clip(np.minimum(hy + 0.5 - np.abs(yy - cy), hx + 0.5 - np.abs(xx - cx)), 0.0, 1.0)
    p = rng.uniform(0.1 * n, 0.9 * n, size=2)
    q = rng.uniform(0.1 * n, 0.9 * n, size=2)
    return _stroke_mask(n, [(tuple(p), tuple(q))], rng.uniform(0.05 * n, 0.14 * n))


def make_clean_image(rng: np.random.Generator, n: int) -> np.ndarray:
    img = _texture(rng, n)
    for _ in range(rng.integers(0, 2)):
        m = _shape_mask(rng, n)[..., None]
        color = rng.uniform(0.0, 1.0, size=3)
        img = (1 - m) * img + m * color
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def make_clean_corpus(spec: FixtureSpec) -> list[np.ndarray]:
    rng = np.random.default_rng(spec.texture_seed)
    return [make_clean_image(rng, spec.size) for _ in range(spec.corpus_count)]


def overlay_glyph(spec: FixtureSpec, base: np.ndarray) -> np.ndarray:
    m = glyph_mask(spec)[..., None]
    color = np.asarray(spec.glyph_color, dtype=np.float64)
    out = (1 - m) * np.asarray(base, dtype=np.float64) + m * color
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def make_triples(spec: FixtureSpec, corpus) -> list[tuple[np.ndarray, np.ndarray]]:
    """``(x_c, x_b)`` pairs: the first ``triple_count`` corpus images as bases."""
    if len(corpus) < spec.triple_count:
        raise ContractError(f"corpus has {len(corpus)} images, need {spec.triple_count}")
    return [(overlay_glyph(spec, corpus[i]), np.asarray(corpus[i], dtype=np.float32))
            for i in range(spec.triple_count)]


# ----------------------------------------------------------------- on disk


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_image_dir(out_dir, images, prefix: str = "img") -> list[str]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = []
    for i, img in enumerate(images):
        name = f"{prefix}_{i:04d}.dtns"
        tensorio.write_dtns(out_dir / name, img)
        names.append(name)
    return names


def read_image_dir(path) -> tuple[list[str], list[np.ndarray]]:
    """All ``*.dtns`` files in a directory, sorted by name."""
    files = sorted(Path(path).glob("*.dtns"))
    return [f.name for f in files], [tensorio.read_dtns(f) for f in files]


def materialize(spec: FixtureSpec, out_dir) -> dict:
    """Write corpus, bases and targets as DTNS files plus ``index.json``."""
    out_dir = Path(out_dir)
    corpus = make_clean_corpus(spec)
    triples = make_triples(spec, corpus)
    files = {
        "corpus": write_image_dir(out_dir / "corpus", corpus),
        "base": write_image_dir(out_dir / "base", [b for _, b in triples], prefix="base"),
        "target": write_image_dir(out_dir / "target", [c for c, _ in triples], prefix="target"),
    }
    index = {
        "spec": spec.to_dict(),
        "counts": {k: len(v) for k, v in files.items()},
        "files": {k: {name: file_sha256(out_dir / k / name) for name in v} for k, v in files.items()},
    }
    (out_dir / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    return index


def verify(out_dir) -> list[str]:
    """Integrity problems of a materialized fixture directory (empty when intact)."""
    out_dir = Path(out_dir)
    index = json.loads((out_dir / "index.json").read_text())
    problems = []
    for group, entries in index["files"].items():
        present = sorted(p.name for p in (out_dir / group).glob("*.dtns"))
        if len(present) != index["counts"][group] or sorted(entries) != present:
            problems.append(f"{group}: manifest lists {index['counts'][group]} files, found {len(present)}")
            continue
        for name, digest in entries.items():
            if file_sha256(out_dir / group / name) != digest:
                problems.append(f"{group}/{name}: hash mismatch")
    return problems
