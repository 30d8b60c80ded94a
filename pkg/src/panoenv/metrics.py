"""Navigation metrics (TL, NE, SR, SPL, GP) and the Frechet feature distance."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .world import WorldGraph, geodesic

SUCCESS_RADIUS = 3.0


@dataclass(frozen=True)
class EpisodeResult:
    predicted: tuple[int, ...]
    reference: tuple[int, ...]
    graph: WorldGraph

    def __post_init__(self):
        if not self.predicted:
            raise ValueError("predicted path is empty")
        if not self.reference:
            raise ValueError("reference path is empty")
        if self.predicted[0] != self.reference[0]:
            raise ValueError("predicted path must start at the episode start")
        for n in (*self.predicted, *self.reference):
            if n not in self.graph:
                raise ValueError(f"node {n} not in world")

    @property
    def start(self) -> int:
        return self.reference[0]

    @property
    def goal(self) -> int:
        return self.reference[-1]


@dataclass
class MetricsReport:
    TL: float
    NE: float
    SR: float
    SPL: float
    GP: float
    episodes: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"TL": self.TL, "NE": self.NE, "SR": self.SR, "SPL": self.SPL, "GP": self.GP, "episodes": self.episodes}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def _episode(r: EpisodeResult, radius: float) -> dict:
    g = r.graph
    length = g.path_length(r.predicted)
    d = geodesic(g, r.start, r.goal)
    ne = geodesic(g, r.predicted[-1], r.goal)
    s = 1.0 if ne <= radius else 0.0
    denom = max(length, d)
    spl = s if denom == 0 else s * d / denom
    return {
        "path": list(r.predicted),
        "TL": length,
        "NE": ne,
        "success": s,
        "SPL": spl,
        "GP": d - ne,
    }


def evaluate(results: Sequence[EpisodeResult], success_radius: float = SUCCESS_RADIUS) -> MetricsReport:
    if not results:
        raise ValueError("no episodes to evaluate")
    rows = [_episode(r, success_radius) for r in results]
    mean = lambda k: float(np.mean([row[k] for row in rows]))  # noqa: E731
    report = MetricsReport(mean("TL"), mean("NE"), 100.0 * mean("success"), 100.0 * mean("SPL"), mean("GP"), rows)
    assert report.SPL <= report.SR + 1e-9
    return report


def goal_progress(results: Sequence[EpisodeResult]) -> float:
    """Mean reduction of geodesic distance to the goal."""
    if not results:
        raise ValueError("no episodes to evaluate")
    return float(np.mean([geodesic(r.graph, r.start, r.goal) - geodesic(r.graph, r.predicted[-1], r.goal) for r in results]))


# ---------------------------------------------------------------------------
# Frechet distance over a fixed random feature map


class FeatureExtractor:
    """Frozen two-layer random network: tanh(W2 tanh(W1 x + b1) + b2)."""

    def __init__(self, in_dim: int, d: int = 16, hidden: int = 64, seed: int = 1234):
        rng = np.random.default_rng(seed)
        self.in_dim, self.d = in_dim, d
        self.W1 = rng.normal(0.0, 1.0 / np.sqrt(in_dim), size=(hidden, in_dim))
        self.b1 = rng.normal(0.0, 0.1, size=hidden)
        self.W2 = rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(d, hidden))
        self.b2 = rng.normal(0.0, 0.1, size=d)

    def __call__(self, images: np.ndarray) -> np.ndarray:
        x = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
        if x.shape[1] != self.in_dim:
            raise ValueError(f"expected {self.in_dim} values per image, got {x.shape[1]}")
        h = np.tanh((x - 0.5) @ self.W1.T + self.b1)
        return np.tanh(h @ self.W2.T + self.b2)


@dataclass(frozen=True)
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def stats_from_features(f: np.ndarray) -> FeatureStats:
    f = np.asarray(f, dtype=np.float64)
    n, d = f.shape
    if n < d + 1:
        raise ValueError(f"need at least {d + 1} samples, got {n}")
    # shift by the first row: covariance is unchanged, identical rows give exact zeros
    g = f - f[0]
    mu = f[0] + g.mean(axis=0)
    g = g - g.mean(axis=0)
    cov = (g.T @ g) / (n - 1)
    return FeatureStats(mu, 0.5 * (cov + cov.T), n)


def feature_stats(images: np.ndarray, extractor: FeatureExtractor | None = None) -> FeatureStats:
    images = np.asarray(images, dtype=np.float64)
    extractor = extractor or FeatureExtractor(int(np.prod(images.shape[1:])))
    return stats_from_features(extractor(images))


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """``|mu_a - mu_b|^2 + Tr(Sa + Sb - 2 (Sa^1/2 Sb Sa^1/2)^1/2)``, clamped at zero."""
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    try:
        ra = _psd_sqrt(a.cov)
        cross = _psd_sqrt(ra @ b.cov @ ra)
    except np.linalg.LinAlgError as exc:
        raise ArithmeticError(f"eigendecomposition failed: {exc}") from exc
    diff = a.mean - b.mean
    value = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.trace(cross))
    return max(value, 0.0)
