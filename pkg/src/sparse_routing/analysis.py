"""Per-layer routing distributions and cross-dataset cosine similarity."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .estimators import RoutingTrace
from .model import ModelParams, ToyModelSpec, model_forward

DISTRIBUTION_HEADER = ("layer", "expert", "count", "fraction")


@dataclass
class RoutingDistribution:
    """Selection counts per (layer, expert); ``fractions`` normalizes each layer to sum 1."""

    counts: np.ndarray  # (n_layers, n_expert) int
    tokens: int
    label: str = ""

    @classmethod
    def from_traces(cls, traces: Sequence[RoutingTrace], n_expert: int, label: str = "") -> RoutingDistribution:
        counts = np.stack([np.bincount(t.experts.reshape(-1), minlength=n_expert) for t in traces]).astype(np.int64)
        return cls(counts, traces[0].n_tokens, label)

    @property
    def n_layers(self) -> int:
        return self.counts.shape[0]

    @property
    def n_expert(self) -> int:
        return self.counts.shape[1]

    @property
    def fractions(self) -> np.ndarray:
        totals = self.counts.sum(axis=1, keepdims=True)
        return np.divide(self.counts, totals, out=np.zeros(self.counts.shape), where=totals > 0)

    def vector(self) -> np.ndarray:
        """Layer-major, then expert, flattening of the normalized fractions."""
        return self.fractions.reshape(-1)

    def to_csv(self, path: str | Path) -> None:
        frac = self.fractions
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(DISTRIBUTION_HEADER)
            for layer in range(self.n_layers):
                for e in range(self.n_expert):
                    w.writerow((layer, e, int(self.counts[layer, e]), repr(float(frac[layer, e]))))

    @classmethod
    def from_csv(cls, path: str | Path, top_k: int, label: str = "") -> RoutingDistribution:
        cells: dict[tuple[int, int], int] = {}
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != DISTRIBUTION_HEADER:
                raise ValueError(f"unexpected header {reader.fieldnames}")
            for r in reader:
                cells[(int(r["layer"]), int(r["expert"]))] = int(r["count"])
        L = 1 + max(k[0] for k in cells)
        n = 1 + max(k[1] for k in cells)
        counts = np.zeros((L, n), dtype=np.int64)
        for (layer, e), c in cells.items():
            counts[layer, e] = c
        return cls(counts, int(counts[0].sum() // top_k), label)


def routing_distribution(
    spec: ToyModelSpec,
    params: ModelParams,
    x: np.ndarray,
    label: str = "",
    mode: str = "deterministic",
    rng: np.random.Generator | None = None,
) -> RoutingDistribution:
    out = model_forward(x, spec, params, rng, training=False, inference_mode=mode)
    return RoutingDistribution.from_traces(out.traces, spec.layers[0].n_expert, label)


@dataclass
class SimilarityMatrix:
    labels: list[str]
    matrix: np.ndarray

    @classmethod
    def from_distributions(cls, dists: Sequence[RoutingDistribution]) -> SimilarityMatrix:
        shapes = {d.counts.shape for d in dists}
        if len(shapes) != 1:
            raise ValueError(f"routing distributions have different shapes: {sorted(shapes)}")
        vecs = [d.vector() for d in dists]
        norms = [np.linalg.norm(v) for v in vecs]
        k = len(vecs)
        m = np.zeros((k, k))
        for i in range(k):
            m[i, i] = 1.0 if norms[i] > 0 else 0.0
            for j in range(i + 1, k):
                if norms[i] > 0 and norms[j] > 0:
                    m[i, j] = m[j, i] = min(1.0, float(vecs[i] @ vecs[j]) / (norms[i] * norms[j]))
        return cls([d.label for d in dists], m)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["label", *self.labels])
            for lab, row in zip(self.labels, self.matrix):
                w.writerow([lab, *(repr(float(v)) for v in row)])

    @classmethod
    def from_csv(cls, path: str | Path) -> SimilarityMatrix:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        labels = rows[0][1:]
        matrix = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
        return cls(labels, matrix)
