"""Dynamic graphs over local features: thresholded cosine similarity.

Graphs are rebuilt from the current features on every call and never
cached across parameter updates. Sub-threshold similarities are zeroed
(not removed), keeping the matrices dense and fixed-shape for the
structure-matching solver; self-edges are always kept.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from . import ot
from .numerics import Matrix, PreconditionError


@dataclass
class FeatureGraph:
    nodes: Matrix  # n x d local features
    similarity: Matrix  # n x n, thresholded cosine similarity
    adjacency: Matrix  # n x n, 0/1
    threshold: float


def build_graph(features: Matrix, tau: float) -> FeatureGraph:
    """Threshold pairwise cosine similarities into a weighted graph."""
    if not -1.0 <= tau <= 1.0:
        raise PreconditionError(f"tau must be in [-1, 1], got {tau}")
    features = nm.as_matrix(features)
    sim = ot.intra_similarity(features)
    keep = sim >= tau
    np.fill_diagonal(keep, True)
    sim = np.where(keep, sim, 0.0)
    adjacency = (sim != 0.0).astype(np.float64)
    return FeatureGraph(features, sim, adjacency, float(tau))
