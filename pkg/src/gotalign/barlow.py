"""Redundancy-reduction twin losses over two and four embedding views.

The cross-correlation matrix between two projected batches is driven
toward identity: the diagonal term enforces view invariance, the
off-diagonal term (weighted by lambda) decorrelates embedding
dimensions. The four-view extension sums the loss over both
within-modality pairs and the two mixed pairs (first view of one
modality with second view of the other); the two same-view mixed pairs
are deliberately not included.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import DimensionError, PreconditionError, Var


@dataclass(frozen=True)
class BtConfig:
    lam: float = 0.005  # off-diagonal weight
    # Standardize-then-correlate is the default; the uncentered variant
    # (plain dot products of raw columns) is kept for comparison.
    centered: bool = True

    def __post_init__(self):
        if self.lam <= 0:
            raise PreconditionError("lam must be > 0")


@dataclass
class EmbeddingBatch:
    """Projected global embeddings (B x D) tagged with their view."""

    z: Var
    view: str  # one of I, I2, T, T2

    @property
    def batch_size(self) -> int:
        return self.z.value.shape[0]


def cross_correlation(za: Var, zb: Var, centered: bool = True) -> Var:
    """Per-dimension correlation matrix of two batches along the batch axis."""
    if za.value.shape != zb.value.shape:
        raise DimensionError(
            f"batch shapes differ: {za.value.shape} vs {zb.value.shape}"
        )
    if za.value.shape[0] < 2:
        raise PreconditionError("cross_correlation needs batch size >= 2")
    if centered:
        za = nm.batch_standardize(za)
        zb = nm.batch_standardize(zb)
    num = nm.matmul(nm.transpose(za), zb)
    # Column energies come from the same Gram kernel as the numerator and
    # the denominator is sqrt(da * db), so self-correlation diagonals are
    # exactly +/-1 rather than one ulp off.
    eye = za.tape.constant(np.eye(za.value.shape[1]))
    da = nm.reduce_sum(nm.mul(nm.matmul(nm.transpose(za), za), eye), "rows")  # 1 x D
    db = nm.reduce_sum(nm.mul(nm.matmul(nm.transpose(zb), zb), eye), "rows")
    denom = nm.sqrt(nm.matmul(nm.transpose(da), db))  # D x D
    return nm.mul(num, nm.recip(denom))


def bt_loss(c: Var, cfg: BtConfig) -> Var:
    """sum_i (1 - C_ii)^2 + lam * sum_{i != j} C_ij^2."""
    d, d2 = c.value.shape
    if d != d2:
        raise DimensionError(f"correlation matrix must be square, got {c.value.shape}")
    tape = c.tape
    eye = np.eye(d)
    diag_gap = nm.mul(nm.sub(tape.constant(eye), c), tape.constant(eye))
    invariance = nm.reduce_sum(nm.mul(diag_gap, diag_gap), "all")
    off = nm.mul(c, tape.constant(1.0 - eye))
    redundancy = nm.reduce_sum(nm.mul(off, off), "all")
    return nm.add(invariance, nm.scale(redundancy, cfg.lam))


def pair_loss(za: Var, zb: Var, cfg: BtConfig) -> Var:
    return bt_loss(cross_correlation(za, zb, cfg.centered), cfg)


def multimodal_bt(
    i: EmbeddingBatch,
    i2: EmbeddingBatch,
    t: EmbeddingBatch,
    t2: EmbeddingBatch,
    cfg: BtConfig,
) -> Var:
    """Sum over the four pairs (I,I2), (T,T2), (I,T2), (I2,T)."""
    shapes = {b.z.value.shape for b in (i, i2, t, t2)}
    if len(shapes) != 1:
        raise DimensionError(f"all four batches must share (B, D), got {shapes}")
    terms = [
        pair_loss(i.z, i2.z, cfg),
        pair_loss(t.z, t2.z, cfg),
        pair_loss(i.z, t2.z, cfg),
        pair_loss(i2.z, t.z, cfg),
    ]
    total = terms[0]
    for term in terms[1:]:
        total = nm.add(total, term)
    return total
