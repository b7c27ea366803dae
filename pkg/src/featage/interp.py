"""Mean-feature tables and attribute-vector interpolation.

The simplest way to move an embedding across ages: average each age
cohort's embeddings, take the difference of two cohort means as the aging
direction between those ages, and translate an embedding along it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataFormatError, ValidationError
from .store import LongitudinalDataset, as_unit, read_bin_blob, write_bin_blob

MEAN_TABLE_ID = "__mean__"


@dataclass
class MeanFeatureTable:
    """Per-age arithmetic mean embeddings with cohort sizes.

    Means are deliberately NOT renormalized: attribute vectors must be plain
    differences of arithmetic means or the antisymmetry and chain identities
    below stop holding exactly.
    """

    dim: int
    means: dict[int, tuple[np.ndarray, int]]

    def ages(self) -> list[int]:
        return sorted(self.means)


@dataclass
class AttributeVector:
    """Difference of cohort means: the aging direction from age t1 to t2."""

    t1: int
    t2: int
    delta: np.ndarray


def mean_features(ds: LongitudinalDataset, min_cohort: int = 1) -> MeanFeatureTable:
    """Component-wise mean of each age cohort with at least min_cohort records.

    Cohorts are summed in sorted record-key order, so the result is exactly
    invariant to the dataset's record order.
    """
    means: dict[int, tuple[np.ndarray, int]] = {}
    for age in sorted(ds.by_age):
        cohort = sorted(ds.by_age[age], key=lambda r: r.key)
        if len(cohort) < min_cohort:
            continue
        total = np.zeros(ds.dim, dtype=np.float64)
        for rec in cohort:
            total += rec.vector
        means[age] = (total / len(cohort), len(cohort))
    return MeanFeatureTable(ds.dim, means)


def attribute_vector(table: MeanFeatureTable, t1: int, t2: int) -> AttributeVector:
    """delta = mean(t2) - mean(t1). Antisymmetric in its arguments."""
    for t in (t1, t2):
        if t not in table.means:
            raise ValidationError(f"no mean feature for age {t}")
    delta = table.means[t2][0] - table.means[t1][0]
    return AttributeVector(t1, t2, delta)


def interpolate_raw(phi: np.ndarray, delta: AttributeVector | np.ndarray, alpha: float) -> np.ndarray:
    """phi + alpha * delta, without renormalization (affine in alpha)."""
    d = delta.delta if isinstance(delta, AttributeVector) else np.asarray(delta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    if phi.shape != d.shape:
        raise ValidationError(f"dimension mismatch: phi {phi.shape} vs delta {d.shape}")
    return phi + alpha * d


def interpolate(phi: np.ndarray, delta: AttributeVector | np.ndarray, alpha: float) -> np.ndarray:
    """Translate phi along the aging direction, renormalized to unit length.

    Scoring assumes hypersphere embeddings, so the translated vector is put
    back on the sphere. Use interpolate_raw for the pre-normalization value.
    """
    return as_unit(interpolate_raw(phi, delta, alpha), context="interpolated vector")


def serialize_mean_table(table: MeanFeatureTable) -> bytes:
    """Mean table as a BIN blob: one row per age, id __mean__, seq = cohort size."""
    rows = [
        (MEAN_TABLE_ID, age, table.means[age][1], table.means[age][0])
        for age in table.ages()
    ]
    return write_bin_blob(table.dim, rows)


def parse_mean_table(data: bytes) -> MeanFeatureTable:
    """Inverse of serialize_mean_table (values at float32 resolution)."""
    dim, rows = read_bin_blob(data)
    means: dict[int, tuple[np.ndarray, int]] = {}
    for sid, age, seq, vec in rows:
        if sid != MEAN_TABLE_ID:
            raise DataFormatError(f"unexpected id {sid!r} in mean table stream")
        if age in means:
            raise DataFormatError(f"duplicate mean entry for age {age}")
        means[age] = (vec, seq)
    return MeanFeatureTable(dim, means)
