"""Similarity scoring and identification/verification metrics.

Similarity is the dot product of unit vectors (cosine). Score matrices are
computed block-wise, grouped by (probe age, gallery age), because feature
aging transforms one side per age pair; the no-model path uses the same
block structure so that an identity-initialized model reproduces the raw
matrix bit for bit.

Thresholds are order statistics of the impostor score distribution with a
strict ``score > threshold`` acceptance rule, so the empirical false accept
rate never exceeds the target.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigError, ValidationError
from .model import RENORM_TOL, AgeProgressionModel
from .store import EmbeddingRecord, GalleryProbeSplit, LongitudinalDataset, build_youngest_oldest


class AgingDirection(Enum):
    NONE = "none"
    GALLERY_TO_PROBE = "age_gallery_to_probe"
    PROBE_TO_GALLERY = "age_probe_to_gallery"


def unit_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise unit normalization; rows already unit (to 1e-12) pass through."""
    m = np.asarray(m, dtype=np.float64)
    norms = np.sqrt((m * m).sum(axis=1))
    if np.any(norms == 0.0):
        raise ValidationError("cannot score a zero vector")
    denom = np.where(np.abs(norms - 1.0) <= RENORM_TOL, 1.0, norms)
    return m / denom[:, None]


def score(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity of two unit vectors: their dot product."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(a @ b)


@dataclass
class ScoreMatrix:
    """Probe-by-gallery similarity scores with identity labels and ages."""

    scores: np.ndarray
    probe_labels: tuple[str, ...]
    gallery_labels: tuple[str, ...]
    probe_ages: tuple[int, ...]
    gallery_ages: tuple[int, ...]

    @property
    def shape(self) -> tuple[int, int]:
        return self.scores.shape


def _group_by_age(ages) -> dict[int, np.ndarray]:
    groups: dict[int, list[int]] = {}
    for i, age in enumerate(ages):
        groups.setdefault(int(age), []).append(i)
    return {age: np.array(idx, dtype=np.intp) for age, idx in sorted(groups.items())}


def score_matrix(
    probes: list[EmbeddingRecord],
    gallery: list[EmbeddingRecord],
    model: AgeProgressionModel | None = None,
    direction: AgingDirection = AgingDirection.GALLERY_TO_PROBE,
) -> ScoreMatrix:
    """Score every probe against every gallery entry.

    With a model, one side is age-progressed per (probe age, gallery age)
    pair before scoring: GALLERY_TO_PROBE replaces each gallery vector g by
    forward_unit(g, age(g), age(p)) for each probe p, PROBE_TO_GALLERY is
    the mirror image. Gallery order is canonicalized by (subject, age, seq)
    so shuffled inputs produce identical matrices.
    """
    if not probes or not gallery:
        raise ValidationError("need at least one probe and one gallery record")
    gallery = sorted(gallery, key=lambda r: r.key)
    dim = gallery[0].vector.shape[0]
    for rec in list(probes) + gallery:
        if rec.vector.shape[0] != dim:
            raise ValidationError(f"record {rec.key} has dimension {rec.vector.shape[0]} != {dim}")
    if model is not None and model.dim != dim:
        raise ValidationError(f"model dimension {model.dim} != data dimension {dim}")
    p_raw = np.stack([r.vector for r in probes])
    g_raw = np.stack([r.vector for r in gallery])
    p_unit = unit_rows(p_raw)
    g_unit = unit_rows(g_raw)
    p_groups = _group_by_age([r.age for r in probes])
    g_groups = _group_by_age([r.age for r in gallery])
    mode = AgingDirection.NONE if model is None else direction
    scores = np.empty((len(probes), len(gallery)))
    for tp, rows in p_groups.items():
        for tg, cols in g_groups.items():
            pb = np.ascontiguousarray(p_unit[rows])
            gb = np.ascontiguousarray(g_unit[cols])
            if mode is AgingDirection.GALLERY_TO_PROBE:
                gb = unit_rows(model.forward_batch(np.ascontiguousarray(g_raw[cols]), tg, tp))
            elif mode is AgingDirection.PROBE_TO_GALLERY:
                pb = unit_rows(model.forward_batch(np.ascontiguousarray(p_raw[rows]), tp, tg))
            scores[np.ix_(rows, cols)] = pb @ gb.T
    return ScoreMatrix(
        scores=scores,
        probe_labels=tuple(r.subject_id for r in probes),
        gallery_labels=tuple(r.subject_id for r in gallery),
        probe_ages=tuple(r.age for r in probes),
        gallery_ages=tuple(r.age for r in gallery),
    )


# ---------------------------------------------------------------------------
# Closed-set identification
# ---------------------------------------------------------------------------


def mate_ranks(sm: ScoreMatrix) -> np.ndarray:
    """Best rank of each probe's true mate; ties break toward lower index."""
    glabels = np.array(sm.gallery_labels)
    ranks = np.zeros(len(sm.probe_labels), dtype=np.intp)
    for i, label in enumerate(sm.probe_labels):
        mate_cols = np.flatnonzero(glabels == label)
        if mate_cols.size == 0:
            raise ValidationError(f"probe subject {label!r} absent from gallery")
        row = sm.scores[i]
        best = None
        for j in mate_cols:
            s = row[j]
            r = 1 + int(np.sum(row > s)) + int(np.sum(row[:j] == s))
            if best is None or r < best:
                best = r
        ranks[i] = best
    return ranks


def rank1_closed(sm: ScoreMatrix) -> float:
    """Fraction of probes whose top-scoring gallery entry is their mate."""
    ranks = mate_ranks(sm)
    return float(np.mean(ranks == 1))


def cmc(sm: ScoreMatrix, max_rank: int | None = None) -> list[tuple[int, float]]:
    """Cumulative match characteristic up to max_rank (default: gallery size)."""
    n_g = len(sm.gallery_labels)
    if max_rank is None:
        max_rank = n_g
    if max_rank < 1:
        raise ConfigError(f"max_rank must be >= 1, got {max_rank}")
    ranks = mate_ranks(sm)
    return [(r, float(np.mean(ranks <= r))) for r in range(1, max_rank + 1)]


# ---------------------------------------------------------------------------
# Verification and open-set thresholds
# ---------------------------------------------------------------------------


def far_threshold(impostor_scores, far: float) -> float:
    """Threshold guaranteeing empirical FAR <= far under strict acceptance.

    Returns the (floor(far*N)+1)-th largest impostor score; accepting only
    scores strictly above it leaves at most floor(far*N) impostors accepted.
    """
    scores = np.asarray(impostor_scores, dtype=np.float64)
    if scores.size == 0:
        raise ValidationError("impostor score list is empty")
    if not 0.0 < far < 1.0:
        raise ConfigError(f"far must be in (0, 1), got {far}")
    k = math.floor(far * scores.size)
    ordered = np.sort(scores)[::-1]
    return float(ordered[k])


def tar_at_far(genuine_scores, impostor_scores, far: float) -> float:
    """Fraction of genuine scores strictly above the FAR threshold."""
    genuine = np.asarray(genuine_scores, dtype=np.float64)
    if genuine.size == 0:
        raise ValidationError("genuine score list is empty")
    tau = far_threshold(impostor_scores, far)
    return float(np.mean(genuine > tau))


def open_set_rank1(mated_sm: ScoreMatrix, unmated_sm: ScoreMatrix, far: float) -> float:
    """Rank-1 open-set identification rate at a FAR-derived threshold.

    The threshold is set on the unmated probes' maximum gallery scores. A
    mated probe counts only if its own maximum score clears the threshold
    AND its top-ranked gallery identity is its true mate.
    """
    if mated_sm.gallery_labels != unmated_sm.gallery_labels:
        raise ValidationError("mated and unmated matrices must share one gallery")
    if len(unmated_sm.probe_labels) == 0:
        raise ValidationError("no unmated probes")
    tau = far_threshold(unmated_sm.scores.max(axis=1), far)
    accepted = mated_sm.scores.max(axis=1) > tau
    correct = mate_ranks(mated_sm) == 1
    return float(np.mean(accepted & correct))


# ---------------------------------------------------------------------------
# Aggregate evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    far_target: float
    threshold: float
    tar_at_far: float
    rank1_closed: float
    cmc: list[tuple[int, float]]
    rank1_open_at_far: float | None
    open_threshold: float | None
    per_lapse: dict[int, float]
    per_lapse_counts: dict[int, int]
    n_gallery: int
    n_mated: int
    n_unmated: int


def evaluate(
    split: GalleryProbeSplit,
    model: AgeProgressionModel | None = None,
    far: float = 0.001,
    direction: AgingDirection = AgingDirection.GALLERY_TO_PROBE,
) -> EvalReport:
    """All metrics for one gallery/probe split.

    Verification genuine scores pair each mated probe with its own gallery
    mate; impostor scores pair it with every other gallery entry. Open-set
    metrics are computed only when unmated probes are present. Per-lapse
    buckets group mated probes by (probe age - gallery mate age) in years.
    """
    split.validate()
    if not split.mated_probes:
        raise ValidationError("split has no mated probes to evaluate")
    sm = score_matrix(split.mated_probes, split.gallery, model, direction)
    glabels = np.array(sm.gallery_labels)
    n_p, n_g = sm.shape
    mate_col = np.array(
        [int(np.flatnonzero(glabels == label)[0]) for label in sm.probe_labels]
    )
    genuine = sm.scores[np.arange(n_p), mate_col]
    impostor_mask = np.ones_like(sm.scores, dtype=bool)
    impostor_mask[np.arange(n_p), mate_col] = False
    impostor = sm.scores[impostor_mask]
    tau = far_threshold(impostor, far)
    tar = float(np.mean(genuine > tau))
    ranks = mate_ranks(sm)
    curve = [(r, float(np.mean(ranks <= r))) for r in range(1, n_g + 1)]
    rank1 = curve[0][1]
    open_rank1 = open_tau = None
    if split.unmated_probes:
        sm_unmated = score_matrix(split.unmated_probes, split.gallery, model, direction)
        open_tau = far_threshold(sm_unmated.scores.max(axis=1), far)
        accepted = sm.scores.max(axis=1) > open_tau
        open_rank1 = float(np.mean(accepted & (ranks == 1)))
    lapse_hits: dict[int, list[bool]] = {}
    for i in range(n_p):
        lapse = sm.probe_ages[i] - sm.gallery_ages[mate_col[i]]
        lapse_hits.setdefault(lapse, []).append(bool(ranks[i] == 1))
    per_lapse = {lap: float(np.mean(hits)) for lap, hits in sorted(lapse_hits.items())}
    per_lapse_counts = {lap: len(hits) for lap, hits in sorted(lapse_hits.items())}
    return EvalReport(
        far_target=far,
        threshold=tau,
        tar_at_far=tar,
        rank1_closed=rank1,
        cmc=curve,
        rank1_open_at_far=open_rank1,
        open_threshold=open_tau,
        per_lapse=per_lapse,
        per_lapse_counts=per_lapse_counts,
        n_gallery=n_g,
        n_mated=n_p,
        n_unmated=len(split.unmated_probes),
    )


# ---------------------------------------------------------------------------
# Heatmap: rank-1 by (gallery age bin, time lapse bin)
# ---------------------------------------------------------------------------


@dataclass
class HeatmapResult:
    rates: np.ndarray  # (n_age_bins, n_lapse_bins), NaN where under-populated
    counts: np.ndarray
    age_bins: list[tuple[int, int]]
    lapse_bins: list[tuple[int, int]]


def _check_bins(bins, what: str) -> list[tuple[int, int]]:
    if not bins:
        raise ConfigError(f"{what} bins must be nonempty")
    out = [(int(lo), int(hi)) for lo, hi in bins]
    for lo, hi in out:
        if lo >= hi:
            raise ConfigError(f"{what} bin [{lo}, {hi}) is empty")
    for (lo1, hi1), (lo2, hi2) in zip(out, out[1:]):
        if hi1 > lo2:
            raise ConfigError(f"{what} bins overlap or are unsorted near [{lo2}, {hi2})")
    return out


def _bin_index(bins, value: int) -> int | None:
    for i, (lo, hi) in enumerate(bins):
        if lo <= value < hi:
            return i
    return None


def heatmap(
    ds: LongitudinalDataset,
    model: AgeProgressionModel | None,
    age_bins,
    lapse_bins,
    min_cell: int = 5,
    direction: AgingDirection = AgingDirection.GALLERY_TO_PROBE,
) -> HeatmapResult:
    """Rank-1 rate per (gallery age bin, time lapse bin), half-open bins.

    Builds the youngest-vs-oldest split of ``ds``; each subject falls into
    the cell of its enrolled (youngest) age and its probe time lapse, and
    its probe is ranked against the full gallery. Cells with fewer than
    min_cell subjects are reported as NaN.
    """
    age_bins = _check_bins(age_bins, "age")
    lapse_bins = _check_bins(lapse_bins, "lapse")
    rates = np.full((len(age_bins), len(lapse_bins)), np.nan)
    counts = np.zeros((len(age_bins), len(lapse_bins)), dtype=int)
    split = build_youngest_oldest(ds)
    if not split.mated_probes:
        return HeatmapResult(rates, counts, age_bins, lapse_bins)
    sm = score_matrix(split.mated_probes, split.gallery, model, direction)
    ranks = mate_ranks(sm)
    gallery_age = {r.subject_id: r.age for r in split.gallery}
    cells: dict[tuple[int, int], list[bool]] = {}
    for i, probe in enumerate(split.mated_probes):
        g_age = gallery_age[probe.subject_id]
        ai = _bin_index(age_bins, g_age)
        li = _bin_index(lapse_bins, probe.age - g_age)
        if ai is None or li is None:
            continue
        cells.setdefault((ai, li), []).append(bool(ranks[i] == 1))
    for (ai, li), hits in cells.items():
        counts[ai, li] = len(hits)
        if len(hits) >= min_cell:
            rates[ai, li] = float(np.mean(hits))
    return HeatmapResult(rates, counts, age_bins, lapse_bins)


# ---------------------------------------------------------------------------
# Report rendering
# ---------------------------------------------------------------------------


def format_report_text(report: EvalReport, label: str = "evaluation") -> str:
    lines = [
        f"== {label} ==",
        f"gallery size:        {report.n_gallery}",
        f"mated probes:        {report.n_mated}",
        f"unmated probes:      {report.n_unmated}",
        f"verification TAR @ {report.far_target:.4%} FAR: {report.tar_at_far:.2%}"
        f"  (threshold {report.threshold:.6f})",
        f"closed-set rank-1:   {report.rank1_closed:.2%}",
    ]
    if report.rank1_open_at_far is not None:
        lines.append(
            f"open-set rank-1 @ {report.far_target:.4%} FAR: {report.rank1_open_at_far:.2%}"
            f"  (threshold {report.open_threshold:.6f})"
        )
    if report.per_lapse:
        lines.append("rank-1 by time lapse (years):")
        for lap, rate in report.per_lapse.items():
            lines.append(
                f"  {lap:3d}y  {rate:7.2%}  (n={report.per_lapse_counts[lap]})"
            )
    return "\n".join(lines) + "\n"


def format_report_kv(report: EvalReport, prefix: str = "") -> str:
    """Machine-readable output: one metric=value per line plus a CMC CSV block."""
    p = f"{prefix}." if prefix else ""
    lines = [
        f"{p}far_target={report.far_target!r}",
        f"{p}threshold={report.threshold!r}",
        f"{p}tar_at_far={report.tar_at_far!r}",
        f"{p}rank1_closed={report.rank1_closed!r}",
        f"{p}rank1_open_at_far={'' if report.rank1_open_at_far is None else repr(report.rank1_open_at_far)}",
        f"{p}open_threshold={'' if report.open_threshold is None else repr(report.open_threshold)}",
        f"{p}n_gallery={report.n_gallery}",
        f"{p}n_mated={report.n_mated}",
        f"{p}n_unmated={report.n_unmated}",
        f"{p}cmc_csv=rank,rate",
    ]
    lines += [f"{p}cmc_csv={rank},{rate!r}" for rank, rate in report.cmc]
    lines.append(f"{p}per_lapse_csv=lapse,rank1,count")
    lines += [
        f"{p}per_lapse_csv={lap},{rate!r},{report.per_lapse_counts[lap]}"
        for lap, rate in report.per_lapse.items()
    ]
    return "\n".join(lines) + "\n"


def format_heatmap_csv(hm: HeatmapResult) -> str:
    """Heatmap as CSV: one row per age bin, empty cells where under-populated."""
    header = "age_bin," + ",".join(f"lapse[{lo}-{hi})" for lo, hi in hm.lapse_bins)
    lines = [header]
    for i, (lo, hi) in enumerate(hm.age_bins):
        cells = [
            "" if np.isnan(hm.rates[i, j]) else repr(float(hm.rates[i, j]))
            for j in range(len(hm.lapse_bins))
        ]
        lines.append(f"[{lo}-{hi})," + ",".join(cells))
    return "\n".join(lines) + "\n"
