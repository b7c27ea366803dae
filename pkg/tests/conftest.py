import numpy as np
import pytest

from featage.store import LongitudinalDataset, make_record
from featage.synth import NOISELESS_FIXTURE, SyntheticConfig, generate

# Noiseless drift data for checking linear interpolation against the
# generator's oracle. Many subjects over few ages keeps cohort means tight;
# the drift stays moderate because a straight line in feature space can
# only track the sphere's curvature closely while gamma*t/100 is well
# below 1 (the intrinsic cosine ceiling of the linear move drops with
# drift distance, independent of cohort noise).
INTERP_FIXTURE = SyntheticConfig(
    dim=32,
    n_subjects=2000,
    ages_per_subject=(2, 4),
    age_range=(4, 20),
    drift_magnitude=3.0,
    noise_sigma=0.0,
    seed=5,
)


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.sqrt((v * v).sum())


def records_from_rows(rows):
    """rows: (sid, age, seq, vector-like) -> validated records."""
    return [make_record(sid, age, seq, np.asarray(vec, dtype=np.float64)) for sid, age, seq, vec in rows]


def dataset_from_rows(dim, rows):
    return LongitudinalDataset(dim, records_from_rows(rows))


def random_unit_dataset(rng, n_subjects=6, dim=4, ages=(3, 7, 12), prefix="s"):
    rows = []
    for i in range(n_subjects):
        for age in ages:
            rows.append((f"{prefix}{i}", age, 0, unit(rng.standard_normal(dim))))
    return dataset_from_rows(dim, rows)


@pytest.fixture(scope="session")
def noiseless_data():
    return generate(NOISELESS_FIXTURE)
