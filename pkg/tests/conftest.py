import csv

import numpy as np
import pytest

from didc.data import PanelDataset


def make_panel(z, outcomes, z0=0.0, order=None):
    """Panel with ids ``u0, u1, ...`` from a dict of period -> outcome array."""
    order = tuple(order or outcomes)
    ids = tuple(f"u{i}" for i in range(len(z)))
    return PanelDataset(ids, np.asarray(z, float), {str(t): np.asarray(v, float) for t, v in outcomes.items()},
                        z0, tuple(str(t) for t in order))


def write_fiscal_csv(path, n=800, seed=5):
    """Municipal-style long panel: population cutoff 5000, three outcomes, 1998-2001.

    The deficit rises by 10 above the cutoff in every year and by a further
    20 below it in 2001, so the differenced jump is -20.
    """
    rng = np.random.default_rng(seed)
    pop = rng.uniform(2000, 8000, n)
    z = (pop - 5000) / 3000
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["municipality", "year", "population", "deficit", "taxes", "fiscal_gap"])
        for i in range(n):
            for t in (1998, 1999, 2000, 2001):
                post = t == 2001
                d = 30 * z[i] + 5 * z[i] ** 2 + 10 * (pop[i] >= 5000) + 20 * (pop[i] < 5000) * post \
                    + rng.normal(0, 10)
                tx = 100 + 40 * z[i] - 8 * (pop[i] < 5000) * post + rng.normal(0, 15)
                w.writerow([f"m{i}", t, round(float(pop[i]), 1), repr(float(d)), repr(float(tx)), repr(float(d - tx))])
    return path


@pytest.fixture
def fiscal_csv(tmp_path):
    return write_fiscal_csv(tmp_path / "fiscal.csv")
