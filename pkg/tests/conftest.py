import datetime as dt

import numpy as np

from smsn_nlme.bootstrap import simulate_dataset
from smsn_nlme.curves import GeneralizedLogisticCurve, LinearCurve
from smsn_nlme.data_io import PreparedPanel, Subject
from smsn_nlme.estimation import Theta
from smsn_nlme.smsn_dist import MixingLaw

START = dt.date(2020, 3, 1)


def design(n_subjects: int, n_days: int, snapshot: bool = True) -> PreparedPanel:
    """Skeleton panel: subjects S00, S01, ... observed on days 0..n_days-1."""
    subs = [Subject(f"S{i:02d}", np.arange(n_days, dtype=float), np.zeros(n_days), START, np.zeros(n_days))
            for i in range(n_subjects)]
    return PreparedPanel(subs, 1.0, START + dt.timedelta(days=n_days - 1) if snapshot else None)


def linear_theta(beta=(2.0, 0.5), D=0.8, sigma2=1.0, lam=0.0, mixing=None) -> Theta:
    beta = np.asarray(beta, dtype=float)
    D = np.atleast_2d(D)
    return Theta(beta, sigma2, D, np.full(D.shape[0], lam), mixing or MixingLaw.normal())


def linear_panel(seed: int, n_subjects=8, n_days=10, theta=None, curve=None):
    theta = theta or linear_theta()
    curve = curve or LinearCurve(1, 0)
    rng = np.random.default_rng(seed)
    return simulate_dataset(theta, design(n_subjects, n_days), rng, curve=curve), theta, curve


# population curve peaking near day 45 at height ~4
GLC_THETA = Theta(np.array([2.0, -1.05, -3.0, 1.2]), 0.5, np.diag([0.01, 0.02]), np.zeros(2), MixingLaw.normal())


def glc_panel(seed: int, n_subjects=4, n_days=90, theta=None):
    theta = theta or GLC_THETA
    rng = np.random.default_rng(seed)
    return simulate_dataset(theta, design(n_subjects, n_days), rng, curve=GeneralizedLogisticCurve())


# one summary line per acceptance criterion, printed at the end of the run
CRITERIA: dict = {}


def record(number: int, ok: bool, detail: str) -> None:
    CRITERIA[number] = (ok, detail)
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
