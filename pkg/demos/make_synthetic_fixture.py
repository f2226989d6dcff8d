"""Generate the synthetic JHU-format deaths file shipped with the package.

The real 2020-06-24 snapshot of the Johns Hopkins CSSE
``time_series_covid19_deaths_global.csv`` is not redistributed here.  This
script writes a stand-in with the same layout: nine countries whose daily
deaths follow the generalized-logistic curve with hand-picked per-country
parameters plus Gaussian noise, a province row for the United Kingdom and
two extra countries.  Each country gets its own noise scale ``sigma2/u``,
with ``u`` set so that the noise sd in deaths/day is ``3 sqrt(peak)``
(overdispersed-Poisson-like), which spreads the scales across countries
the way a heavy-tailed mixing law would.

Counts are rounded to non-negative integers.  Run from the repository
root to regenerate; the output is deterministic.

    python demos/make_synthetic_fixture.py
"""

# %%
import datetime as dt
import hashlib
from pathlib import Path

import numpy as np

from smsn_nlme.curves import CurveParams, eta

OUT = Path(__file__).resolve().parents[1] / "src" / "smsn_nlme" / "data"
NAME = "synthetic_deaths_global_2020-06-24.csv"

START = dt.date(2020, 1, 22)
END = dt.date(2020, 6, 24)
K_Z = 33.944
SIGMA2 = 3.8
OVERDISPERSION = 3.0
ALPHA1 = 78_771_346 / K_Z
ALPHA4 = 18.55

# country: (first death, alpha2, alpha3, lat, long)
COUNTRIES = {
    "Belgium": (dt.date(2020, 3, 10), 1.619, 0.073, 50.8333, 4.469936),
    "Italy": (dt.date(2020, 2, 20), 1.518, 0.061, 41.8719, 12.5674),
    "United Kingdom": (dt.date(2020, 3, 4), 1.501, 0.059, 55.3781, -3.436),
    "US": (dt.date(2020, 2, 27), 1.414, 0.047, 40.0, -100.0),
    "Brazil": (dt.date(2020, 3, 17), 1.436, 0.031, -14.235, -51.9253),
    "Mexico": (dt.date(2020, 3, 20), 1.429, 0.022, 23.6345, -102.5528),
    "Peru": (dt.date(2020, 3, 20), 1.572, 0.028, -9.19, -75.0152),
    "Chile": (dt.date(2020, 3, 21), 1.484, 0.017, -35.6751, -71.543),
    "Colombia": (dt.date(2020, 3, 17), 1.561, 0.017, 4.5709, -74.2973),
}

# %%
rng = np.random.default_rng(20200624)
dates = [START + dt.timedelta(days=k) for k in range(((END - START).days) + 1)]
header = ["Province/State", "Country/Region", "Lat", "Long"] + [
    f"{d.month}/{d.day}/{d.strftime('%y')}" for d in dates]


def simulate(first, a2, a3):
    n = (END - first).days + 1
    t = np.arange(n, dtype=float)
    p = CurveParams(ALPHA1, a2, a3, ALPHA4)
    beta = np.log([p.alpha1, 1.0, 1.0, p.alpha4])
    b = np.log([p.alpha2, p.alpha3])
    mean = eta(t, beta, b)
    sd = OVERDISPERSION * np.sqrt(mean.max() * K_Z) / K_Z
    u = SIGMA2 / sd ** 2
    y = mean + rng.standard_normal(n) * np.sqrt(SIGMA2 / u)
    z = np.maximum(np.rint(y * K_Z), 0).astype(int)
    z[0] = max(z[0], 1)
    lead = (first - START).days
    return np.concatenate([np.zeros(lead, dtype=int), np.cumsum(z)])


rows = []
for name, (first, a2, a3, lat, lon) in COUNTRIES.items():
    rows.append(["", name, lat, lon] + simulate(first, a2, a3).tolist())

# a small overseas territory, summed into its country on aggregation
bermuda = np.zeros(len(dates), dtype=int)
bermuda[dates.index(dt.date(2020, 4, 10)):] = 1
bermuda[dates.index(dt.date(2020, 4, 20)):] = 5
bermuda[dates.index(dt.date(2020, 5, 15)):] = 9
rows.append(["Bermuda", "United Kingdom", 32.3078, -64.7505] + bermuda.tolist())

iceland = np.zeros(len(dates), dtype=int)
iceland[dates.index(dt.date(2020, 3, 15)):] = np.minimum(
    np.arange(len(dates) - dates.index(dt.date(2020, 3, 15))) // 5 + 1, 10)
rows.append(["", "Iceland", 64.9631, -19.0208] + iceland.tolist())
rows.append(["", "Holy See", 41.9029, 12.4534] + [0] * len(dates))

# %%
OUT.mkdir(parents=True, exist_ok=True)
text = ",".join(header) + "\n" + "".join(",".join(str(v) for v in r) + "\n" for r in rows)
(OUT / NAME).write_text(text)
digest = hashlib.sha256(text.encode()).hexdigest()
(OUT / (NAME + ".sha256")).write_text(f"{digest}  {NAME}\n")
print(f"wrote {OUT / NAME} ({len(rows)} rows, sha256 {digest[:12]}...)")
