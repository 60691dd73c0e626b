import numpy as np
import pytest


def hmd_text(years=(1950, 2005), ages=(0, 15), seed=0) -> str:
    """Synthetic Mx 1x1 file: a declining log-mortality surface per gender."""
    rng = np.random.default_rng(seed)
    y_lo, y_hi = years
    a_lo, a_hi = ages
    age_axis = np.arange(a_lo, a_hi + 1)
    year_axis = np.arange(y_lo, y_hi + 1)
    n = len(age_axis)
    base = -6.0 + 4.0 * (age_axis / max(a_hi, 1)) ** 2  # level rises with age
    slope = 0.4 + 0.6 * rng.uniform(size=n)  # positive improvement loadings
    trend = -0.022 * (year_axis - y_lo)
    lines = ["Synthetic, Death rates (period 1x1)", ""]
    lines.append("  Year          Age             Female            Male           Total")
    for t, year in enumerate(year_axis):
        for i, age in enumerate(age_axis):
            log_f = base[i] + slope[i] * trend[t] + 0.02 * rng.standard_normal()
            log_m = log_f + 0.25 + 0.05 * rng.standard_normal()
            f = float(np.exp(log_f))
            m = float(np.exp(log_m))
            tot = 0.5 * (f + m)
            age_token = f"{age}+" if age == 110 else str(age)
            lines.append(f"  {year}    {age_token:>4}    {f:.6f}    {m:.6f}    {tot:.6f}")
    return "\n".join(lines) + "\n"


@pytest.fixture(scope="session")
def hmd_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("hmd") / "Mx_1x1.txt"
    path.write_text(hmd_text())
    return path
