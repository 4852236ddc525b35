import math
import warnings
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dopplerkb.errors import DomainError
from dopplerkb.thermometry import (
    REFERENCE_READING,
    REFERENCE_UNCERTAINTY,
    BridgeReading,
    BridgeUncertainty,
    ValidityWarning,
    monte_carlo_temperature,
    read_bridge_log,
    temperature_contributions,
    temperature_from_bridge,
    temperature_series,
    temperature_uncertainty,
)


def test_reference_temperature():
    t = temperature_from_bridge(REFERENCE_READING)
    assert abs(t - 273.18955) < 0.5e-3
    # direct arithmetic on the same inputs
    expected = 273.16 + 250.7190 * ((2.5519369 * 10.000516 - 68e-6) / 25.517610 - 1)
    np.testing.assert_allclose(t, expected, rtol=1e-15)


def test_bracket_vanishes_at_triple_point():
    b = BridgeReading(ratio=2.5, r_std=10.0, r_tpw=25.0 + 1e-4, c_self=1e-4)
    assert temperature_from_bridge(b) == 273.16


def test_ratio_sensitivity():
    t0 = temperature_from_bridge(REFERENCE_READING)
    t1 = temperature_from_bridge(replace(REFERENCE_READING, ratio=REFERENCE_READING.ratio + 1e-6))
    np.testing.assert_allclose((t1 - t0) * 1e6, 98.0, rtol=0.01)


def test_reference_uncertainty_and_rows():
    u = temperature_uncertainty(REFERENCE_READING, REFERENCE_UNCERTAINTY)
    assert abs(u * 1e3 - 0.30) <= 0.01
    rows = temperature_contributions(REFERENCE_READING, REFERENCE_UNCERTAINTY)
    # table column, quoted to one significant figure (0.05 mK to two)
    assert round(rows["r_std"] * 1e3, 1) == 0.2
    assert round(rows["r_tpw"] * 1e3, 1) == 0.2
    assert round(rows["ratio"] * 1e3, 1) == 0.1
    assert round(rows["c_self"] * 1e3, 2) == 0.05
    np.testing.assert_allclose(rows["r_tpw"], 250.7190 * 20e-6 / 25.517610, rtol=1e-15)
    np.testing.assert_allclose(rows["r_tpw"] * 1e3, 0.197, atol=5e-4)


def test_zero_uncertainty():
    assert temperature_uncertainty(REFERENCE_READING, BridgeUncertainty()) == 0.0


def test_single_row_equals_its_contribution():
    only = BridgeUncertainty(u_rtpw=20e-6)
    np.testing.assert_allclose(temperature_uncertainty(REFERENCE_READING, only),
                               temperature_contributions(REFERENCE_READING, REFERENCE_UNCERTAINTY)["r_tpw"], rtol=1e-15)


def test_monte_carlo_agrees():
    mean, std = monte_carlo_temperature(REFERENCE_READING, REFERENCE_UNCERTAINTY, n=1_000_000, seed=1)
    u = temperature_uncertainty(REFERENCE_READING, REFERENCE_UNCERTAINTY)
    np.testing.assert_allclose(std, u, rtol=0.02)
    assert abs(mean - temperature_from_bridge(REFERENCE_READING)) < 5 * u / 1000


def test_warning_outside_window():
    far = replace(REFERENCE_READING, ratio=2.6)
    with pytest.warns(ValidityWarning):
        t = temperature_from_bridge(far)
    assert t > 273.26
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        temperature_from_bridge(REFERENCE_READING)


def test_invalid_readings():
    with pytest.raises(DomainError):
        BridgeReading(2.5, 10.0, 0.0)
    with pytest.raises(DomainError):
        BridgeReading(2.5, -10.0, 25.0)
    with pytest.raises(DomainError):
        BridgeReading(2.5, 10.0, 25.0, s=0.0)
    with pytest.raises(DomainError):
        BridgeUncertainty(u_ratio=-1.0)


def test_bridge_log_to_series():
    text = ("timestamp,ratio,r_std,r_tpw,c_self\n"
            "2012-03-01T10:00:00,2.5519369,10.000516,25.517610,-68e-6\n"
            "2012-03-01T10:01:00,2.5519370,10.000516,25.517610,-68e-6\n")
    out = temperature_series(text).splitlines()
    assert out[0] == "timestamp,temperature_k"
    assert out[1].startswith("2012-03-01T10:00:00,273.18955")
    t2 = float(out[2].split(",")[1])
    np.testing.assert_allclose(t2 - float(out[1].split(",")[1]), 98.3e-7, rtol=0.01)
    stamps, readings = read_bridge_log(text)
    assert len(readings) == 2 and stamps[1] == "2012-03-01T10:01:00"
    with pytest.raises(DomainError):
        temperature_series("time,ratio\n1,2\n")


unc = st.floats(0.0, 1e-4)


@settings(max_examples=200, deadline=None)
@given(a=unc, b=unc, c=unc, d=unc, field=st.sampled_from(["u_ratio", "u_rstd", "u_rtpw", "u_cself"]),
       bump=st.floats(0.0, 1e-4))
def test_uncertainty_monotone(a, b, c, d, field, bump):
    u = BridgeUncertainty(a, b, c, d)
    more = replace(u, **{field: getattr(u, field) + bump})
    assert temperature_uncertainty(REFERENCE_READING, more) >= temperature_uncertainty(REFERENCE_READING, u)
    assert math.isfinite(temperature_uncertainty(REFERENCE_READING, more))
