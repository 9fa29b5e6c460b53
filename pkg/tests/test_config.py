import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from krflab.config import build_model, load_config_file, parse_expression, read_config
from krflab.errors import ConfigError

BASE_INI = """
[model]
n = 2
kappa = 1
points = 16, 16
a0_11 = 1 + 0.12*cos(y1)
a0_22 = 1/pi
achi_11 = (1 + 0.2*cos(y1))/(2*pi)
f_mu = (1 + 0.25*cos(y1))/(4*pi*pi)
phi0 = 0.2*cos(y1) + 0.1*cos(y2)
"""


def _ini(replacements=(), extra=""):
    text = BASE_INI
    for old, new in replacements:
        assert old in text
        text = text.replace(old, new)
    return text + extra


def test_parse_expression_arithmetic():
    e = parse_expression("2*3 + 4/2 - 1", allowed_variables=("pi",))
    assert e({}) == pytest.approx(7.0)
    e = parse_expression("-cos(0) + +2", allowed_variables=("pi",))
    assert e({}) == pytest.approx(1.0)
    e = parse_expression("exp(-(1 - cos(y1)))", allowed_variables=("y1", "pi"))
    assert e({"y1": 0.0}) == pytest.approx(1.0)
    assert e({"y1": math.pi}) == pytest.approx(math.exp(-2.0))
    e = parse_expression("sin(pi/2) * (2 + 3)", allowed_variables=("pi",))
    assert e({}) == pytest.approx(5.0)


def test_parse_expression_vectorizes():
    e = parse_expression("cos(y1) + 2", allowed_variables=("y1", "pi"))
    y = np.linspace(0, 1, 5)
    assert np.allclose(e({"y1": y}), np.cos(y) + 2)


@settings(max_examples=50, deadline=None)
@given(
    a=st.floats(-5, 5, allow_nan=False),
    b=st.floats(0.1, 5, allow_nan=False),
)
def test_parse_expression_matches_python(a, b):
    e = parse_expression("a*b + cos(a) - a/b", allowed_variables=("a", "b", "pi"))
    assert e({"a": a, "b": b}) == pytest.approx(a * b + math.cos(a) - a / b)


@pytest.mark.parametrize("bad,fragment", [
    ("2 ** 3", "position 3"),
    ("cos(y1", "expected ')'"),
    ("1 + ", "position 4"),
    ("foo(2)", "foo"),
    ("y3 + 1", "y3"),
    ("(1 + 2", "expected ')'"),
    ("1 2", "trailing"),
])
def test_parse_expression_error_messages(bad, fragment):
    with pytest.raises(ConfigError) as err:
        parse_expression(bad, allowed_variables=("y1", "y2", "pi"))
    assert fragment in str(err.value)


def test_read_config_round_trip_and_digest():
    cfg = read_config(BASE_INI)
    assert cfg.model["n"] == 2
    assert cfg.model["points"] == (16, 16)
    assert cfg.flow["t_end"] == 12.0
    assert cfg.digest == read_config(BASE_INI).digest
    other = read_config(_ini([("0.12", "0.13")]))
    assert other.digest != cfg.digest


def test_env_overrides_change_digest_and_values():
    env = {"KRF_FLOW_T_END": "3.5", "KRF_OUT": "custom", "KRF_SEED": "9"}
    cfg = read_config(BASE_INI, environ=env)
    assert cfg.flow["t_end"] == 3.5
    assert cfg.output["out_dir"] == "custom"
    assert cfg.verify["stress_seed"] == 9
    assert cfg.digest != read_config(BASE_INI).digest
    assert any("t_end" in o for o in cfg.overrides)
    with pytest.raises(ConfigError):
        read_config(BASE_INI, environ={"KRF_NOSUCH_KEY": "1"})


@pytest.mark.parametrize("replacements,fragment", [
    ((("[model]", "[model]\nunknown_thing = 1"),), "unknown_thing"),
    ((("kappa = 1", "kappa = 5"),), "kappa"),
    ((("points = 16, 16", "points = 16"),), "points"),
    ((("a0_22 = 1/pi", ""),), "a0_22"),
    ((("achi_11", "achi_12"),), "achi"),
    ((("n = 2", "n = 0"),), "n"),
    ((("phi0 = 0.2*cos(y1) + 0.1*cos(y2)", "phi0 = 0.2*cos(y9)"),), "y9"),
])
def test_config_validation_errors(replacements, fragment):
    with pytest.raises(ConfigError) as err:
        read_config(_ini(replacements))
    assert fragment in str(err.value)


def test_unknown_section_rejected():
    with pytest.raises(ConfigError, match="mystery"):
        read_config(BASE_INI + "\n[mystery]\nx = 1\n")


def test_config_whitelists():
    with pytest.raises(ConfigError, match="stencil"):
        read_config(_ini(extra="\n[flow]\nstencil = upwind\n"))
    with pytest.raises(ConfigError, match="method"):
        read_config(_ini(extra="\n[solver]\nmethod = bisection\n"))
    with pytest.raises(ConfigError, match="reaction"):
        read_config(_ini([("phi0 =", "reaction = cubic\nphi0 =")]))


def test_build_model_matches_presets():
    from krflab.presets import acceptance_phi0, acceptance_problem

    built = build_model(read_config(BASE_INI))
    ref = acceptance_problem((16, 16))
    assert np.allclose(built.problem.a0.matrices, ref.a0.matrices)
    assert np.allclose(built.problem.f_mu.values, ref.f_mu.values)
    assert built.problem.fiber_invariant
    assert np.allclose(built.phi0.values,
                       acceptance_phi0(built.problem.grid).values)
    assert built.rho is None and built.divisor_profile is None


def test_build_model_optional_fields():
    # extra keys appended inside [model], which BASE_INI leaves open
    text = BASE_INI + (
        "rho = 0.05*cos(y1)\n"
        "divisor_profile = exp(-0.15*(1 - cos(y1)))\n"
        "reaction = affine\n"
        "reaction_slope = 0.5\n"
        "reaction_offset = 0.1*exp(-t)\n"
    )
    built = build_model(read_config(text))
    assert built.rho is not None
    assert built.divisor_profile is not None
    assert built.divisor_profile.ndim == 1
    r = built.problem.reaction
    assert r.kind == "affine" and r.slope == 0.5
    assert r.offset_at(1.0) == pytest.approx(0.1 * math.exp(-1.0))


def test_load_config_file(tmp_path):
    path = tmp_path / "model.ini"
    path.write_text(BASE_INI, encoding="utf-8")
    cfg = load_config_file(path)
    assert cfg.model["n"] == 2
    with pytest.raises(ConfigError, match="read"):
        load_config_file(tmp_path / "missing.ini")
