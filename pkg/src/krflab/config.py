"""Config files: a small expression language plus schema validation.

Configs are INI files with six sections (model, flow, solver, barriers,
verify, output). Field values that describe functions on the torus are
written in a tiny arithmetic language over the coordinates y1..yn (or t for
reaction offsets): +, -, *, /, parentheses, cos, sin, exp, and pi. The
parser is a plain recursive descent with positions in its error messages;
nothing is ever passed to eval.

Unknown sections or keys are rejected by name: a silently ignored typo in,
say, 'epsilon' would change which theorem the run is evidence for.
Environment variables KRF_<SECTION>_<KEY> override file values before
validation (plus the shortcuts KRF_OUT and KRF_SEED).
"""

from __future__ import annotations

import configparser
import io
import os
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .fieldio import config_hash
from .geometry import ReactionSpec, build_product_problem
from .grid import ScalarField, build_torus_grid

__all__ = [
    "Expression",
    "parse_expression",
    "Config",
    "read_config",
    "load_config_file",
    "build_model",
    "BuiltModel",
]

_FUNCTIONS = ("cos", "sin", "exp")

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>\d+(?:\.\d*)?(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/()]))"
)


@dataclass(frozen=True)
class Expression:
    """Parsed arithmetic expression; evaluate with a variable environment."""

    source: str
    variables: frozenset
    _fn: object

    def __call__(self, env: dict):
        return self._fn(env)


def _tokenize(text: str):
    pos = 0
    tokens = []
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            stripped = text[pos:].lstrip()
            if not stripped:
                break
            bad_at = len(text) - len(stripped)
            raise ConfigError(
                f"unexpected character {text[bad_at]!r} at position {bad_at} "
                f"in expression {text!r}"
            )
        if m.group("num") is not None:
            tokens.append(("num", float(m.group("num")), m.start("num")))
        elif m.group("name") is not None:
            tokens.append(("name", m.group("name"), m.start("name")))
        else:
            tokens.append(("op", m.group("op"), m.start("op")))
        pos = m.end()
    tokens.append(("end", None, len(text)))
    return tokens


def parse_expression(text: str, allowed_variables=("pi",)) -> Expression:
    """Recursive-descent parse of the arithmetic sublanguage.

    allowed_variables lists the bare names the expression may reference
    (pi is always sensible to include). Unknown names, dangling operators,
    and unbalanced parentheses raise ConfigError with the offending
    position.
    """
    tokens = _tokenize(text)
    allowed = frozenset(allowed_variables)
    used: set = set()
    index = [0]

    def peek():
        return tokens[index[0]]

    def advance():
        tok = tokens[index[0]]
        index[0] += 1
        return tok

    def expect_op(op: str):
        kind, val, pos = peek()
        if kind != "op" or val != op:
            raise ConfigError(
                f"expected {op!r} at position {pos} in expression {text!r}"
            )
        advance()

    def parse_atom():
        kind, val, pos = advance()
        if kind == "num":
            return lambda env, v=val: v
        if kind == "name":
            if val in _FUNCTIONS:
                expect_op("(")
                inner = parse_sum()
                expect_op(")")
                fn = getattr(np, val)
                return lambda env, f=fn, g=inner: f(g(env))
            if val == "pi":
                return lambda env: np.pi
            if val in allowed:
                used.add(val)
                return lambda env, name=val: env[name]
            raise ConfigError(
                f"unknown name {val!r} at position {pos} in expression "
                f"{text!r}; allowed: {', '.join(sorted(allowed | set(_FUNCTIONS)))}"
            )
        if kind == "op" and val == "(":
            inner = parse_sum()
            expect_op(")")
            return inner
        if kind == "op" and val == "-":
            inner = parse_atom()
            return lambda env, g=inner: -g(env)
        if kind == "op" and val == "+":
            return parse_atom()
        raise ConfigError(
            f"unexpected token at position {pos} in expression {text!r}"
        )

    def parse_term():
        left = parse_atom()
        while True:
            kind, val, _ = peek()
            if kind == "op" and val in ("*", "/"):
                advance()
                right = parse_atom()
                if val == "*":
                    left = lambda env, a=left, b=right: a(env) * b(env)
                else:
                    left = lambda env, a=left, b=right: a(env) / b(env)
            else:
                return left

    def parse_sum():
        left = parse_term()
        while True:
            kind, val, _ = peek()
            if kind == "op" and val in ("+", "-"):
                advance()
                right = parse_term()
                if val == "+":
                    left = lambda env, a=left, b=right: a(env) + b(env)
                else:
                    left = lambda env, a=left, b=right: a(env) - b(env)
            else:
                return left

    fn = parse_sum()
    kind, _, pos = peek()
    if kind != "end":
        raise ConfigError(
            f"trailing input at position {pos} in expression {text!r}"
        )
    return Expression(source=text, variables=frozenset(used), _fn=fn)


# schema value kinds: int, float, bool, str, ints, floats, expr
_SCHEMA = {
    "model": {
        "n": ("int", None),
        "kappa": ("int", None),
        "points": ("ints", None),
        "f_mu": ("expr", None),
        "phi0": ("expr", None),
        "rho": ("expr", ""),
        "divisor_profile": ("expr", ""),
        "reaction": ("str", "identity"),
        "reaction_slope": ("float", 1.0),
        "reaction_offset": ("expr", "0"),
        "normalize": ("bool", True),
    },
    "flow": {
        "t_end": ("float", 12.0),
        "dt_max": ("float", 0.05),
        "dt0": ("float", 0.0),
        "dt_min": ("float", 1e-8),
        "snapshot_every": ("float", 0.0),
        "snapshot_times": ("floats", ()),
        "stationary_tol": ("float", 0.0),
        "stencil": ("str", "central"),
    },
    "solver": {
        "method": ("str", "damped_newton"),
        "tol": ("float", 1e-10),
        "max_iter": ("int", 60),
    },
    "barriers": {
        "epsilon": ("floats", (0.2, 0.1, 0.05)),
        "amplification": ("float", 1.0),
        "use_semiflat_rho": ("bool", False),
    },
    "verify": {
        "sandwich_tol": ("float", 0.0),
        "classify_times": ("floats", ()),
        "rate_window": ("floats", (4.0, 10.0)),
        "stress_pairs": ("int", 50),
        "stress_seed": ("int", 0),
        "stress_t_end": ("float", 0.4),
    },
    "output": {
        "out_dir": ("str", "out"),
        "save_fields": ("bool", True),
        "figures": ("bool", True),
    },
}

_MATRIX_KEY_RE = re.compile(r"^(a0|achi)_(\d)(\d)$")
_REQUIRED = {("model", "n"), ("model", "kappa"), ("model", "points"),
             ("model", "f_mu"), ("model", "phi0")}


@dataclass
class Config:
    """Validated configuration: one dict per section plus the text digest."""

    model: dict
    flow: dict
    solver: dict
    barriers: dict
    verify: dict
    output: dict
    matrix_entries: dict
    digest: str
    overrides: tuple = ()

    def section(self, name: str) -> dict:
        return getattr(self, name)


def _parse_bool(raw: str, where: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ConfigError(f"{where}: expected a boolean, got {raw!r}")


def _parse_value(kind: str, raw: str, where: str):
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            return _parse_bool(raw, where)
        if kind == "str":
            return raw
        if kind == "ints":
            return tuple(int(p.strip()) for p in raw.split(",") if p.strip())
        if kind == "floats":
            return tuple(float(p.strip()) for p in raw.split(",") if p.strip())
        if kind == "expr":
            return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    raise ConfigError(f"internal schema kind {kind!r}")


def _apply_env_overrides(raw: dict, environ) -> list:
    applied = []
    shortcuts = {"KRF_OUT": ("output", "out_dir"),
                 "KRF_SEED": ("verify", "stress_seed")}
    for name, value in sorted(environ.items()):
        if not name.startswith("KRF_"):
            continue
        if name == "KRF_THREADS":
            continue  # consumed by the CLI before numpy is imported
        if name in shortcuts:
            section, key = shortcuts[name]
        else:
            parts = name[4:].lower().split("_", 1)
            if len(parts) != 2 or parts[0] not in _SCHEMA:
                raise ConfigError(
                    f"environment override {name} does not name a config "
                    f"section; expected KRF_<SECTION>_<KEY>"
                )
            section, key = parts
        raw.setdefault(section, {})[key] = value
        applied.append(f"{section}.{key}={value}")
    return applied


def read_config(text: str, environ=None) -> Config:
    """Parse and validate config text; unknown names are fatal."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_file(io.StringIO(text))
    except configparser.Error as exc:
        raise ConfigError(f"config syntax: {exc}") from None

    raw: dict = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(
                f"unknown config section [{section}]; expected one of "
                f"{', '.join(sorted(_SCHEMA))}"
            )
        raw[section] = dict(parser.items(section))

    overrides = _apply_env_overrides(raw, environ if environ is not None else os.environ)

    sections = {}
    matrix_entries = {}
    for section, schema in _SCHEMA.items():
        given = raw.get(section, {})
        values = {}
        for key, raw_val in given.items():
            if section == "model":
                m = _MATRIX_KEY_RE.match(key)
                if m:
                    matrix_entries[(m.group(1), int(m.group(2)), int(m.group(3)))] = raw_val
                    continue
            if key not in schema:
                raise ConfigError(
                    f"unknown key {key!r} in section [{section}]; expected "
                    f"one of {', '.join(sorted(schema))}"
                )
            kind, _ = schema[key]
            values[key] = _parse_value(kind, raw_val, f"[{section}] {key}")
        for key, (kind, default) in schema.items():
            if key not in values:
                if (section, key) in _REQUIRED:
                    raise ConfigError(f"missing required key {key!r} in section [{section}]")
                values[key] = default
        sections[section] = values

    cfg = Config(
        model=sections["model"],
        flow=sections["flow"],
        solver=sections["solver"],
        barriers=sections["barriers"],
        verify=sections["verify"],
        output=sections["output"],
        matrix_entries=matrix_entries,
        digest=config_hash(text + "\n".join(overrides)),
        overrides=tuple(overrides),
    )
    _validate(cfg)
    return cfg


def load_config_file(path, environ=None) -> Config:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    return read_config(text, environ=environ)


def _validate(cfg: Config) -> None:
    m = cfg.model
    n, k = m["n"], m["kappa"]
    if not 1 <= n <= 8:
        raise ConfigError(f"n must be between 1 and 8, got {n}")
    if not 1 <= k <= n:
        raise ConfigError(f"kappa must be between 1 and n = {n}, got {k}")
    if len(m["points"]) != n:
        raise ConfigError(
            f"points must list {n} entries (one per dimension), got "
            f"{len(m['points'])}"
        )
    if m["reaction"] not in ("identity", "affine"):
        raise ConfigError(f"reaction must be identity or affine, got {m['reaction']!r}")
    if cfg.flow["stencil"] not in ("central", "wide"):
        raise ConfigError(f"stencil must be central or wide, got {cfg.flow['stencil']!r}")
    if cfg.solver["method"] not in ("damped_newton", "pseudo_time"):
        raise ConfigError(
            f"solver method must be damped_newton or pseudo_time, got "
            f"{cfg.solver['method']!r}"
        )
    coords = tuple(f"y{i + 1}" for i in range(n))
    for key in ("f_mu", "phi0"):
        parse_expression(m[key], coords + ("pi",))
    for key in ("rho", "divisor_profile"):
        if m[key]:
            parse_expression(m[key], coords + ("pi",))
    parse_expression(m["reaction_offset"], ("t", "pi"))
    for (name, i, j), text in cfg.matrix_entries.items():
        limit = n if name == "a0" else k
        if not (1 <= i <= j <= limit):
            raise ConfigError(
                f"matrix entry {name}_{i}{j} out of range: indices must "
                f"satisfy 1 <= i <= j <= {limit}"
            )
        parse_expression(text, coords + ("pi",))
    missing = [f"a0_{d}{d}" for d in range(1, n + 1)
               if ("a0", d, d) not in cfg.matrix_entries]
    missing += [f"achi_{d}{d}" for d in range(1, k + 1)
                if ("achi", d, d) not in cfg.matrix_entries]
    if missing:
        raise ConfigError(
            f"missing matrix diagonal entries in [model]: {', '.join(missing)}"
        )


@dataclass
class BuiltModel:
    """Everything the CLI needs, assembled from a validated config."""

    problem: object
    phi0: ScalarField
    rho: ScalarField | None
    divisor_profile: np.ndarray | None
    config: Config


def _symmetric_field(cfg: Config, name: str, dim: int, grid, env) -> np.ndarray:
    mats = np.zeros(grid.shape + (dim, dim))
    names = tuple(env) + ("pi",)
    for (entry, i, j), text in cfg.matrix_entries.items():
        if entry != name:
            continue
        expr = parse_expression(text, names)
        vals = np.broadcast_to(np.asarray(expr(env), dtype=float), grid.shape)
        mats[..., i - 1, j - 1] = vals
        if i != j:
            mats[..., j - 1, i - 1] = vals
    return mats


def build_model(cfg: Config) -> BuiltModel:
    """Instantiate the grid, metric data, and problem from a config."""
    m = cfg.model
    n, k = m["n"], m["kappa"]
    grid = build_torus_grid(n, m["points"], kappa=k)
    coords = grid.coordinate_fields()
    env = {f"y{i + 1}": coords[i] for i in range(n)}

    a0 = _symmetric_field(cfg, "a0", n, grid, env)

    base = grid.base_grid()
    base_coords = base.coordinate_fields()
    base_env = {f"y{i + 1}": base_coords[i] for i in range(k)}
    achi = np.zeros(base.shape + (k, k))
    for (entry, i, j), text in cfg.matrix_entries.items():
        if entry != "achi":
            continue
        expr = parse_expression(text, tuple(f"y{d + 1}" for d in range(k)) + ("pi",))
        vals = np.broadcast_to(np.asarray(expr(base_env), dtype=float), base.shape)
        achi[..., i - 1, j - 1] = vals
        if i != j:
            achi[..., j - 1, i - 1] = vals

    names = tuple(f"y{i + 1}" for i in range(n)) + ("pi",)

    def field_on_grid(text: str) -> np.ndarray:
        expr = parse_expression(text, names)
        return np.broadcast_to(
            np.asarray(expr(env), dtype=float), grid.shape
        ).astype(float)

    f_vals = field_on_grid(m["f_mu"])
    phi0_vals = field_on_grid(m["phi0"])

    if m["reaction"] == "identity":
        reaction = ReactionSpec()
    else:
        offset_expr = parse_expression(m["reaction_offset"], ("t", "pi"))
        reaction = ReactionSpec(
            kind="affine",
            slope=m["reaction_slope"],
            offset=lambda t, e=offset_expr: float(e({"t": t})),
        )

    problem = build_product_problem(
        grid, a0, achi, f_vals, reaction=reaction, normalize=m["normalize"]
    )

    rho = None
    if m["rho"]:
        rho = ScalarField(grid, field_on_grid(m["rho"]))

    divisor_profile = None
    if m["divisor_profile"]:
        base_names = tuple(f"y{i + 1}" for i in range(k)) + ("pi",)
        expr = parse_expression(m["divisor_profile"], base_names)
        divisor_profile = np.broadcast_to(
            np.asarray(expr(base_env), dtype=float), base.shape
        ).astype(float)

    return BuiltModel(
        problem=problem,
        phi0=ScalarField(grid, phi0_vals),
        rho=rho,
        divisor_profile=divisor_profile,
        config=cfg,
    )
