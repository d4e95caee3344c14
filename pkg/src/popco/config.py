"""Flat ``key = value`` configuration files.

One file holds every TrainingConfig and ModelConfig field (``problem`` is
shared). Values are resolved in increasing precedence: built-in desk defaults
for the problem, then the config file, then command-line overrides.
"""

from dataclasses import asdict, fields

from .errors import InvalidArgument
from .model import ModelConfig
from .training import TrainingConfig

# Small settings that train in minutes on one CPU core.
DESK_DEFAULTS = {
    "tsp": {"n": 10, "num_starts": 10, "population": 4, "learning_rate": 2e-3},
    "cvrp": {"n": 10, "num_starts": 10, "population": 4, "learning_rate": 1e-3},
    "kp": {"n": 20, "num_starts": 20, "population": 4, "learning_rate": 1e-3, "capacity": 5.0},
    "toy": {"n": 3, "num_starts": 8, "population": 2, "learning_rate": 1e-3,
            "phase1_steps": 2000, "phase2_steps": 500, "phase3_steps": 2000},
}


def _types():
    t = {f.name: f.type for f in fields(TrainingConfig)}
    t.update({f.name: f.type for f in fields(ModelConfig)})
    return {k: {"int": int, "float": float, "str": str}.get(v, v) if isinstance(v, str) else v
            for k, v in t.items()}


FIELD_TYPES = _types()


def _coerce(key, value):
    if key not in FIELD_TYPES:
        raise InvalidArgument(f"unknown config key {key!r}")
    typ = FIELD_TYPES[key]
    if isinstance(value, typ) and not isinstance(value, bool):
        return value
    try:
        if typ is int:
            f = float(value)
            if f != int(f):
                raise ValueError
            return int(f)
        return typ(value)
    except (TypeError, ValueError):
        raise InvalidArgument(f"{key}: cannot read {value!r} as {typ.__name__}") from None


def parse_config(text, source="<config>"):
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidArgument(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise InvalidArgument(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = _coerce(key, value)
    return out


def load_config(path):
    with open(path) as f:
        return parse_config(f.read(), str(path))


def resolve(file_values=None, overrides=None):
    """Merge defaults, file values and overrides into (TrainingConfig, ModelConfig)."""
    file_values = dict(file_values or {})
    overrides = {k: _coerce(k, v) for k, v in (overrides or {}).items() if v is not None}
    problem = overrides.get("problem", file_values.get("problem", "tsp"))
    if problem not in DESK_DEFAULTS:
        raise InvalidArgument(f"unknown problem {problem!r}")
    values = {"problem": problem, **DESK_DEFAULTS[problem], **file_values, **overrides}
    t_names = {f.name for f in fields(TrainingConfig)}
    m_names = {f.name for f in fields(ModelConfig)}
    tcfg = TrainingConfig(**{k: v for k, v in values.items() if k in t_names})
    mcfg = ModelConfig(**{k: v for k, v in values.items() if k in m_names})
    return tcfg, mcfg


def snapshot(tcfg, mcfg):
    d = asdict(tcfg)
    d.update(asdict(mcfg))
    return d


def dump_config(tcfg, mcfg):
    return "".join(f"{k} = {v}\n" for k, v in snapshot(tcfg, mcfg).items())
