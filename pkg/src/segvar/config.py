"""Experiment configuration: a small TOML-style reader, seed derivation,
and the provenance hash stamped into every report.

The config file is a key-value document with optional [section] headers:
strings in double quotes, integers, floats, true/false, and flat lists.
Sections map onto the stage configs (synth, clahe, augment, train); all
stage seeds derive from the single top-level seed.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .augment import AugmentConfig
from .errors import ConfigError
from .learner import TrainConfig
from .preprocess import ClaheParams
from .synthgen import SynthConfig

ALL_KINDS = ("srsn-tumor", "srsn-rectum", "mrsn", "mrsn-aug")


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = ""
    jobs: int = 1
    kinds: tuple = ALL_KINDS
    biasvar_kinds: tuple = ("srsn-tumor", "mrsn", "mrsn-aug")
    test_frac: float = 0.1
    n_training_sets: int = 9
    group_by_patient: bool = True
    eval_size: int = 64
    eval_kfold: int = 3
    render_samples: int = 2
    render_margin: int = 6
    render_alpha: float = 0.5
    synth: SynthConfig = field(default_factory=SynthConfig)
    clahe: ClaheParams = field(default_factory=lambda: ClaheParams(4, 4, 2.0))
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        for kind in tuple(self.kinds) + tuple(self.biasvar_kinds):
            if kind not in ALL_KINDS:
                raise ConfigError(f"unknown model kind {kind!r}")
        if self.n_training_sets < 3 or self.n_training_sets % 2 == 0:
            raise ConfigError("n_training_sets must be odd and >= 3")


# ---------------------------------------------------------------------------
# TOML-subset parsing
# ---------------------------------------------------------------------------


def _strip_comment(line):
    in_str = False
    for i, ch in enumerate(line):
        if ch == '"':
            in_str = not in_str
        elif ch == "#" and not in_str:
            return line[:i]
    return line


def _parse_value(s, lineno):
    if len(s) >= 2 and s.startswith('"') and s.endswith('"'):
        return s[1:-1]
    if s == "true":
        return True
    if s == "false":
        return False
    if s.startswith("[") and s.endswith("]"):
        inner = s[1:-1].strip()
        if not inner:
            return []
        return [_parse_value(p.strip(), lineno) for p in inner.split(",")]
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        raise ConfigError(f"line {lineno}: cannot parse value {s!r}") from None


def parse_config_text(text):
    """Parse the documented TOML subset into {key: value, section: {..}}."""
    root = {}
    section = root
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"line {lineno}: unterminated section header")
            name = line[1:-1].strip()
            if not name:
                raise ConfigError(f"line {lineno}: empty section name")
            section = root.setdefault(name, {})
            if not isinstance(section, dict):
                raise ConfigError(f"line {lineno}: section clashes with key {name!r}")
            continue
        key, eq, val = line.partition("=")
        if not eq:
            raise ConfigError(f"line {lineno}: expected key = value")
        section[key.strip()] = _parse_value(val.strip(), lineno)
    return root


_SECTION_TYPES = {
    "synth": SynthConfig,
    "clahe": ClaheParams,
    "augment": AugmentConfig,
    "train": TrainConfig,
}


def _build(cls, values, where):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {unknown}")
    coerced = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    try:
        return cls(**coerced)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad [{where}] config: {exc}") from exc


def experiment_from_dict(doc):
    top = {k: v for k, v in doc.items() if not isinstance(v, dict)}
    sections = {k: v for k, v in doc.items() if isinstance(v, dict)}
    unknown = sorted(set(sections) - set(_SECTION_TYPES))
    if unknown:
        raise ConfigError(f"unknown section(s): {unknown}")
    kwargs = dict(top)
    for name, cls in _SECTION_TYPES.items():
        if name in sections:
            kwargs[name] = _build(cls, sections[name], name)
    return _build(ExperimentConfig, kwargs, "top level")


def load_experiment_config(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return experiment_from_dict(parse_config_text(path.read_text()))


# ---------------------------------------------------------------------------
# Seeds and provenance
# ---------------------------------------------------------------------------


def derive_seed(root_seed, label):
    """Stable 63-bit child seed for a stage or model, from the root seed."""
    digest = hashlib.sha256(f"{root_seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "big") & (2**63 - 1)


def config_hash(cfg: ExperimentConfig):
    """Short provenance hash over the scientific parameters and seed.

    out_dir and jobs are excluded: neither may influence results.
    """
    d = dataclasses.asdict(cfg)
    d.pop("out_dir", None)
    d.pop("jobs", None)
    canon = json.dumps(d, sort_keys=True, default=list)
    return hashlib.sha256(canon.encode()).hexdigest()[:12]
