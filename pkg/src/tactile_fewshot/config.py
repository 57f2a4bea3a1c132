"""Run configuration read from YAML, with bounds checks.

Schema (every key optional; defaults shown)::

    seed: 0                      # master seed
    output: null                 # output directory; falls back to $TACTILE_FEWSHOT_OUT, then ./runs
    dataset:
      path: null                 # .tact or .csv file; when null the synthetic spec is used
      synth:                     # keyword arguments of SynthConfig
        trials_per_class: 60
        perturbed_trials_per_cell: 3
    protocol: closed-set         # closed-set | cross-shape | cross-material | force-speed
    episodes: 500
    episode: {n_way: 5, k_shot: 1, q_query: 15}
    head: {alpha: 10.0, lam: 0.10, steps: 250, lr: 1.5e-3}
    featopt:
      nca: {lambda_nca: null, kernel_width: 1.0, max_iters: 60}
      dscan: {grid: null, episodes_per_D: 200}

Unknown keys are rejected so that typos do not silently fall back to defaults.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import yaml

from .evaluation import EpisodeSpec, EvalConfig
from .featopt import DEFAULT_GRID, DScanConfig, NcaConfig, PretrainConfig
from .head import HeadConfig
from .synth import ConfigError, SynthConfig, config_from_dict

PROTOCOLS = ("closed-set", "cross-shape", "cross-material", "force-speed")
OUTPUT_ENV = "TACTILE_FEWSHOT_OUT"

# the CLI's synthetic default also carries perturbed trials so that the
# force/speed protocol can run without a second dataset
CLI_SYNTH_DEFAULTS = {"trials_per_class": 60, "perturbed_trials_per_cell": 3}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    output: str | None = None
    dataset_path: str | None = None
    synth: dict = field(default_factory=lambda: dict(CLI_SYNTH_DEFAULTS))
    protocol: str = "closed-set"
    episodes: int = 500
    n_way: int = 5
    k_shot: int = 1
    q_query: int = 15
    alpha: float = 10.0
    lam: float = 0.10
    steps: int = 250
    lr: float = 1.5e-3
    lambda_nca: float | None = None
    kernel_width: float = 1.0
    nca_max_iters: int = 60
    dscan_grid: tuple[int, ...] | None = None
    episodes_per_D: int = 200

    def validate(self) -> "RunConfig":
        self._check_types()
        checks = [
            (self.protocol in PROTOCOLS, f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}"),
            (self.episodes >= 1, "episodes must be >= 1"),
            (self.n_way >= 2, "n_way must be >= 2"),
            (self.k_shot >= 1, "k_shot must be >= 1"),
            (self.q_query >= 1, "q_query must be >= 1"),
            (self.alpha > 0, "alpha must be > 0"),
            (self.lam >= 0, "lambda must be >= 0"),
            (self.steps >= 0, "steps must be >= 0"),
            (self.lr > 0, "lr must be > 0"),
            (self.lambda_nca is None or self.lambda_nca >= 0, "lambda_nca must be >= 0"),
            (self.kernel_width > 0, "kernel_width must be > 0"),
            (self.nca_max_iters >= 1, "nca max_iters must be >= 1"),
            (self.episodes_per_D >= 1, "episodes_per_D must be >= 1"),
            (self.dscan_grid is None or (len(self.dscan_grid) > 0 and min(self.dscan_grid) >= 1), "dscan grid entries must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        if self.dataset_path is not None and not Path(self.dataset_path).is_file():
            raise ConfigError(f"dataset file not found: {self.dataset_path}")
        self.synth_config()  # raises on a bad synthetic spec
        return self

    def _check_types(self) -> None:
        ints = ("seed", "episodes", "n_way", "k_shot", "q_query", "steps", "nca_max_iters", "episodes_per_D")
        floats = ("alpha", "lam", "lr", "kernel_width")
        for name in ints:
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int):
                raise ConfigError(f"{name} must be an integer, got {v!r}")
        for name in floats + ("lambda_nca",):
            v = getattr(self, name)
            if v is None and name == "lambda_nca":
                continue
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{name} must be a number, got {v!r}")
        if not isinstance(self.synth, dict):
            raise ConfigError("dataset.synth must be a mapping")

    # -- derived configs ----------------------------------------------------

    def synth_config(self) -> SynthConfig:
        d = dict(self.synth)
        d.setdefault("seed", self.seed)
        try:
            return config_from_dict(d)
        except TypeError as exc:
            raise ConfigError(f"bad synth spec: {exc}") from None

    def episode_spec(self) -> EpisodeSpec:
        return EpisodeSpec(self.n_way, self.k_shot, self.q_query, self.seed)

    def head_config(self) -> HeadConfig:
        return HeadConfig(alpha=self.alpha, lam=self.lam, steps=self.steps, lr=self.lr, seed=self.seed)

    def pretrain_config(self, optimize_features: bool = True) -> PretrainConfig:
        nca = NcaConfig(lambda_nca=self.lambda_nca, kernel_width=self.kernel_width, max_iters=self.nca_max_iters, seed=self.seed)
        grid = DEFAULT_GRID if self.dscan_grid is None else tuple(self.dscan_grid)
        dscan = DScanConfig(grid=grid, episodes_per_D=self.episodes_per_D, alpha=self.alpha, seed=self.seed)
        return PretrainConfig(nca, dscan, optimize_features)

    def eval_config(self) -> EvalConfig:
        return EvalConfig(self.episodes, self.head_config(), self.pretrain_config(), split_seed=self.seed)

    def output_dir(self) -> Path:
        return Path(self.output or os.environ.get(OUTPUT_ENV) or "runs")

    def to_json(self) -> dict:
        d = asdict(self)
        d["dscan_grid"] = None if self.dscan_grid is None else list(self.dscan_grid)
        return d

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON form, excluding the output location."""
        d = self.to_json()
        d.pop("output")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


_TOP_KEYS = {"seed", "output", "dataset", "protocol", "episodes", "episode", "head", "featopt"}
_SECTIONS = {
    "dataset": {"path": "dataset_path", "synth": "synth"},
    "episode": {"n_way": "n_way", "k_shot": "k_shot", "q_query": "q_query"},
    "head": {"alpha": "alpha", "lam": "lam", "lambda": "lam", "steps": "steps", "lr": "lr"},
}
_FEATOPT = {
    "nca": {"lambda_nca": "lambda_nca", "kernel_width": "kernel_width", "max_iters": "nca_max_iters"},
    "dscan": {"grid": "dscan_grid", "episodes_per_D": "episodes_per_D"},
}


def _mapped(section: str, values, table: dict) -> dict:
    if not isinstance(values, dict):
        raise ConfigError(f"{section!r} must be a mapping")
    unknown = set(values) - set(table)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {sorted(unknown)}")
    return {table[k]: v for k, v in values.items()}


def config_from_mapping(doc: dict | None) -> RunConfig:
    doc = doc or {}
    if not isinstance(doc, dict):
        raise ConfigError("config file must contain a mapping")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
    kw: dict = {k: doc[k] for k in ("seed", "output", "protocol", "episodes") if k in doc}
    for name, table in _SECTIONS.items():
        if name in doc:
            kw.update(_mapped(name, doc[name], table))
    if "featopt" in doc:
        fo = _mapped("featopt", doc["featopt"], {"nca": "nca", "dscan": "dscan"})
        for name, table in _FEATOPT.items():
            if name in fo:
                kw.update(_mapped(f"featopt.{name}", fo[name], table))
    if "synth" in kw:
        kw["synth"] = {**CLI_SYNTH_DEFAULTS, **(kw["synth"] or {})}
    if kw.get("dscan_grid") is not None:
        kw["dscan_grid"] = tuple(int(d) for d in kw["dscan_grid"])
    try:
        return RunConfig(**kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | os.PathLike | None) -> RunConfig:
    """Parse a YAML config file; ``None`` gives the defaults. Not yet validated."""
    if path is None:
        return RunConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from None
    return config_from_mapping(doc)


def with_overrides(cfg: RunConfig, **overrides) -> RunConfig:
    """Apply command-line values; ``None`` means "not given"."""
    given = {k: v for k, v in overrides.items() if v is not None}
    return replace(cfg, **given)


__all__ = [
    "PROTOCOLS",
    "OUTPUT_ENV",
    "RunConfig",
    "ConfigError",
    "config_from_mapping",
    "load_config",
    "with_overrides",
]
