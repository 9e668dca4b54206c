"""Strict JSON experiment configuration.

Every section is a dataclass; unknown keys, wrong types and out-of-range
values raise :class:`ConfigError`. ``resolve`` returns a plain dict with
every default filled in, which is what runs write next to their outputs.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .evaluate import Thresholds
from .model import ModelConfig
from .scmgen import ALPHA_RANGE, BETA_RANGE, EQUATIONS, PNL_DISTORTIONS, GenConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class ScmSection:
    ell: int = 4
    adjacency: list | None = None
    equations: list | None = None
    violation_nodes: list = field(default_factory=list)
    pnl: list | None = None
    certify: bool = False
    zero_coeffs: bool = False


@dataclass
class NoiseSection:
    M: int = 50
    per_segment: int = 1000
    alpha_range: list = field(default_factory=lambda: list(ALPHA_RANGE))
    beta_range: list = field(default_factory=lambda: list(BETA_RANGE))


@dataclass
class MixingSection:
    D: int | None = None
    seed: int | None = None
    identity: bool = False


@dataclass
class ModelSection:
    hidden: int = 64
    head_hidden: int = 64
    slope: float = 0.01
    gamma: float = 0.01
    obs_var: float = 0.01
    independent_prior: bool = False
    dense_posterior: bool = False
    standardize: bool = True


@dataclass
class TrainSection:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 256
    epochs: int = 600
    checkpoint_every: int = 0


@dataclass
class EvalSection:
    tau: float = 0.1
    affine_r: float = 0.8
    affine_r2: float = 0.8
    monotone_rho: float = 0.9


@dataclass
class DataSection:
    source: str = "synthetic"  # or "fmri"
    path: str | None = None


_SECTIONS = {
    "scm": ScmSection,
    "noise": NoiseSection,
    "mixing": MixingSection,
    "model": ModelSection,
    "train": TrainSection,
    "eval": EvalSection,
    "data": DataSection,
}


def _type_ok(value, annotation: str) -> bool:
    if value is None:
        return "None" in annotation
    if isinstance(value, bool):
        return annotation.startswith("bool")
    if annotation.startswith("int"):
        return isinstance(value, int)
    if annotation.startswith("float"):
        return isinstance(value, (int, float))
    if annotation.startswith("str"):
        return isinstance(value, str)
    if annotation.startswith("list"):
        return isinstance(value, list)
    return False


def _build(cls, raw, where):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object, got {type(raw).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    for k, v in raw.items():
        if not _type_ok(v, str(known[k].type)):
            raise ConfigError(f"{where}.{k}: expected {known[k].type}, got {v!r}")
    return cls(**raw)


@dataclass
class ExperimentConfig:
    scm: ScmSection = field(default_factory=ScmSection)
    noise: NoiseSection = field(default_factory=NoiseSection)
    mixing: MixingSection = field(default_factory=MixingSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    data: DataSection = field(default_factory=DataSection)
    seeds: list = field(default_factory=lambda: [0])

    def __post_init__(self):
        self.validate()

    @classmethod
    def from_dict(cls, raw) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(raw) - set(_SECTIONS) - {"seeds"})
        if unknown:
            raise ConfigError(f"unknown top-level key(s) {', '.join(unknown)}")
        kwargs = {name: _build(sec, raw[name], name) for name, sec in _SECTIONS.items() if name in raw}
        if "seeds" in raw:
            kwargs["seeds"] = raw["seeds"]
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError:
            raise
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        return cls.from_dict(raw)

    def validate(self):
        s, nz = self.scm, self.noise
        if s.ell < 1:
            raise ConfigError("scm.ell must be at least 1")
        if (s.adjacency is None) != (s.equations is None):
            raise ConfigError("scm.adjacency and scm.equations must be given together")
        if s.equations is not None:
            bad = [e for e in s.equations if e != "root" and e not in EQUATIONS]
            if bad:
                raise ConfigError(f"scm.equations: unknown tag(s) {bad}")
        for v in s.violation_nodes:
            if not isinstance(v, int) or isinstance(v, bool) or not 2 <= v <= s.ell:
                raise ConfigError(f"scm.violation_nodes: {v!r} is not a node in 2..{s.ell}")
        if s.pnl is not None:
            if len(s.pnl) != s.ell:
                raise ConfigError(f"scm.pnl must have {s.ell} tags")
            bad = [t for t in s.pnl if t not in PNL_DISTORTIONS]
            if bad:
                raise ConfigError(f"scm.pnl: unknown tag(s) {bad}")
        if nz.M < 1 or nz.per_segment < 1:
            raise ConfigError("noise.M and noise.per_segment must be positive")
        for name in ("alpha_range", "beta_range"):
            r = getattr(nz, name)
            if len(r) != 2 or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in r) or r[0] > r[1]:
                raise ConfigError(f"noise.{name} must be an ordered pair of numbers")
        if nz.beta_range[0] <= 0:
            raise ConfigError("noise.beta_range must be positive")
        if self.mixing.D is not None and self.mixing.D < s.ell:
            raise ConfigError("mixing.D must be at least scm.ell")
        if self.mixing.identity and self.mixing.D not in (None, s.ell):
            raise ConfigError("identity mixing requires mixing.D == scm.ell")
        m, t = self.model, self.train
        if m.hidden < 1 or m.head_hidden < 1:
            raise ConfigError("model widths must be positive")
        if m.gamma < 0 or m.obs_var <= 0:
            raise ConfigError("model.gamma must be >= 0 and model.obs_var > 0")
        if t.lr <= 0 or t.batch_size < 1 or t.epochs < 0 or t.checkpoint_every < 0:
            raise ConfigError("train: lr > 0, batch_size >= 1, epochs >= 0, checkpoint_every >= 0")
        if not (0 <= t.beta1 < 1 and 0 <= t.beta2 < 1 and t.eps > 0):
            raise ConfigError("train: Adam betas must be in [0, 1) and eps > 0")
        if not self.eval.tau > 0:
            raise ConfigError("eval.tau must be positive")
        if self.data.source not in ("synthetic", "fmri"):
            raise ConfigError(f"data.source must be 'synthetic' or 'fmri', got {self.data.source!r}")
        if self.data.source == "fmri" and not self.data.path:
            raise ConfigError("data.path is required for the fmri source")
        if not isinstance(self.seeds, list) or not self.seeds:
            raise ConfigError("seeds must be a non-empty list of integers")
        if not all(isinstance(v, int) and not isinstance(v, bool) and v >= 0 for v in self.seeds):
            raise ConfigError("seeds must be non-negative integers")

    # -- conversions -------------------------------------------------------

    def to_dict(self) -> dict:
        return asdict(self)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        d = self.to_dict()
        d["seeds"] = [int(seed)]
        return ExperimentConfig.from_dict(d)

    def gen_config(self, seed: int) -> GenConfig:
        s, nz, mx = self.scm, self.noise, self.mixing
        return GenConfig(
            ell=s.ell,
            M=nz.M,
            per_segment=nz.per_segment,
            D=mx.D,
            seed=seed,
            violation_nodes=list(s.violation_nodes),
            pnl=s.pnl,
            certify=s.certify,
            identity_mixing=mx.identity,
            zero_coeffs=s.zero_coeffs,
            adjacency=s.adjacency,
            equations=s.equations,
            alpha_range=tuple(nz.alpha_range),
            beta_range=tuple(nz.beta_range),
            mixing_seed=mx.seed,
        )

    def model_config(self, ell: int, u_dim: int, x_dim: int) -> ModelConfig:
        m = self.model
        return ModelConfig(
            ell=ell,
            u_dim=u_dim,
            x_dim=x_dim,
            hidden=m.hidden,
            head_hidden=m.head_hidden,
            slope=m.slope,
            gamma=m.gamma,
            obs_var=m.obs_var,
            independent_prior=m.independent_prior,
            dense_posterior=m.dense_posterior,
        )

    def train_config(self, seed: int) -> TrainConfig:
        t = self.train
        return TrainConfig(
            lr=t.lr,
            beta1=t.beta1,
            beta2=t.beta2,
            eps=t.eps,
            batch_size=t.batch_size,
            epochs=t.epochs,
            seed=seed,
            checkpoint_every=t.checkpoint_every,
        )

    def thresholds(self) -> Thresholds:
        e = self.eval
        return Thresholds(affine_r=e.affine_r, affine_r2=e.affine_r2, monotone_rho=e.monotone_rho, tau=e.tau)


def resolve(path=None) -> ExperimentConfig:
    """Load ``path`` or return the all-defaults config."""
    return ExperimentConfig() if path is None else ExperimentConfig.load(path)
