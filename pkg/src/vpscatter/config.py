"""Strict run configuration (JSON or YAML) and its content hash."""

import hashlib
import json
from pathlib import Path
from typing import Literal

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .errors import ConfigError
from .field import FieldConfig
from .phase_space import GridSpec
from .profiles import make_profile

SUBCOMMANDS = ("forward", "waveop", "scatmap", "fields", "verify")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class GridSection(_Strict):
    physical_dt: float = Field(0.01, gt=0)
    log2_ratio: float = Field(-0.25, lt=0, description="log2 of the geometric node ratio rho")
    s_min: float = Field(1e-3, gt=0, lt=1)
    substeps: int = Field(2, ge=1)
    canonical_substeps: int = Field(1, ge=1)
    T_star: float = Field(1.0, gt=0, le=1)
    bridge_dt: float = Field(1e-3, gt=0)


class FieldSection(_Strict):
    softening: float = Field(0.2, ge=0)
    refresh: Literal["kick", "node"] = "kick"
    summation: Literal["direct", "compensated"] = "compensated"
    comoving: bool = True
    coupling: bool = True

    def to_field_config(self):
        return FieldConfig(softening=self.softening, summation=self.summation,
                           comoving=self.comoving, coupling=self.coupling)


class SamplingSection(_Strict):
    n: int = Field(3, ge=1, le=16, description="samples per phase-space axis")
    half_widths: float = Field(2.5, gt=0, description="sampled half-width in profile widths")


class ProbeSection(_Strict):
    n_probe: int = Field(9, ge=1)
    n_limit: int = Field(3, ge=1)
    jitter: float = Field(0.0, ge=0, description="seeded random jitter, in lattice spacings")


class ToleranceSection(_Strict):
    picard_tol: float = Field(1e-8, gt=0)
    picard_max_iter: int = Field(12, ge=1)
    scatter_rel: float = Field(0.05, gt=0)
    cauchy_tol: float | None = Field(None, gt=0)
    eps0: float | None = Field(None, gt=0)


class FieldsSection(_Strict):
    n_targets: int = Field(5, ge=1)
    half: float = Field(3.0, gt=0)
    tol: float = Field(1e-6, gt=0)


class VerifySection(_Strict):
    suite: Literal["trivial", "structural"] = "trivial"


class RunConfig(_Strict):
    subcommand: Literal[SUBCOMMANDS] | None = None
    profile: dict = Field(default_factory=lambda: {"family": "zero"})
    lam: Literal[-1, 1] = 1
    grids: GridSection = GridSection()
    field: FieldSection = FieldSection()
    sampling: SamplingSection = SamplingSection()
    probes: ProbeSection = ProbeSection()
    tolerances: ToleranceSection = ToleranceSection()
    fields: FieldsSection = FieldsSection()
    verify: VerifySection = VerifySection()
    seed: int = Field(0, ge=0, lt=2**64)

    @field_validator("profile")
    @classmethod
    def _profile_builds(cls, v):
        try:
            make_profile(v)
        except ConfigError as exc:
            raise ValueError(str(exc)) from exc
        return v

    def build_profile(self):
        return make_profile(self.profile)

    def canonical_json(self):
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    @property
    def hash(self):
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def parse_config(data):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"invalid config: {exc}") from exc


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    return parse_config(data)


def profile_grid(profile, n, half_widths=2.5):
    """Tensor grid over the central part of a profile's (a, b) support."""
    ca, ra, cb, rb = profile.support()
    f = min(1.0, half_widths / getattr(profile, "support_widths", 6.0))
    ha, hb = max(ra * f, 1e-3), max(rb * f, 1e-3)
    lo = tuple(np.asarray(ca) - ha) + tuple(np.asarray(cb) - hb)
    hi = tuple(np.asarray(ca) + ha) + tuple(np.asarray(cb) + hb)
    return GridSpec(lo, hi, (n,) * 6)
