"""Run configuration shared by the command-line tools."""
from __future__ import annotations

import hashlib
import json
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError
from .fit_cross import FitOptions
from .fit_long import LongOptions
from .gmm import LesionPriorConfig


class LesionSettings(BaseModel):
    """Lesion intensity prior relative to white matter; the default offset
    describes a lesion darker on the first channel and brighter on the second."""

    model_config = ConfigDict(extra="forbid")

    wm_class: int = 3
    offset: list[float] = Field(default_factory=lambda: [-0.6, 1.0])
    cov_scale: float = Field(1.0, gt=0)
    strength: float = Field(50.0, ge=0)


class RunConfig(BaseModel):
    """Hyperparameters of a run; unknown keys are rejected.

    ``K0`` and ``K1`` default to ``K`` and ``14 K``.
    """

    model_config = ConfigDict(extra="forbid")

    K: float = Field(10.0, ge=0)
    K0: float | None = Field(None, ge=0)
    K1: float | None = Field(None, ge=0)
    bias_degree: int = Field(2, ge=0)
    lesion: LesionSettings | None = Field(default_factory=LesionSettings)
    n_iter: int = Field(5, ge=0)
    max_outer: int = Field(30, ge=1)
    tol: float = Field(1e-6, gt=0)
    em_iters: int = Field(10, ge=1)
    lesion_threshold: float = Field(0.5, ge=0, le=1)
    P0: float | list[float] | None = None
    freeze_x0: bool = False
    cross_init: Literal["atlas", "template"] = "atlas"
    grid_step: float | None = Field(None, ge=2)
    threads: int | None = Field(None, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def _fill_stiffness(self):
        if self.K0 is None:
            self.K0 = self.K
        if self.K1 is None:
            self.K1 = 14.0 * self.K
        return self

    def fit_options(self) -> FitOptions:
        lesion = None
        if self.lesion is not None:
            lesion = LesionPriorConfig(self.lesion.wm_class, list(self.lesion.offset), self.lesion.cov_scale,
                                       self.lesion.strength)
        return FitOptions(stiffness=self.K, bias_degree=self.bias_degree, lesion=lesion,
                          max_outer=self.max_outer, tol=self.tol, em_iters=self.em_iters)

    def long_options(self) -> LongOptions:
        return LongOptions(cross=self.fit_options(), K0=self.K0, K1=self.K1, n_iter=self.n_iter, P0=self.P0,
                           freeze_x0=self.freeze_x0)

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form."""
        blob = json.dumps(self.model_dump(mode="json"), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read a JSON config file (or defaults when ``path`` is None)."""
    data = {}
    if path is not None:
        try:
            with open(path) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
    data.update(overrides or {})
    try:
        return RunConfig(**data)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc
