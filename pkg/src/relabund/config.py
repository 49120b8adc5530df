"""Run configuration: a YAML document validated against strict schemas.

Every section is optional and unknown keys are rejected::

    fit:
      reference_species: sp1
      reference_site: site1
      unmonitored: {std: [sp7]}
      p0: null            # estimate; or "equal", or {sp1: 1.0, sp2: 0.5}
      habitat_pooling: false
      options: {dispersion_mode: quasi_poisson}
      penalty: {nu: 0.5, proximity: [[0, 1], [1, 0]]}
    simulate:
      scenario: {kind: cells, n_tilde: ..., e_tilde: ..., p_tilde: ...}
    verify_variance: {e1_scale: 100, replicates: 5000}
    validate: {replicates: 100, scenario: {n_sites: 50}}
"""

from __future__ import annotations

import dataclasses
import json
import typing
from pathlib import Path
from typing import Annotated, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, NonNegativeFloat, PositiveFloat, PositiveInt, create_model

from .simulate import SurveyScenario


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class OptionsConfig(_Strict):
    max_iterations: PositiveInt = 100
    deviance_rel_tol: PositiveFloat = 1e-10
    score_tol: PositiveFloat = 1e-6
    step_halving_max: Annotated[int, Field(ge=0)] = 30
    dispersion_mode: Literal["poisson", "quasi_poisson"] = "poisson"


class PenaltyConfig(_Strict):
    nu: NonNegativeFloat
    proximity: list[list[NonNegativeFloat]]


class FitConfig(_Strict):
    reference_species: Optional[str] = None
    reference_site: Optional[str] = None
    unmonitored: dict[Literal["std", "opp"], list[str]] = Field(default_factory=dict)
    p0: Union[Literal["equal"], dict[str, PositiveFloat], None] = None
    habitat_pooling: bool = False
    options: OptionsConfig = Field(default_factory=OptionsConfig)
    penalty: Optional[PenaltyConfig] = None


class CellScenarioConfig(_Strict):
    kind: Literal["cells"]
    n_tilde: list[list[NonNegativeFloat]]
    e_tilde: list[list[NonNegativeFloat]]
    p_tilde: list[list[NonNegativeFloat]]
    species: Optional[list[str]] = None
    sites: Optional[list[str]] = None


class VisitScenarioConfig(_Strict):
    kind: Literal["visits"]
    abundance: list[list[Annotated[int, Field(ge=0)]]]
    # visits[dataset][site] is an (I, V) matrix of per-visit probabilities
    visits: list[list[list[list[Annotated[float, Field(ge=0, le=1)]]]]]
    unmonitored_std: list[int] = Field(default_factory=list)
    beta_concentration: Optional[PositiveFloat] = None


class RectConfig(_Strict):
    x0: float
    x1: float
    y0: float
    y1: float


class RetentionConfig(_Strict):
    std: list[str]
    opp: list[str]


class SpatialScenarioConfig(_Strict):
    kind: Literal["ipp"]
    sites: list[RectConfig]
    intensity: list[str]
    bound: list[PositiveFloat]
    retention: RetentionConfig


def _survey_model():
    hints = typing.get_type_hints(SurveyScenario)
    fields = {f.name: (hints[f.name], f.default) for f in dataclasses.fields(SurveyScenario)}
    return create_model("SurveyScenarioConfig", __base__=_Strict, **fields)


SurveyScenarioConfig = _survey_model()


class SurveyKindConfig(SurveyScenarioConfig):
    kind: Literal["survey"]


Scenario = Annotated[
    Union[CellScenarioConfig, VisitScenarioConfig, SpatialScenarioConfig, SurveyKindConfig],
    Field(discriminator="kind"),
]


class SimulateConfig(_Strict):
    scenario: Scenario
    replicate: Annotated[int, Field(ge=0)] = 0


class VerifyVarianceConfig(_Strict):
    n_tilde: Optional[list[list[PositiveFloat]]] = None
    p0: Optional[list[NonNegativeFloat]] = None
    effort0: Optional[list[PositiveFloat]] = None
    e1_scale: NonNegativeFloat = 100.0
    replicates: Annotated[int, Field(ge=1000)] = 5000
    band: PositiveFloat = 0.15
    min_expected: NonNegativeFloat = 5.0
    method: Literal["auto", "closed_form", "glm", "fixed_point"] = "auto"


class ValidateConfig(_Strict):
    scenario: SurveyScenarioConfig = Field(default_factory=SurveyScenarioConfig)
    replicates: PositiveInt = 100
    subsample: bool = True


class RunConfig(_Strict):
    fit: FitConfig = Field(default_factory=FitConfig)
    simulate: Optional[SimulateConfig] = None
    verify_variance: VerifyVarianceConfig = Field(default_factory=VerifyVarianceConfig)
    validate_: ValidateConfig = Field(default_factory=ValidateConfig, alias="validate")

    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json", by_alias=True), sort_keys=True, separators=(",", ":"))


def survey_scenario(cfg) -> SurveyScenario:
    data = cfg.model_dump()
    data.pop("kind", None)
    return SurveyScenario(**data)


def load_config(path: str | Path | None) -> RunConfig:
    """Parse and validate a YAML config; ``None`` gives all defaults."""
    if path is None:
        return RunConfig()
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ValueError("config must be a mapping at the top level")
    return RunConfig.model_validate(data)
