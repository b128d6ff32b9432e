"""
Experiment configuration for the MABE Laboratory
JSON documents validated by pydantic models, with CLI overrides and a content hash
"""

import hashlib
import json
from pathlib import Path
from typing import Annotated, Any, Dict, List, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, PositiveInt, ValidationError

from config import DEFAULT_EVAL_INSTANCES, SWEEP_LAMBDAS
from decoder_evaluation import DecodeSuite
from mabe_trainer import TrainConfig
from q_models import LinearFeaturesSpec, OneHiddenLayerSpec, TabularNGramSpec
from synthetic_tasks import BanditSpec, NoisyCopySpec, SynonymLookupSpec
from theory_checks import UtilitySpec


TaskField = Annotated[Union[BanditSpec, NoisyCopySpec, SynonymLookupSpec], Field(discriminator="kind")]
ModelField = Annotated[Union[TabularNGramSpec, LinearFeaturesSpec, OneHiddenLayerSpec], Field(discriminator="kind")]


class ConfigError(ValueError):
    """Configuration rejected; `errors` lists (field path, message) pairs"""

    def __init__(self, errors: List[tuple]):
        self.errors = errors
        lines = [f"{path}: {message}" for path, message in errors]
        super().__init__("Invalid experiment configuration:\n  " + "\n  ".join(lines))


class SweepSettings(BaseModel):
    lambdas: List[float] = Field(default_factory=lambda: list(SWEEP_LAMBDAS))
    seeds: Optional[List[int]] = None


class TheoremSettings(BaseModel):
    p_true: List[List[float]] = Field(default_factory=lambda: [[1.0, 0.0], [0.7, 0.3, 0.0]])
    random_instances: int = Field(default=50, ge=0)
    max_vocab: int = Field(default=16, ge=2, le=64)
    landscape: bool = True


class GradcheckSettings(BaseModel):
    pairs: PositiveInt = 8
    h: float = Field(default=1e-5, gt=0.0)
    tolerance: float = Field(default=1e-4, gt=0.0)


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = Field(ge=0)
    output_dir: str
    task: TaskField = Field(default_factory=NoisyCopySpec)
    model: ModelField = Field(default_factory=TabularNGramSpec)
    train: TrainConfig = Field(default_factory=TrainConfig)
    decode: DecodeSuite = Field(default_factory=DecodeSuite)
    utility: UtilitySpec = Field(default_factory=UtilitySpec)
    eval_instances: PositiveInt = DEFAULT_EVAL_INSTANCES
    sweep: SweepSettings = Field(default_factory=SweepSettings)
    theorem: TheoremSettings = Field(default_factory=TheoremSettings)
    gradcheck: GradcheckSettings = Field(default_factory=GradcheckSettings)
    checkpoint: Optional[str] = None

    def config_hash(self) -> str:
        """sha256 of the canonical JSON form (sorted keys)"""
        canonical = json.dumps(self.model_dump(mode="json", by_alias=True), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def train_config(self) -> TrainConfig:
        """Training settings with the experiment seed applied"""
        return self.train.model_copy(update={"seed": self.seed})


def _field_errors(exc: ValidationError) -> List[tuple]:
    return [(".".join(str(part) for part in error["loc"]) or "<root>", error["msg"]) for error in exc.errors()]


def parse_config(data: Dict[str, Any]) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_field_errors(exc)) from exc


def load_config(path: Optional[str], overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """
    Read a JSON config file and apply dotted-path overrides

    Overrides whose value is None are ignored, so CLI flags that were not
    given leave the file untouched.
    """
    data: Dict[str, Any] = {}
    if path:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError([("<file>", f"config file not found: {path}")]) from exc
        except json.JSONDecodeError as exc:
            raise ConfigError([("<file>", f"line {exc.lineno} column {exc.colno}: {exc.msg}")]) from exc
        if not isinstance(data, dict):
            raise ConfigError([("<root>", "config document must be a JSON object")])

    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        target = data
        parts = dotted.split(".")
        for part in parts[:-1]:
            target = target.setdefault(part, {})
        target[parts[-1]] = value
    return parse_config(data)


def config_schema() -> Dict[str, Any]:
    return ExperimentConfig.model_json_schema(by_alias=True)
