"""
Checkpoints for the MABE Laboratory
Models are stored as indented JSON with parameters written as 17-significant-digit strings
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
from pydantic import TypeAdapter, ValidationError

from config import ARTIFACT_VERSION
from q_models import MODEL_FAMILIES, LinearFeaturesSpec, OneHiddenLayerSpec, QModel, TabularNGramSpec


logger = logging.getLogger(__name__)

FORMAT_NAME = "mabe-lab-checkpoint"
FAMILY_SPECS = {
    "tabular": TabularNGramSpec,
    "linear": LinearFeaturesSpec,
    "hidden": OneHiddenLayerSpec,
}


class CheckpointFormatError(ValueError):
    """Malformed checkpoint; names the field and, when known, the line"""

    def __init__(self, path: str, field: str, message: str, line: Optional[int] = None):
        self.path = path
        self.field = field
        self.line = line
        where = f"line {line}, " if line is not None else ""
        super().__init__(f"{path}: {where}field '{field}': {message}")


def save_checkpoint(model: QModel, path: str) -> str:
    document = {
        "format": FORMAT_NAME,
        "version": ARTIFACT_VERSION,
        "family": model.spec.model_dump(),
        "vocab_size": model.vocab_size,
        "seed": model.seed,
        "steps": model.steps,
        "layout": model.layout.describe(),
        "params": [format(float(value), ".17g") for value in model.params],
    }
    output = Path(path)
    output.parent.mkdir(parents=True, exist_ok=True)
    with open(output, "w", encoding="utf-8", newline="\n") as handle:
        json.dump(document, handle, indent=2)
        handle.write("\n")
    logger.info(f"Checkpoint written: {output} ({model.layout.size} parameters, step {model.steps})")
    return str(output)


def _require(document: Dict[str, Any], field: str, path: str):
    if field not in document:
        raise CheckpointFormatError(path, field, "missing")
    return document[field]


def load_checkpoint(path: str, vocab_size: Optional[int] = None) -> QModel:
    """Rebuild a model bit-identically; optionally insist on a vocabulary size"""
    text = Path(path).read_text(encoding="utf-8")
    try:
        document = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointFormatError(path, "<document>", exc.msg, line=exc.lineno) from exc
    if not isinstance(document, dict) or document.get("format") != FORMAT_NAME:
        raise CheckpointFormatError(path, "format", f"expected '{FORMAT_NAME}'")

    family = _require(document, "family", path)
    kind = family.get("kind") if isinstance(family, dict) else None
    if kind not in FAMILY_SPECS:
        raise CheckpointFormatError(path, "family.kind", f"unknown family {kind!r}")
    try:
        spec = TypeAdapter(FAMILY_SPECS[kind]).validate_python(family)
    except ValidationError as exc:
        raise CheckpointFormatError(path, "family", str(exc.errors()[0]["msg"])) from exc

    d = _require(document, "vocab_size", path)
    if not isinstance(d, int) or isinstance(d, bool):
        raise CheckpointFormatError(path, "vocab_size", "must be an integer")
    if d < 2:
        raise CheckpointFormatError(path, "vocab_size", f"must be at least 2, found {d}")
    if vocab_size is not None and d != vocab_size:
        raise CheckpointFormatError(path, "vocab_size", f"checkpoint has d={d}, task needs d={vocab_size}")

    model = MODEL_FAMILIES[kind](spec, d, int(_require(document, "seed", path)))
    model.steps = int(_require(document, "steps", path))
    raw = _require(document, "params", path)
    if not isinstance(raw, list) or len(raw) != model.layout.size:
        count = len(raw) if isinstance(raw, list) else "no"
        raise CheckpointFormatError(path, "params", f"expected {model.layout.size} values, found {count}")
    try:
        model.params = np.array([float(value) for value in raw], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise CheckpointFormatError(path, "params", str(exc)) from exc
    if not np.all(np.isfinite(model.params)):
        bad = int(np.flatnonzero(~np.isfinite(model.params))[0])
        raise CheckpointFormatError(path, f"params[{bad}]", "non-finite value")
    return model
