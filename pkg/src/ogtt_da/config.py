"""Versioned JSON documents for nominal model parameters and estimation settings.

Every document is hashed over its canonical JSON form (sorted keys, no
whitespace) so runs can record exactly which configuration produced them.
"""
from __future__ import annotations

import hashlib
import json
import os
from importlib import resources
from pathlib import Path

from .model import ModelParams

CONFIG_DIR_ENV = "OGTT_DA_CONFIG_DIR"
MODEL_PARAMS_KIND = "ogtt_da.model_params"
ESTIMATION_KIND = "ogtt_da.estimation_config"
SCHEMA_VERSION = 1

MODEL_UNITS = {
    "time": "min",
    "G": "mg/dL",
    "I": "uU/mL",
    "S_I": "mL/uU/day",
    "sigma": "uU/mg/day",
    "beta": "mg",
    "E_GO": "1/min",
    "k": "1/min",
    "hgp": "mg/dL/min",
    "meal_dose": "g",
    "meal_conversion": "1/dL",
}


def canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False)


def digest(doc) -> str:
    return hashlib.sha256(canonical_json(doc).encode("utf-8")).hexdigest()


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def model_params_document(params: ModelParams) -> dict:
    return {"kind": MODEL_PARAMS_KIND, "version": SCHEMA_VERSION, "units": dict(MODEL_UNITS),
            "params": params.to_dict()}


def _check_header(doc: dict, kind: str, path) -> None:
    if doc.get("kind") != kind:
        raise ValueError(f"{path}: expected kind {kind!r}, got {doc.get('kind')!r}")
    if doc.get("version") != SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported version {doc.get('version')!r}")


def model_params_from_document(doc: dict, source="<document>") -> ModelParams:
    _check_header(doc, MODEL_PARAMS_KIND, source)
    units = doc.get("units", {})
    for key, unit in MODEL_UNITS.items():
        if units.get(key, unit) != unit:
            raise ValueError(f"{source}: unit for {key} must be {unit!r}, got {units[key]!r}")
    return ModelParams.from_dict(doc["params"])


def load_model_params(path=None) -> tuple[ModelParams, str]:
    """Return the parameters and the hash of the document they came from."""
    doc = _read(path, "nominal_params.json")
    return model_params_from_document(doc, path or "nominal_params.json"), digest(doc)


def save_model_params(params: ModelParams, path) -> str:
    doc = model_params_document(params)
    _write(doc, path)
    return digest(doc)


def _read(path, default_name):
    if path is not None:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    env_dir = os.environ.get(CONFIG_DIR_ENV)
    if env_dir and (Path(env_dir) / default_name).exists():
        return json.loads((Path(env_dir) / default_name).read_text(encoding="utf-8"))
    text = resources.files("ogtt_da").joinpath("data", default_name).read_text(encoding="utf-8")
    return json.loads(text)


def _write(doc, path) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_estimation_document(path=None) -> dict:
    doc = _read(path, "estimation.json")
    _check_header(doc, ESTIMATION_KIND, path or "estimation.json")
    return doc
