"""Experiment configuration: one JSON document per run, schema-validated."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields

import jsonschema

from . import linops, simdata, theory, train, unroll


class ConfigError(ValueError):
    pass


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False, "required": list(required)}


_num = {"type": "number"}
_int = {"type": "integer"}
_bool = {"type": "boolean"}
_str = {"type": "string"}

NOISE_SCHEMA = _obj({"kind": {"enum": ["poisson_beer_lambert", "gaussian", "none"]}, "I0": _num, "sigma": _num})

SCHEMA = _obj(
    {
        "name": _str,
        "geometry": _obj(
            {
                "mode": {"enum": ["parallel", "fan"]},
                "image_size": _int,
                "n_angles": _int,
                "n_rays": _int,
                "angle_range": _num,
                "source_distance": _num,
                "detector_spacing": _num,
                "pixel_size": _num,
            }
        ),
        "noise": NOISE_SCHEMA,
        "dataset": _obj(
            {
                "count": _int,
                "seed": _int,
                "phantom": {"enum": ["ellipses", "shepp_logan"]},
                "val_fraction": _num,
                "test_fraction": _num,
                "fbp_filter": {"enum": ["ramlak", "hann"]},
                "path": _str,
            }
        ),
        "model": _obj(
            {
                "variant": {"enum": list(unroll.VARIANTS)},
                "K": _int,
                "m": _int,
                "hidden": _int,
                "kernel": _int,
                "schedule": {"enum": list(unroll.SCHEDULES)},
                "scheme": {"enum": ["contiguous", "interleaved"]},
                "reset_dual": _bool,
            }
        ),
        "train": _obj(
            {
                "mode": {"enum": ["supervised", "ei"]},
                "epochs": _int,
                "lr": _num,
                "lambda_ei": _num,
                "lambda_adapt": _num,
                "n_adapt": _int,
                "lr_adapt": _num,
                "seed": _int,
                "freeze_dual": _bool,
                "cosine": _bool,
            }
        ),
        "reconstruct": _obj({"split": {"enum": ["train", "val", "test"]}, "index": _int}),
        "eval": _obj({"split": {"enum": ["train", "val", "test"]}, "workers": _int}),
        "adapt": _obj(
            {
                "noise": NOISE_SCHEMA,
                "phantom": {"enum": ["ellipses", "shepp_logan"]},
                "phantom_seed": _int,
                "noise_seed": _int,
            }
        ),
        "theory": _obj({f.name: {} for f in fields(theory.TheoryScenario)}),
    }
)


@dataclass
class ExperimentConfig:
    raw: dict
    geometry: linops.ScanGeometry
    noise: simdata.NoiseModel
    dataset: dict
    model: unroll.UnrollConfig
    train: train.TrainConfig
    train_mode: str
    reconstruct: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    adapt: dict = field(default_factory=dict)
    theory: theory.TheoryScenario | None = None


DATASET_DEFAULTS = {"count": 200, "seed": 0, "phantom": "ellipses", "val_fraction": 0.1, "test_fraction": 0.1,
                    "fbp_filter": "hann"}


def parse(doc: dict, seed: int | None = None, variant: str | None = None) -> ExperimentConfig:
    """Validate and build typed sections.  ``seed``/``variant`` override the document."""
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{path}: {exc.message}") from None
    try:
        geom = linops.ScanGeometry(**doc.get("geometry", {}))
        noise = simdata.NoiseModel(**doc.get("noise", {}))
        ds = {**DATASET_DEFAULTS, **doc.get("dataset", {})}
        mdl = dict(doc.get("model", {}))
        if variant:
            mdl["variant"] = variant
        model = unroll.UnrollConfig(**mdl)
        tr = dict(doc.get("train", {}))
        mode = tr.pop("mode", "supervised")
        if seed is not None:
            tr["seed"] = seed
            ds["seed"] = seed
        tcfg = train.TrainConfig(**tr)
        th = None
        if "theory" in doc:
            tdoc = dict(doc["theory"])
            if seed is not None:
                tdoc["base_seed"] = seed
            th = theory.TheoryScenario(**tdoc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return ExperimentConfig(doc, geom, noise, ds, model, tcfg, mode, doc.get("reconstruct", {}), doc.get("eval", {}),
                            doc.get("adapt", {}), th)


def load(path, seed=None, variant=None) -> ExperimentConfig:
    try:
        with open(path) as f:
            doc = json.load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    return parse(doc, seed, variant)
