"""JSON schemas for every JSON / JSON Lines artifact, plus file-type sniffing for ``validate``."""

from __future__ import annotations

import json
from pathlib import Path

import jsonschema

from . import checkpoint
from .checkpoint import FormatError
from .pano import check_schedule, load_panorama, schedule_from_json
from .world import graph_from_json

_num = {"type": "number"}
_int = {"type": "integer", "minimum": 0}
_tokens = {"type": "array", "items": {"type": "string", "minLength": 1}, "minItems": 1}

WORLD = {
    "type": "object",
    "required": ["nodes", "edges"],
    "properties": {
        "nodes": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["id", "pos", "pano", "scene"],
                "properties": {
                    "id": _int,
                    "pos": {"type": "array", "items": _num, "minItems": 3, "maxItems": 3},
                    "pano": {"type": "string"},
                    "scene": {"type": "string", "minLength": 1},
                },
            },
        },
        "edges": {"type": "array", "items": {"type": "array", "items": _int, "minItems": 2, "maxItems": 2}},
    },
}

EPISODE = {
    "type": "object",
    "required": ["instruction", "path"],
    "properties": {"instruction": _tokens, "path": {"type": "array", "items": _int, "minItems": 1}},
}

CAPTION_PAIR = {
    "type": "object",
    "required": ["image", "caption"],
    "properties": {"image": {"type": "string", "pattern": r"#\d+,\d+$"}, "caption": {"type": "string", "minLength": 1}},
}

TRACE = {
    "type": "object",
    "required": ["iter", "loss"],
    "properties": {"iter": _int, "loss": _num, "parts": {"type": "object", "additionalProperties": _num}},
}

_metrics_core = {"TL": {"type": "number", "minimum": 0}, "NE": {"type": "number", "minimum": 0}, "SR": {"type": "number", "minimum": 0, "maximum": 100}, "SPL": {"type": "number", "minimum": 0, "maximum": 100}, "GP": _num}

METRICS = {
    "type": "object",
    "required": ["TL", "NE", "SR", "SPL", "GP", "episodes"],
    "properties": {
        **_metrics_core,
        "episodes": {
            "type": "array",
            "items": {"type": "object", "required": ["path", "TL", "NE", "success", "SPL", "GP"]},
        },
    },
}

MIX_SWEEP = {
    "type": "object",
    "required": ["kind", "rows"],
    "properties": {
        "kind": {"const": "mix_ratio_sweep"},
        "rows": {
            "type": "array",
            "minItems": 1,
            "items": {"type": "object", "required": ["ratio", "TL", "NE", "SR", "SPL", "GP"], "properties": {"ratio": {"type": "number", "minimum": 0, "maximum": 1}, **_metrics_core}},
        },
    },
}

RANK_SWEEP = {
    "type": "object",
    "required": ["kind", "rows"],
    "properties": {
        "kind": {"const": "rank_sweep"},
        "rows": {
            "type": "array",
            "minItems": 1,
            "items": {"type": "object", "required": ["rank", "trainable_params", "fid", "SR", "SPL"], "properties": {"rank": {"type": "integer", "minimum": 1}, "trainable_params": _int, "fid": {"type": "number", "minimum": 0}, **_metrics_core}},
        },
    },
}

MASK_SWEEP = {
    "type": "object",
    "required": ["kind", "rows"],
    "properties": {
        "kind": {"const": "mask_sweep"},
        "rows": {
            "type": "array",
            "minItems": 1,
            "items": {"type": "object", "required": ["strategy", "masked_fraction", "NE", "SR", "SPL"], "properties": {"strategy": {"enum": ["SRM", "ERM", "HIM", "PRM"]}, "masked_fraction": {"type": "number", "minimum": 0, "maximum": 1}, **_metrics_core}},
        },
    },
}

FID = {"type": "object", "required": ["fid", "n_a", "n_b"], "properties": {"fid": {"type": "number", "minimum": 0}, "n_a": _int, "n_b": _int}}

GENERATED = {
    "type": "object",
    "required": ["mode", "nodes"],
    "properties": {
        "mode": {"enum": ["inpaint", "outpaint"]},
        "nodes": {"type": "array", "items": {"type": "object", "required": ["id", "pano"]}},
        "schedule": {"type": "object"},
    },
}

JSON_SCHEMAS = {
    "world": WORLD,
    "metrics": METRICS,
    "mix_ratio_sweep": MIX_SWEEP,
    "rank_sweep": RANK_SWEEP,
    "mask_sweep": MASK_SWEEP,
    "fid": FID,
    "generated": GENERATED,
}
JSONL_SCHEMAS = {"episodes": EPISODE, "pairs": CAPTION_PAIR, "trace": TRACE}


def _sniff_json(obj) -> str:
    if not isinstance(obj, dict):
        raise FormatError("top-level JSON value must be an object")
    if "kind" in obj and obj["kind"] in JSON_SCHEMAS:
        return obj["kind"]
    for key, kind in (("edges", "world"), ("TL", "metrics"), ("fid", "fid"), ("mode", "generated")):
        if key in obj:
            return kind
    raise FormatError("unrecognised JSON document")


def _sniff_line(obj) -> str:
    for key, kind in (("path", "episodes"), ("image", "pairs"), ("iter", "trace")):
        if isinstance(obj, dict) and key in obj:
            return kind
    raise FormatError("unrecognised JSON Lines record")


def validate_json(obj, kind: str | None = None) -> str:
    kind = kind or _sniff_json(obj)
    try:
        jsonschema.validate(obj, JSON_SCHEMAS[kind])
    except jsonschema.ValidationError as exc:
        raise FormatError(f"{kind}: {exc.message}") from exc
    if kind == "metrics" and obj["SPL"] > obj["SR"] + 1e-9:
        raise FormatError("metrics: SPL exceeds SR")
    if kind == "world":
        try:
            graph_from_json(obj)
        except ValueError as exc:
            raise FormatError(f"world: {exc}") from exc
    if kind == "generated" and "schedule" in obj:
        try:
            check_schedule(schedule_from_json(obj["schedule"]))
        except ValueError as exc:
            raise FormatError(f"generated: {exc}") from exc
    return kind


def validate_file(path: str | Path, kind: str | None = None) -> str:
    """Check one artifact against its schema or binary layout; returns the detected kind."""
    path = Path(path)
    data = path.read_bytes()
    if data[:4] == b"PAN1":
        load_panorama(path)
        return "panorama"
    if data[:4] == checkpoint.MAGIC:
        checkpoint.loads(data)
        return "checkpoint"
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError("binary file with unknown magic") from exc
    if path.suffix == ".jsonl":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        found = kind
        for n, line in enumerate(lines, 1):
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"line {n}: {exc}") from exc
            found = found or _sniff_line(obj)
            try:
                jsonschema.validate(obj, JSONL_SCHEMAS[found])
            except jsonschema.ValidationError as exc:
                raise FormatError(f"line {n}: {exc.message}") from exc
        return found or "empty"
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(str(exc)) from exc
    return validate_json(obj, kind)
