"""JSON schemas and CSV header contracts for everything the CLI writes."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import jsonschema

_num = {"type": "number"}
_num_or_null = {"type": ["number", "null"]}
_int = {"type": "integer", "minimum": 0}
_frac = {"type": "number", "minimum": 0, "maximum": 1}

LAYER_SCHEMA = {
    "type": "object",
    "required": ["id", "kind", "in_channels", "out_channels", "kernel", "groups", "stride",
                 "has_bias", "predecessors"],
    "properties": {
        "id": {"type": "string"},
        "kind": {"enum": ["Input", "Conv2d", "DepthwiseConv2d", "Dense", "Norm", "ReLU", "Pool",
                          "GlobalPool", "Add", "ClassifierHead", "Aggregate"]},
        "in_channels": {"type": "integer", "minimum": 1},
        "out_channels": {"type": "integer", "minimum": 1},
        "kernel": _int,
        "groups": {"type": "integer", "minimum": 1},
        "stride": {"type": "integer", "minimum": 1},
        "has_bias": {"type": "boolean"},
        "predecessors": {"type": "array", "items": {"type": "string"}},
    },
}

GRAPH_SCHEMA = {
    "type": "object",
    "required": ["format", "version", "r", "M", "layers"],
    "properties": {
        "format": {"const": "mnlab-graph"},
        "version": {"const": 1},
        "r": {"type": "integer", "minimum": 1},
        "M": {"type": "integer", "minimum": 1},
        "stage_widths": {"type": "array", "items": {"type": "integer"}},
        "layers": {"type": "array", "items": LAYER_SCHEMA, "minItems": 2},
    },
}

AUDIT_SCHEMA = {
    "type": "object",
    "required": ["graph", "r", "M", "per_layer", "total_params", "total_macs_per_batch", "activation_elements"],
    "properties": {
        "r": {"type": "integer", "minimum": 1},
        "M": {"type": "integer", "minimum": 1},
        "total_params": _int,
        "total_macs_per_batch": _int,
        "activation_elements": _int,
        "gain_vs_baseline_percent": _num_or_null,
        "per_layer": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "kind", "preservation", "params", "macs", "activation_channels"],
                "properties": {"params": _int, "macs": _int, "activation_channels": _int},
            },
        },
    },
}

DIAG_SCHEMA = {
    "type": "object",
    "required": ["r", "M", "n_samples", "cka_per_layer", "dnr_per_layer", "per_path_accuracy",
                 "aggregated_accuracy", "oracle_accuracy", "cumulative_curves", "orderings"],
    "properties": {
        "r": {"type": "integer", "minimum": 1},
        "M": {"type": "integer", "minimum": 1},
        "n_samples": {"type": "integer", "minimum": 1},
        "cka_per_layer": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["layer", "mean_cka", "groups"],
                "properties": {"mean_cka": {"type": ["number", "null"], "minimum": -1e-9, "maximum": 1 + 1e-9}},
            },
        },
        "dnr_per_layer": {
            "type": "array",
            "items": {"type": "object", "required": ["layer", "dead", "total", "ratio"],
                      "properties": {"ratio": _frac}},
        },
        "per_path_accuracy": {"type": "array", "items": _frac, "minItems": 1},
        "aggregated_accuracy": _frac,
        "oracle_accuracy": _frac,
        "cumulative_curves": {
            "type": "object",
            "required": ["BestFirst", "WorstFirst", "Original"],
            "additionalProperties": {"type": "array", "items": _frac, "minItems": 1},
        },
    },
}

CELL_RESULT_SCHEMA = {
    "type": "object",
    "required": ["cell_id", "r", "ipc", "seed", "test_accuracy", "train_accuracy", "oracle_accuracy",
                 "per_path_max", "params", "macs", "activation_elements"],
    "properties": {
        "cell_id": {"type": "string"},
        "r": {"type": "integer", "minimum": 1},
        "ipc": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer"},
        "test_accuracy": _frac,
        "train_accuracy": _frac,
        "oracle_accuracy": _frac,
        "per_path_max": _frac,
        "params": _int,
        "macs": _int,
        "activation_elements": _int,
    },
}

_cell_row = {
    "type": "object",
    "required": ["cell_id", "r", "ipc", "seed", "test_accuracy", "gain_vs_r1", "oracle_accuracy", "params", "macs"],
    "properties": {"gain_vs_r1": _num_or_null, "test_accuracy": _frac, "oracle_accuracy": _frac},
}

SUMMARY_SCHEMA = {
    "type": "object",
    "required": ["r_grid", "ipc_grid", "cells", "aggregate", "files"],
    "properties": {
        "r_grid": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
        "ipc_grid": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
        "cells": {"type": "array", "items": _cell_row, "minItems": 1},
        "aggregate": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["r", "ipc", "n", "test_accuracy_mean", "test_accuracy_std", "gain_mean", "cell_ids"],
                "properties": {"cell_ids": {"type": "array", "items": {"type": "string"}, "minItems": 1}},
            },
        },
        "files": {"type": "array", "items": {"type": "string"}},
    },
}

CSV_HEADERS = {
    "history.csv": ["epoch", "lr", "train_loss", "train_acc", "val_acc"],
    "cka_layerwise.csv": ["layer", "mean_cka", "groups"],
    "dnr_layerwise.csv": ["layer", "dead", "total", "ratio"],
    "cumulative_curves.csv": ["ordering", "k", "accuracy"],
    "paths.csv": ["path", "accuracy"],
    "cost_table.csv": ["r", "params", "macs", "activation_elements", "activation_bytes"],
}

JSON_SCHEMAS = {
    "diag.json": DIAG_SCHEMA,
    "result.json": CELL_RESULT_SCHEMA,
    "summary.json": SUMMARY_SCHEMA,
    "graph.json": GRAPH_SCHEMA,
    "audit.json": AUDIT_SCHEMA,
}


def validate_json(path, schema=None) -> dict:
    path = Path(path)
    doc = json.loads(path.read_text())
    jsonschema.validate(doc, schema or JSON_SCHEMAS[path.name])
    return doc


def validate_csv(path, header=None) -> list[list[str]]:
    """Check the header row; matrix files (``*_matrix*.csv``) need ``ipc`` then ``r=<int>`` columns."""
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty CSV")
    head = rows[0]
    if header is None and "matrix" in path.name:
        if head[0] != "ipc" or not all(h.startswith("r=") and h[2:].isdigit() for h in head[1:]):
            raise ValueError(f"{path}: bad matrix header {head}")
    else:
        expected = header or CSV_HEADERS[path.name]
        if head != expected:
            raise ValueError(f"{path}: header {head} != {expected}")
    width = len(head)
    for i, r in enumerate(rows[1:], start=2):
        if len(r) != width:
            raise ValueError(f"{path}: row {i} has {len(r)} fields, header has {width}")
    return rows
