"""Versioned JSON checkpoints for parameters, Fisher anchors, and posteriors.

Floats are serialized with Python's shortest round-trip repr, so a save/load
cycle reproduces every double bit for bit.
"""

from __future__ import annotations

import json

import numpy as np

from .autodiff import as_array
from .ewc import FisherState
from .strategies import EvaluatorState
from .vcl import GaussianPosterior

FORMAT = "dialeval-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _pack(params: dict[str, np.ndarray]) -> dict:
    return {k: {"shape": list(v.shape), "data": np.asarray(v, dtype=np.float64).ravel().tolist()} for k, v in params.items()}


def _unpack(packed: dict) -> dict[str, np.ndarray]:
    out = {}
    for name, entry in packed.items():
        arr = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        out[name] = as_array(arr, f"checkpoint param {name}")
    return out


def _attachment_to_dict(attachment) -> dict:
    if attachment is None:
        return {"kind": "none"}
    if isinstance(attachment, GaussianPosterior):
        return {
            "kind": "posterior",
            "mu": _pack(attachment.mu),
            "rho": _pack(attachment.rho),
            "prior_mu": attachment.prior_mu,
            "prior_var": attachment.prior_var,
            "point_names": sorted(attachment.point_names),
        }
    if isinstance(attachment, list):
        return {
            "kind": "fisher",
            "anchors": [
                {"lam": a.lam, "fisher": _pack(a.fisher), "anchor": _pack(a.anchor)} for a in attachment
            ],
        }
    raise CheckpointError(f"cannot serialize attachment of type {type(attachment).__name__}")


def _attachment_from_dict(raw: dict):
    kind = raw.get("kind")
    if kind == "none":
        return None
    if kind == "posterior":
        return GaussianPosterior(
            _unpack(raw["mu"]),
            _unpack(raw["rho"]),
            float(raw["prior_mu"]),
            float(raw["prior_var"]),
            frozenset(raw.get("point_names", [])),
        )
    if kind == "fisher":
        return [
            FisherState(_unpack(a["fisher"]), _unpack(a["anchor"]), float(a["lam"])) for a in raw["anchors"]
        ]
    raise CheckpointError(f"unknown attachment kind {kind!r}")


def save_params(path, params: dict[str, np.ndarray]) -> None:
    doc = {"format": FORMAT, "version": VERSION, "kind": "params", "params": _pack(params)}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_params(path) -> dict[str, np.ndarray]:
    doc = _read(path)
    return _unpack(doc["params"])


def save_state(path, state: EvaluatorState) -> None:
    doc = {
        "format": FORMAT,
        "version": VERSION,
        "kind": "evaluator",
        "strategy": state.strategy,
        "step": state.step,
        "predict_seed": state.predict_seed,
        "params": _pack(state.params),
        "attachment": _attachment_to_dict(state.attachment),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_state(path) -> EvaluatorState:
    doc = _read(path)
    if doc.get("kind") != "evaluator":
        raise CheckpointError(f"{path}: expected an evaluator checkpoint")
    return EvaluatorState(
        doc["strategy"],
        int(doc["step"]),
        _unpack(doc["params"]),
        _attachment_from_dict(doc["attachment"]),
        int(doc["predict_seed"]),
    )


def _read(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a {FORMAT} file")
    if doc.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported version {doc.get('version')}")
    return doc
