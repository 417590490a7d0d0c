"""JSON model files, certificates and run configs; CSV writers."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .interval import IntervalVector
from .metric import NeuralContractionMetric
from .nn import Activation, FeedforwardNetwork, ZeroAnchoredBoundedController
from .plant import make_plant, plant_name
from .verifier import ContractionProblem, DomainCertificate

log = logging.getLogger(__name__)

MODEL_VERSION = 1
ANCHOR_TOLERANCE = 1e-9


class ModelFormatError(ValueError):
    pass


def load_schema(name: str) -> dict:
    return json.loads(resources.files("contracert").joinpath("schemas", f"{name}.schema.json").read_text())


def _floats(a) -> list:
    return [float(v) for v in np.asarray(a, dtype=np.float64).ravel()]


def network_to_dict(net: FeedforwardNetwork) -> dict:
    net = net.numpy()
    return {
        "layers": [
            {"rows": int(W.shape[0]), "cols": int(W.shape[1]), "W": _floats(W), "b": _floats(b)} for W, b in net.layers
        ],
        "hidden_activation": net.hidden.to_dict(),
        "output_activation": net.output.to_dict(),
    }


def network_from_dict(d: dict) -> FeedforwardNetwork:
    layers = []
    for k, L in enumerate(d["layers"]):
        rows, cols = int(L["rows"]), int(L["cols"])
        W = np.asarray(L["W"], dtype=np.float64)
        b = np.asarray(L["b"], dtype=np.float64)
        if W.size != rows * cols or b.size != rows:
            raise ModelFormatError(f"layer {k}: W has {W.size} entries and b {b.size}, expected {rows}x{cols}")
        layers.append((W.reshape(rows, cols), b))
    return FeedforwardNetwork(
        layers,
        Activation.from_dict(d.get("hidden_activation", "softplus")),
        Activation.from_dict(d.get("output_activation", "identity")),
    )


def problem_to_dict(prob: ContractionProblem) -> dict:
    ctrl = prob.controller
    if ctrl is None:
        cd = None
    elif isinstance(ctrl, ZeroAnchoredBoundedController):
        cd = network_to_dict(ctrl.base)
        cd["kind"] = "anchored"
        cd["output_scale"] = float(ctrl.scale)
        cd["anchor"] = _floats(ctrl.anchor())
    else:
        cd = network_to_dict(ctrl)
        cd["kind"] = "plain"
    if prob.metric.is_constant:
        md = {"constant": prob.metric.constant.tolist()}
    else:
        md = network_to_dict(prob.metric.base)
        md["epsilon"] = float(prob.metric.epsilon)
        md["reshape"] = "row-major"
    return {
        "version": MODEL_VERSION,
        "controller": cd,
        "metric": md,
        "plant": {"name": plant_name(prob.plant), "params": prob.plant.params()},
        "rate": float(prob.rate),
    }


def problem_from_dict(d: dict) -> ContractionProblem:
    try:
        jsonschema.validate(d, load_schema("model"))
    except jsonschema.ValidationError as e:
        raise ModelFormatError(f"model file does not match schema: {e.message}") from e
    try:
        plant = make_plant(d["plant"]["name"], d["plant"].get("params"))
        cd = d["controller"]
        if cd is None:
            ctrl = None
        elif cd.get("kind", "anchored") == "anchored":
            ctrl = ZeroAnchoredBoundedController(network_from_dict(cd), float(cd["output_scale"]))
            if "anchor" in cd:
                cached = np.asarray(cd["anchor"], dtype=np.float64)
                fresh = ctrl.anchor()
                if cached.shape != fresh.shape:
                    raise ModelFormatError(f"anchor has length {cached.size}, controller output is {fresh.size}")
                if np.max(np.abs(cached - fresh)) > ANCHOR_TOLERANCE:
                    log.warning("cached anchor differs from recomputed value by %g", np.max(np.abs(cached - fresh)))
        else:
            ctrl = network_from_dict(cd)
        md = d["metric"]
        if "constant" in md:
            metric = NeuralContractionMetric.constant_metric(md["constant"])
        else:
            if md.get("reshape", "row-major") != "row-major":
                raise ModelFormatError("only row-major metric reshape is supported")
            metric = NeuralContractionMetric(network_from_dict(md), float(md["epsilon"]))
        return ContractionProblem(plant, ctrl, metric, float(d.get("rate", 0.0)))
    except (KeyError, TypeError) as e:
        raise ModelFormatError(f"malformed model file: {e!r}") from e


def dumps(obj) -> str:
    # json writes floats with repr, the shortest round-trip decimal
    return json.dumps(obj, indent=1, allow_nan=False)


def save_model(prob: ContractionProblem, path) -> None:
    Path(path).write_text(dumps(problem_to_dict(prob)))


def load_model(path) -> ContractionProblem:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ModelFormatError(f"{path}: not valid JSON ({e})") from e
    return problem_from_dict(d)


def problem_fingerprint(prob: ContractionProblem) -> str:
    """SHA-256 over the canonical model document (weights, plant parameters, rate)."""
    blob = json.dumps(problem_to_dict(prob), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def certificate_to_dict(cert: DomainCertificate, problem: ContractionProblem | None = None) -> dict:
    def box(b: IntervalVector):
        lo, hi = b.numpy()
        return {"lo": lo.tolist(), "hi": hi.tolist()}

    d = {
        "tool": "contracert",
        "tool_version": __version__,
        "domain": box(cert.domain),
        "all_verified": cert.all_verified,
        "fingerprint": cert.fingerprint,
        "cells": [
            {**box(c.cell), "lambda_max": c.lambda_max, "verified": c.verified, "depth": c.depth} for c in cert.cells
        ],
    }
    uppers = [c.metric_upper for c in cert.cells if math.isfinite(c.metric_upper)]
    if uppers:
        d["metric_upper_bound"] = max(uppers)
    if problem is not None:
        d["plant"] = {"name": plant_name(problem.plant), "params": problem.plant.params()}
        d["rate"] = float(problem.rate)
        d["margin"] = float(problem.margin)
    return d


def save_certificate(cert: DomainCertificate, path, problem=None) -> dict:
    d = certificate_to_dict(cert, problem)
    jsonschema.validate(d, load_schema("certificate"))
    Path(path).write_text(dumps(d))
    return d


def write_csv(path, header, rows, append: bool = False) -> None:
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if not append:
            w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
