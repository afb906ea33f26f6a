"""
JSON envelopes for fitted models and the CSV / JSON writers used by the CLI.

Every document carries "schema": "kdarek/v1" and a "kind" tag. Tensors are
stored as nested lists of float64, which round-trips exactly. Derived knot data
(features, hidden knots, residuals, GP factors) is stored too and checked against
the loaded weights on decode.
"""

import csv
import json
import logging
from pathlib import Path

import numpy as np
import torch

from kdarek.baselines import (
    DarekEstimator,
    DarekModel,
    EnsembleModel,
    GpHyper,
    GpModel,
    gp_fit,
)
from kdarek.bounds import (
    KdarekEstimator,
    KnotTriple,
    LipschitzBudget,
    compute_feature_knots,
    compute_hidden_knots,
    compute_residuals,
)
from kdarek.interp import LipschitzOrderK
from kdarek.errors import ModelFileError, OutputError
from kdarek.netcore import DTYPE, KdarekModel

logger = logging.getLogger("kdarek.serialization")

SCHEMA = "kdarek/v1"


# ------------------------------- WRITERS --------------------------------- #

def _cell(value):
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return "" if value is None else str(value)


def write_csv(path, header, rows):
    """`,` delimiter, header row, LF line endings, shortest round-trip floats."""
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(header)
            writer.writerows([_cell(v) for v in row] for row in rows)
    except OSError as e:
        logger.error(f"Failed to write {path}: {e}")
        raise OutputError(f"Cannot write {path}: {e}") from e
    return str(path)


def write_json(path, payload):
    document = {"schema": SCHEMA, **payload}
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(document, f, indent=4, ensure_ascii=False)
            f.write("\n")
    except OSError as e:
        logger.error(f"Failed to write {path}: {e}")
        raise OutputError(f"Cannot write {path}: {e}") from e
    return str(path)


# ------------------------------- ENCODE ---------------------------------- #

def _state(module):
    return {name: tensor.tolist() for name, tensor in module.state_dict().items()}


def _load_state(module, state):
    module.load_state_dict({name: torch.tensor(values, dtype=DTYPE) for name, values in state.items()})


def _triple(triple):
    return {
        "inputs": triple.inputs.tolist(),
        "targets": triple.targets.tolist(),
        "sample_ids": triple.sample_ids.tolist(),
        "input_order": triple.input_order.tolist(),
    }


def _budget(budget):
    return {
        "lipschitz_f": budget.lipschitz_f,
        "input_dim": budget.input_dim,
        "n_layers": budget.n_layers,
        "n_splines": budget.n_splines,
        "layer_cap": budget.layer_cap,
        "mlp_lipschitz": budget.mlp_lipschitz,
        "spline_lipschitz": budget.spline_lipschitz,
        "lipschitz_kp1": budget.higher_order.value,
        "order": budget.higher_order.order - 1,
    }


def _darek_dims(model):
    return {"input_dim": model.input_dim, "hidden_dim": model.hidden_dim, "output_dim": model.output_dim,
            "order": model.order, "intervals": model.layer1.intervals}


def encode_model(fitted):
    if isinstance(fitted, KdarekEstimator):
        m = fitted.model
        return {
            "kind": "kdarek",
            "dims": {"input_dim": m.input_dim, "widths": m.widths, "output_dim": m.output_dim,
                     "order": m.order, "intervals": m.spline_block.intervals},
            "caps": m.mlps[0].caps,
            "state": _state(m),
            "knots": {**_triple(fitted.triple),
                      "features": fitted.triple.features.tolist(),
                      "sorted_features": fitted.triple.sorted_features.tolist(),
                      "permutations": fitted.triple.permutations.tolist()},
            "residuals": fitted.residuals.values.tolist(),
            "budget": _budget(fitted.budget),
        }
    if isinstance(fitted, DarekEstimator):
        return {
            "kind": "darek",
            "dims": _darek_dims(fitted.model),
            "state": _state(fitted.model),
            "knots": _triple(fitted.knots.triple),
            "hidden": {"values": fitted.knots.hidden.tolist(),
                       "sorted": fitted.knots.sorted_hidden.tolist(),
                       "permutations": fitted.knots.permutations.tolist(),
                       "residuals": fitted.knots.residuals.values.tolist()},
            "budget": _budget(fitted.budget),
        }
    if isinstance(fitted, GpModel):
        return {
            "kind": "gp",
            "hyper": fitted.hyper.model_dump(),
            "inputs": fitted.inputs.tolist(),
            "targets": fitted.targets.tolist(),
            "chol": fitted.chol.tolist(),
            "alpha": fitted.alpha.tolist(),
            "jitter": fitted.jitter,
        }
    if isinstance(fitted, EnsembleModel):
        return {
            "kind": "ensemble",
            "dims": _darek_dims(fitted.members[0]),
            "seeds": list(fitted.seeds),
            "members": [_state(member) for member in fitted.members],
        }
    raise TypeError(f"Cannot serialize {type(fitted).__name__}")


# ------------------------------- DECODE ---------------------------------- #

def _read_triple(data):
    return KnotTriple(
        inputs=np.array(data["inputs"], dtype=float),
        targets=np.array(data["targets"], dtype=float),
        sample_ids=np.array(data["sample_ids"], dtype=int),
        input_order=np.array(data["input_order"], dtype=int),
    )


def _read_budget(data):
    return LipschitzBudget(
        lipschitz_f=float(data["lipschitz_f"]),
        input_dim=int(data["input_dim"]),
        n_layers=int(data["n_layers"]),
        n_splines=int(data["n_splines"]),
        layer_cap=float(data["layer_cap"]),
        mlp_lipschitz=float(data["mlp_lipschitz"]),
        spline_lipschitz=float(data["spline_lipschitz"]),
        higher_order=LipschitzOrderK(order=int(data["order"]) + 1, value=float(data["lipschitz_kp1"])),
    )


def _verify(kind, field, stored, recomputed):
    """Stored knot data must agree with what the loaded weights produce."""
    stored = np.asarray(stored, dtype=float)
    recomputed = np.asarray(recomputed, dtype=float)
    if stored.shape != recomputed.shape or not np.allclose(stored, recomputed, rtol=1e-9, atol=1e-12):
        gap = np.max(np.abs(stored - recomputed)) if stored.shape == recomputed.shape else "shape"
        raise ModelFileError(f"{kind} model file: stored {field} disagree with the weights (gap {gap})")
    return stored


def _darek_model(dims, state):
    model = DarekModel(dims["input_dim"], dims["hidden_dim"], dims["output_dim"], dims["order"],
                       dims["intervals"])
    _load_state(model, state)
    return model


def decode_model(document):
    if document.get("schema") != SCHEMA:
        raise ModelFileError(f"Unsupported schema {document.get('schema')!r} (expected {SCHEMA})")
    kind = document.get("kind")

    if kind == "kdarek":
        dims = document["dims"]
        model = KdarekModel(dims["input_dim"], dims["widths"], dims["output_dim"], document["caps"],
                            dims["order"], dims["intervals"])
        _load_state(model, document["state"])
        knots = document["knots"]
        triple = compute_feature_knots(model, _read_triple(knots))
        _verify(kind, "features", knots["features"], triple.features)
        _verify(kind, "sorted features", knots["sorted_features"], triple.sorted_features)
        _verify(kind, "permutations", knots["permutations"], triple.permutations)
        residuals = compute_residuals(model, triple)
        _verify(kind, "residuals", document["residuals"], residuals.values)
        return KdarekEstimator(model=model, triple=triple, residuals=residuals,
                               budget=_read_budget(document["budget"]))
    if kind == "darek":
        model = _darek_model(document["dims"], document["state"])
        knots = compute_hidden_knots(model, _read_triple(document["knots"]))
        hidden = document["hidden"]
        _verify(kind, "hidden knots", hidden["values"], knots.hidden)
        _verify(kind, "sorted hidden knots", hidden["sorted"], knots.sorted_hidden)
        _verify(kind, "permutations", hidden["permutations"], knots.permutations)
        _verify(kind, "residuals", hidden["residuals"], knots.residuals.values)
        return DarekEstimator(model=model, knots=knots, budget=_read_budget(document["budget"]))
    if kind == "gp":
        gp = gp_fit(np.array(document["inputs"]), np.array(document["targets"]), GpHyper(**document["hyper"]))
        _verify(kind, "jitter", document["jitter"], gp.jitter)
        _verify(kind, "Cholesky factor", document["chol"], gp.chol)
        _verify(kind, "weights", document["alpha"], gp.alpha)
        return gp
    if kind == "ensemble":
        members = [_darek_model(document["dims"], state) for state in document["members"]]
        return EnsembleModel(members=members, seeds=list(document["seeds"]))
    raise ModelFileError(f"Unknown model kind {kind!r}")


def save_model(path, fitted):
    return write_json(path, encode_model(fitted))


def load_model(path):
    try:
        with open(path, encoding="utf-8") as f:
            document = json.load(f)
    except OSError as e:
        raise ModelFileError(f"Cannot read model file {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ModelFileError(f"{path}:{e.lineno}:{e.colno}: corrupt model file ({e.msg})") from e
    if not isinstance(document, dict):
        raise ModelFileError(f"{path}: model file must hold a JSON object")
    try:
        return decode_model(document)
    except ModelFileError:
        raise
    except (KeyError, TypeError, ValueError, RuntimeError) as e:
        raise ModelFileError(f"{path}: malformed {document.get('kind', 'model')} document ({e})") from e
