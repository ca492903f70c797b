"""Interpretation by projection onto the training set.

Each single-variable prototype is represented by the training sample whose
encoding lies nearest to it. Each multivariable prototype is reported as its
raw similarity vector, split into per-variable blocks, together with the
class the final head assigns to it.

Report schema (``REPORT_SCHEMA``), JSON object:

- ``schema``: int version
- ``class_names``: list of str
- ``boundaries``: start index of each variable block in the multivariable vector
- ``single``: list over prototypes of {variable, prototype, sample_index,
  label, distance, series}
- ``multi``: list over prototypes of {index, vector, blocks: [{variable,
  argmax, value}], dominant_class, dominant_class_name}

Encoding tables (``encodings_var<k>.csv``): ``sample_index,label,e0,...``.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from .dataset import Dataset
from .errors import ContractError
from .prototype import SIM_EPS
from .training import Model, encode_dataset, multivariable_array
from .tensor import softmax
from .tsfile import format_number

REPORT_SCHEMA = 1


@dataclass
class Projection:
    variable: int
    prototype: int
    sample_index: int
    label: int
    distance: float
    series: list[float]


@dataclass
class BlockMax:
    variable: int
    argmax: int  # index into the full multivariable vector
    value: float


@dataclass
class MultiPrototype:
    index: int
    vector: list[float]
    blocks: list[BlockMax]
    dominant_class: int
    dominant_class_name: str


@dataclass
class InterpretationReport:
    class_names: list[str]
    boundaries: list[int]
    single: list[Projection]
    multi: list[MultiPrototype]

    def to_dict(self) -> dict:
        return {"schema": REPORT_SCHEMA, **asdict(self)}

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")


def nearest(points: np.ndarray, query: np.ndarray) -> tuple[int, float]:
    """Index of the row of ``points`` nearest to ``query``; lowest index on ties."""
    dist = np.sqrt(((points - query) ** 2).sum(axis=1))
    i = int(np.argmin(dist))
    return i, float(dist[i])


def project_prototypes(model: Model, train: Dataset) -> list[Projection]:
    if not (model.stages[0] and model.stages[1]):
        raise ContractError("projection needs stages 1 and 2 complete")
    if len(train) == 0:
        raise ContractError("cannot project onto an empty training set")
    encodings = encode_dataset(model, model.prepare(train.X))
    out = []
    for k, layer in enumerate(model.single):
        for j, p in enumerate(layer.prototypes.data):
            i, dist = nearest(encodings[k], p)
            out.append(Projection(k, j, i, int(train.y[i]), dist, train.X[i, k].tolist()))
    return out


def dominant_class(model: Model, j: int) -> int:
    """Class the final head predicts for a similarity vector peaked at prototype j.

    The input is 1/eps (the largest attainable similarity) at j and zero
    elsewhere.
    """
    s = np.zeros(model.multi.count)
    s[j] = 1.0 / SIM_EPS
    return int(np.argmax(softmax(model.head.logits(s[None]))[0]))


def block_maxima(vector: np.ndarray, boundaries: list[int]) -> list[BlockMax]:
    edges = list(boundaries) + [vector.size]
    out = []
    for k in range(len(boundaries)):
        lo, hi = edges[k], edges[k + 1]
        a = lo + int(np.argmax(vector[lo:hi]))
        out.append(BlockMax(k, a, float(vector[a])))
    return out


def multivariable_report(model: Model) -> list[MultiPrototype]:
    if not model.complete:
        raise ContractError("multivariable report needs all three stages complete")
    bounds = model.boundaries
    out = []
    for j, vec in enumerate(model.multi.prototypes.data):
        c = dominant_class(model, j)
        out.append(MultiPrototype(j, vec.tolist(), block_maxima(vec, bounds), c, model.class_names[c]))
    return out


def build_report(model: Model, train: Dataset) -> InterpretationReport:
    return InterpretationReport(
        class_names=list(model.class_names),
        boundaries=model.boundaries,
        single=project_prototypes(model, train),
        multi=multivariable_report(model),
    )


def export_encodings(model: Model, data: Dataset, out_dir) -> list[str]:
    """Write one CSV of encodings per variable; returns the file paths."""
    if not model.stages[0]:
        raise ContractError("encodings need stage 1 complete")
    encodings = encode_dataset(model, model.prepare(data.X))
    paths = []
    for k, E in enumerate(encodings):
        path = os.path.join(out_dir, f"encodings_var{k}.csv")
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("sample_index,label," + ",".join(f"e{i}" for i in range(E.shape[1])) + "\n")
            for i, row in enumerate(E):
                fh.write(f"{i},{int(data.y[i])}," + ",".join(format_number(v) for v in row) + "\n")
        paths.append(path)
    return paths


def multivariable_matrix(model: Model) -> np.ndarray:
    if model.multi is None:
        raise ContractError("model has no multivariable layer")
    return model.multi.prototypes.data.copy()


def representations(model: Model, data: Dataset) -> np.ndarray:
    """Multivariable representations of ``data`` (count, sum n_k)."""
    return multivariable_array(model, encode_dataset(model, model.prepare(data.X)))
