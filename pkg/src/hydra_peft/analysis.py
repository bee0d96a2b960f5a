"""Subspace similarity, PE score, parameter accounting and branch-feature export."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from hydra_peft.adapters import HydraLinear, effective_updates
from hydra_peft.errors import ContractError, DegenerateAdapterError, ShapeError
from hydra_peft.linalg import as_matrix, frobenius_norm_sq, svd
from hydra_peft.model import MicroTransformer

RANK_RTOL = 1e-10
PE_M0 = 1e8


def rank_capacity(s: np.ndarray, rtol: float = RANK_RTOL) -> int:
    """Number of singular values that are non-negligible relative to the largest."""
    if len(s) == 0 or s[0] == 0:
        return 0
    return int(np.sum(s > rtol * s[0]))


def leading_left_vectors(m, count: int, name: str = "matrix") -> np.ndarray:
    m = as_matrix(m, name)
    res = svd(m)
    cap = rank_capacity(res.s)
    if cap == 0:
        raise DegenerateAdapterError(f"{name} has no singular directions (zero matrix)")
    if not 1 <= count <= cap:
        raise ContractError(f"{name}: requested {count} singular directions, only {cap} available")
    return res.u[:, :count]


def subspace_similarity(m, n, i: int, j: int) -> float:
    """||U_m[:, :i]^T U_n[:, :j]||_F^2 / min(i, j), always in [0, 1]."""
    m, n = as_matrix(m, "m"), as_matrix(n, "n")
    if m.shape[0] != n.shape[0]:
        raise ShapeError(f"subspace_similarity: row dimensions differ ({m.shape} vs {n.shape})")
    um = leading_left_vectors(m, i, "m")
    un = leading_left_vectors(n, j, "n")
    return frobenius_norm_sq(um.T @ un) / min(i, j)


@dataclass
class SimilarityGrid:
    values: np.ndarray  # (i_max, j_max); values[i-1, j-1] = phi(W0, M, i, j)
    i_range: range
    j_range: range
    label: str

    def rows(self):
        for i in self.i_range:
            for j in self.j_range:
                yield i, j, float(self.values[i - 1, j - 1])


def similarity_grid(model: MicroTransformer, layer_index: int, which: str = "parallel",
                    i_max_frac: float = 0.10, j_max: int = 2, layer: str = "mlp_out") -> SimilarityGrid:
    """phi(W0, A, i, j) or phi(W0, B W0, i, j) for one adapted layer.

    ``i`` runs over the top ``ceil(i_max_frac * min(d, k))`` directions of W0.
    """
    if which not in ("parallel", "sequential"):
        raise ContractError(f"which must be 'parallel' or 'sequential', got {which!r}")
    name = f"blocks.{layer_index}.{layer}"
    lin = model.linears.get(name)
    if not isinstance(lin, HydraLinear) or not lin.spec.is_trainable:
        raise ContractError(f"layer {name} carries no adapter")
    a, bw0 = effective_updates(lin)
    target = a if which == "parallel" else bw0
    i_max = max(1, math.ceil(i_max_frac * min(lin.w0.shape)))
    uw = leading_left_vectors(lin.w0, i_max, "W0")
    ut = leading_left_vectors(target, j_max, "A" if which == "parallel" else "BW0")
    cross = uw.T @ ut
    values = np.empty((i_max, j_max))
    for i in range(1, i_max + 1):
        for j in range(1, j_max + 1):
            values[i - 1, j - 1] = frobenius_norm_sq(cross[:i, :j]) / min(i, j)
    label = f"{name}: W0 vs {'A' if which == 'parallel' else 'BW0'}"
    return SimilarityGrid(values, range(1, i_max + 1), range(1, j_max + 1), label)


def write_grid_csv(grid: SimilarityGrid, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j", "phi"])
        for i, j, phi in grid.rows():
            w.writerow([i, j, repr(phi)])


@dataclass(frozen=True)
class PeInput:
    accuracy: float
    trainable_params: float
    m0: float = PE_M0

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ContractError(f"accuracy must be a fraction in [0, 1], got {self.accuracy}")
        if self.trainable_params < 0 or self.m0 <= 0:
            raise ContractError("trainable_params must be >= 0 and m0 > 0")


def pe_score(inp: PeInput) -> float:
    """accuracy * exp(-log10(p / M0 + 1))."""
    return inp.accuracy * math.exp(-math.log10(inp.trainable_params / inp.m0 + 1.0))


def param_report(model: MicroTransformer) -> dict:
    counts = model.count_by_role()
    total = sum(counts.values())
    return {
        "adapter_params": counts["adapter"],
        "head_params": counts["head"],
        "frozen_params": counts["frozen"],
        "total": total,
        "trainable_millions": (counts["adapter"] + counts["head"]) / 1e6,
    }


BRANCHES = ("pretrained", "parallel", "sequential")


def export_branch_features(model: MicroTransformer, tokens, path) -> dict:
    """Write [CLS] outputs of the last adapted layer, one row per (example, branch).

    The first line is a ``#`` record holding ``b0`` and ``B b0``: the pretrained
    row already contains ``b0`` and the sequential row ``B b0``, so the three rows
    of an example sum to the layer output.
    """
    if not model.adapted_layer_names():
        raise ContractError("model has no adapted layer to export")
    feats = model.forward(tokens, branch_features=True).branch_features
    lin = model.linears[feats["layer"]]
    big_b = lin.spec.scaling * (lin.b_up @ lin.b_down) if lin.spec.sequential_rank else None
    bias = {
        "layer": feats["layer"],
        "b0": lin.b0.tolist(),
        "Bb0": (big_b @ lin.b0).tolist() if big_b is not None else [0.0] * len(lin.b0),
    }
    d = feats["output"].shape[1]
    path = Path(path)
    with open(path, "w", newline="") as fh:
        fh.write("# " + json.dumps(bias) + "\n")
        w = csv.writer(fh)
        w.writerow(["example_id", "branch"] + [f"f_{c}" for c in range(d)])
        for ex in range(feats["output"].shape[0]):
            for br in BRANCHES:
                w.writerow([ex, br] + [repr(float(v)) for v in feats[br][ex]])
    return feats


def read_branch_features(path) -> tuple[dict, list[tuple[int, str, np.ndarray]]]:
    with open(path, newline="") as fh:
        first = fh.readline()
        if not first.startswith("# "):
            raise ContractError(f"{path}: missing bias header record")
        bias = json.loads(first[2:])
        reader = csv.reader(fh)
        next(reader)
        rows = [(int(r[0]), r[1], np.array([float(v) for v in r[2:]])) for r in reader if r]
    return bias, rows
