"""Structured sparsity sets (filter / channel / kernel) and their projections."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

FILTER = "filter"
CHANNEL = "channel"
KERNEL = "kernel"
KINDS = (FILTER, CHANNEL, KERNEL)

# axes reduced to obtain one score per group
_GROUP_AXES = {FILTER: (1, 2, 3), CHANNEL: (0, 2, 3), KERNEL: (2, 3)}


class ConstraintError(ValueError):
    pass


def group_count(shape, kind: str) -> int:
    f, c = shape[0], shape[1]
    return {FILTER: f, CHANNEL: c, KERNEL: f * c}[kind]


@dataclass(frozen=True)
class SparsityConstraint:
    """At most ``budget`` nonzero groups of type ``kind`` in one layer.

    ``layer`` is only used when constraints are attached to a model.
    """

    kind: str
    budget: int
    layer: Optional[int] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConstraintError(f"unknown sparsity kind {self.kind!r}")
        if int(self.budget) < 1:
            raise ConstraintError(f"budget must be >= 1, got {self.budget}")

    @classmethod
    def from_ratio(cls, kind: str, keep_ratio: float, shape, layer=None) -> "SparsityConstraint":
        if not 0.0 < keep_ratio <= 1.0:
            raise ConstraintError(f"keep_ratio must be in (0, 1], got {keep_ratio}")
        return cls(kind, max(1, math.ceil(keep_ratio * group_count(shape, kind))), layer)

    def check(self, shape) -> None:
        n = group_count(shape, self.kind)
        if self.budget > n:
            where = "" if self.layer is None else f"layer {self.layer}: "
            raise ConstraintError(
                f"{where}{self.kind} budget {self.budget} exceeds the {n} groups of shape {tuple(shape)}"
            )

    def project(self, w: np.ndarray) -> np.ndarray:
        return project(w, self)

    def is_feasible(self, w: np.ndarray) -> bool:
        return is_feasible(w, self)

    def to_dict(self) -> dict:
        return {"layer": self.layer, "kind": self.kind, "budget": self.budget}


def group_scores(w: np.ndarray, kind: str) -> np.ndarray:
    """Squared Frobenius norm of every group slice.

    Returns shape ``(F,)``, ``(C,)`` or ``(F, C)`` depending on ``kind``.
    """
    w = np.asarray(w, dtype=np.float64)
    return np.square(w).sum(axis=_GROUP_AXES[kind])


def nonzero_groups(w: np.ndarray, kind: str) -> np.ndarray:
    return (np.asarray(w) != 0).any(axis=_GROUP_AXES[kind])


def is_feasible(w: np.ndarray, c: SparsityConstraint) -> bool:
    c.check(w.shape)
    return int(nonzero_groups(w, c.kind).sum()) <= c.budget


def keep_groups(scores: np.ndarray, budget: int) -> np.ndarray:
    """Boolean mask of the ``budget`` largest scores; ties go to the lower index."""
    flat = scores.ravel()
    # stable sort on the negated score keeps lower indices first among equals
    order = np.argsort(-flat, kind="stable")
    keep = np.zeros(flat.size, dtype=bool)
    keep[order[:budget]] = True
    return keep.reshape(scores.shape)


def _expand(group_mask: np.ndarray, kind: str, shape) -> np.ndarray:
    if kind == FILTER:
        m = group_mask[:, None, None, None]
    elif kind == CHANNEL:
        m = group_mask[None, :, None, None]
    else:
        m = group_mask[:, :, None, None]
    return np.broadcast_to(m, shape)


def keep_mask(w: np.ndarray, c: SparsityConstraint) -> np.ndarray:
    """Element mask of the groups retained by ``project(w, c)``."""
    c.check(w.shape)
    groups = keep_groups(group_scores(w, c.kind), c.budget)
    return _expand(groups, c.kind, w.shape).copy()


def project(w: np.ndarray, c: SparsityConstraint) -> np.ndarray:
    """Euclidean projection onto the set of tensors with <= budget nonzero groups."""
    w = np.asarray(w, dtype=np.float64)
    return np.where(keep_mask(w, c), w, 0.0)


def combined_mask(w: np.ndarray, constraints: Sequence[SparsityConstraint]) -> np.ndarray:
    """AND of the independent keep-masks of every constraint."""
    mask = np.ones(w.shape, dtype=bool)
    for c in constraints:
        mask &= keep_mask(w, c)
    return mask


def constraints_by_layer(constraints, n_layers: int) -> List[List[SparsityConstraint]]:
    out: List[List[SparsityConstraint]] = [[] for _ in range(n_layers)]
    for c in constraints:
        if c.layer is None or not 0 <= c.layer < n_layers:
            raise ConstraintError(f"constraint {c} does not name a valid layer (0..{n_layers - 1})")
        out[c.layer].append(c)
    return out


def parse_constraints(entries, model) -> List[SparsityConstraint]:
    """Build constraints from config entries ``{layer, kind, budget|keep_ratio}``."""
    out = []
    for e in entries:
        layer = int(e["layer"])
        if not 0 <= layer < model.num_layers:
            raise ConstraintError(f"layer {layer} does not exist (model has {model.num_layers})")
        shape = model.layers[layer].weights.shape
        if "budget" in e:
            c = SparsityConstraint(e["kind"], int(e["budget"]), layer)
        elif "keep_ratio" in e:
            c = SparsityConstraint.from_ratio(e["kind"], float(e["keep_ratio"]), shape, layer)
        else:
            raise ConstraintError(f"constraint for layer {layer} needs 'budget' or 'keep_ratio'")
        c.check(shape)
        out.append(c)
    return out
