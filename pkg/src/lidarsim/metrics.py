"""Sim-vs-real fidelity metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Iterable

import numpy as np

from .errors import FormatError, InputError
from .rng import STREAM_RANDOM_DROP, bernoulli_grid


@dataclass(frozen=True)
class AgreementSets:
    """Ground-truth label ids detected (+) / missed (-) on real (R) and simulated (S) data."""

    R_plus: frozenset
    R_minus: frozenset
    S_plus: frozenset
    S_minus: frozenset

    def __init__(self, R_plus: Iterable[Hashable], R_minus: Iterable[Hashable],
                 S_plus: Iterable[Hashable], S_minus: Iterable[Hashable]):
        object.__setattr__(self, "R_plus", frozenset(R_plus))
        object.__setattr__(self, "R_minus", frozenset(R_minus))
        object.__setattr__(self, "S_plus", frozenset(S_plus))
        object.__setattr__(self, "S_minus", frozenset(S_minus))

    def validate(self) -> None:
        if self.R_plus & self.R_minus:
            raise InputError("a label cannot be both detected and missed on real data")
        if self.S_plus & self.S_minus:
            raise InputError("a label cannot be both detected and missed on simulated data")
        if (self.R_plus | self.R_minus) != (self.S_plus | self.S_minus):
            raise InputError("real and simulated label universes differ")

    @classmethod
    def from_json(cls, doc: dict) -> "AgreementSets":
        try:
            return cls(doc["R_plus"], doc["R_minus"], doc["S_plus"], doc["S_minus"])
        except (KeyError, TypeError) as e:
            raise FormatError(f"bad agreement sets: {e}") from e

    @classmethod
    def load(cls, path) -> "AgreementSets":
        try:
            return cls.from_json(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as e:
            raise FormatError(f"{path}: {e}") from e


def detection_agreement(sets: AgreementSets) -> float:
    """Fraction of labels whose detected/missed outcome is the same on real and sim."""
    sets.validate()
    universe = sets.R_plus | sets.R_minus
    if not universe:
        return 1.0
    agree = len(sets.R_plus & sets.S_plus) + len(sets.R_minus & sets.S_minus)
    return agree / len(universe)


def point_count_ratio(sim_count: int, real_count: int) -> float:
    if sim_count <= 0:
        raise InputError("sim_count must be positive")
    return real_count / sim_count


def occupancy_agreement(sim_mask: np.ndarray, real_mask: np.ndarray) -> tuple[float, float, float]:
    """(precision, recall, IoU) of the simulated returns against the real ones."""
    s = np.asarray(sim_mask).astype(bool)
    r = np.asarray(real_mask).astype(bool)
    if s.shape != r.shape:
        raise InputError(f"mask shapes differ: {s.shape} vs {r.shape}")
    tp = int(np.count_nonzero(s & r))
    ns, nr = int(s.sum()), int(r.sum())
    union = int(np.count_nonzero(s | r))
    if union == 0:
        return 1.0, 1.0, 1.0
    precision = tp / ns if ns else 0.0
    recall = tp / nr if nr else 0.0
    return precision, recall, tp / union


def random_raydrop(occupancy: np.ndarray, rate: float, seed: int, threads: int = 1) -> np.ndarray:
    """Keep each occupied cell with probability 1 - rate."""
    if not 0.0 <= rate <= 1.0:
        raise InputError("rate must lie in [0, 1]")
    occ = np.asarray(occupancy) != 0
    keep = bernoulli_grid(np.where(occ, 1.0 - rate, 0.0), seed, STREAM_RANDOM_DROP, threads)
    return keep & occ.astype(np.uint8)


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Area under the ROC curve via average ranks (ties count half)."""
    from scipy.stats import rankdata

    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise InputError("AUC needs both classes")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["sim_count", "real_count", "point_count_ratio", "occupancy"],
    "properties": {
        "sim_count": {"type": "integer", "minimum": 0},
        "real_count": {"type": "integer", "minimum": 0},
        "point_count_ratio": {"type": "number", "minimum": 0},
        "occupancy": {
            "type": "object",
            "required": ["precision", "recall", "iou"],
            "properties": {k: {"type": "number", "minimum": 0, "maximum": 1} for k in ("precision", "recall", "iou")},
            "additionalProperties": False,
        },
        "detection_agreement": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
    },
    "additionalProperties": False,
}


def evaluation_report(sim_mask: np.ndarray, real_mask: np.ndarray, sim_count: int, real_count: int,
                      sets: AgreementSets | None = None) -> dict:
    p, r, iou = occupancy_agreement(sim_mask, real_mask)
    return {
        "sim_count": int(sim_count),
        "real_count": int(real_count),
        "point_count_ratio": point_count_ratio(sim_count, real_count),
        "occupancy": {"precision": p, "recall": r, "iou": iou},
        "detection_agreement": None if sets is None else detection_agreement(sets),
    }
