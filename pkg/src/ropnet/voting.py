"""Per-eye aggregation of image predictions into one treatment decision."""

from __future__ import annotations

import csv
import math
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .errors import DataError, ParameterError
from .training import THRESHOLD, MetricsReport, load_images, predict

GROUP_HEADER = ("patient_id", "eye", "n_images", "n_positive_votes", "decision", "label")


@dataclass
class GroupPrediction:
    patient_id: str | None
    eye: str | None
    probs: list
    votes: list
    decision: int
    tie_broken: bool
    label: int | None = None


def vote(probs, threshold=THRESHOLD, tie_rule="positive", method="majority"):
    """Majority of thresholded votes; an exact tie resolves to ``tie_rule``.

    ``method="mean"`` instead thresholds the mean probability (comparison mode).
    """
    probs = [float(p) for p in probs]
    if not probs:
        raise ParameterError("cannot vote on an empty list of predictions")
    if any(not 0 <= p <= 1 for p in probs):
        raise ParameterError("probabilities must lie in [0, 1]")
    if tie_rule not in ("positive", "negative"):
        raise ParameterError(f"tie_rule must be 'positive' or 'negative', got {tie_rule!r}")
    votes = [int(p >= threshold) for p in probs]
    tie = False
    if method == "majority":
        pos, neg = sum(votes), len(votes) - sum(votes)
        if pos == neg:
            tie = True
            decision = int(tie_rule == "positive")
        else:
            decision = int(pos > neg)
    elif method == "mean":
        decision = int(float(np.mean(probs)) >= threshold)
    else:
        raise ParameterError(f"unknown voting method {method!r}")
    return GroupPrediction(None, None, probs, votes, decision, tie)


def group_predictions(records, probs, threshold=THRESHOLD, tie_rule="positive", method="majority"):
    """Vote within each (patient, eye) group; groups keep first-seen order."""
    groups = OrderedDict()
    for rec, p in zip(records, probs):
        groups.setdefault(rec.group, []).append((rec, p))
    out = []
    for (pid, eye), members in groups.items():
        labels = {rec.label for rec, _ in members}
        if len(labels) != 1:
            raise DataError(f"group ({pid}, {eye}) has inconsistent labels {sorted(labels)}")
        g = vote([p for _, p in members], threshold, tie_rule, method)
        g.patient_id, g.eye, g.label = pid, eye, labels.pop()
        out.append(g)
    return out


def evaluate_grouped(spec, params, manifest, split="test", threshold=THRESHOLD, tie_rule="positive",
                     method="majority"):
    """Eye-level metrics plus per-group detail."""
    records = manifest.records if split == "all" else manifest.subset(split)
    if not records:
        raise DataError(f"manifest has no rows in split {split!r}")
    manifest.require_valid()
    probs = predict(spec, params, load_images(records, spec.input_shape[0]))
    groups = group_predictions(records, probs, threshold, tie_rule, method)
    report = MetricsReport.from_predictions([g.label for g in groups], [g.decision for g in groups])
    return report, groups


def export_groups(groups, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(GROUP_HEADER)
        for g in groups:
            writer.writerow([g.patient_id, g.eye, len(g.votes), sum(g.votes), g.decision, g.label])


def binomial_majority_error(error_rate, k):
    """P(majority of ``k`` independent votes wrong), ties counted as wrong."""
    return sum(math.comb(k, j) * error_rate ** j * (1 - error_rate) ** (k - j) for j in range(k // 2 + 1, k + 1)) + (
        math.comb(k, k // 2) * error_rate ** (k // 2) * (1 - error_rate) ** (k // 2) if k % 2 == 0 else 0.0
    )
