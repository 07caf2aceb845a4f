"""Computable terms of the weighted-ensemble generalization bound.

The bound on the target-distribution loss of a weighted ensemble is

    sum_i a_i * emp_loss_i                       (term1)
  + sqrt(ln(1/delta)) * sum_i a_i / sqrt(n_i)    (term2)
  + 1/2 * sum_i a_i * d_i                        (term3)
  + sum_i a_i * nu_i                             (nu_term)

Two pieces cannot be computed from samples. ``d_i`` is a hypothesis-class
divergence; here it is replaced by the L1 distance between label marginals
and labelled as a proxy. ``nu_i`` is an infimum over all hypotheses; it is
taken as a configured constant and flagged as not estimated. The report
therefore prints the measured ensemble loss next to the total and makes no
claim that one bounds the other.

Losses are 0-1 misclassification rates so every term lives in [0, 1].
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .client import argmax_lowest
from .datasets import Dataset
from .errors import ArgumentError, DimensionError
from .zoo import HeterogeneousModel, ModelRegistry


def _check_weights(weights: Sequence[float]) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ArgumentError("weights must be nonnegative and sum to 1")
    return w


def _check_delta(delta: float) -> None:
    if not 0.0 < delta < 1.0:
        raise ArgumentError(f"delta must lie in (0, 1), got {delta}")


def error_rate(model: HeterogeneousModel, data: Dataset) -> float:
    if len(data) == 0:
        raise ArgumentError("empty shard")
    return float(np.mean(argmax_lowest(model.predict_proba(data.features)) != data.labels))


def empirical_loss_term(models: Sequence[HeterogeneousModel], shards: Sequence[Dataset],
                        weights: Sequence[float]) -> float:
    w = _check_weights(weights)
    return float(sum(wi * error_rate(m, s) for wi, m, s in zip(w, models, shards)))


def hoeffding_term(sizes: Sequence[int], weights: Sequence[float], delta: float) -> float:
    """``sqrt(ln(1/delta)) * sum_i w_i / sqrt(n_i)``."""
    _check_delta(delta)
    w = _check_weights(weights)
    n = np.asarray(sizes, dtype=np.float64)
    if np.any(n <= 0):
        raise ArgumentError("shard sizes must be positive")
    return math.sqrt(math.log(1.0 / delta)) * float(np.sum(w / np.sqrt(n)))


def two_sided_hoeffding_terms(sizes: Sequence[int], delta: float) -> np.ndarray:
    """Per-client ``sqrt(ln(2/delta) / (2 n_i))``, the two-sided Hoeffding radius."""
    _check_delta(delta)
    n = np.asarray(sizes, dtype=np.float64)
    return np.sqrt(math.log(2.0 / delta) / (2.0 * n))


def discrepancy_proxy(p, q) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DimensionError(f"marginals differ in length: {p.shape} vs {q.shape}")
    return float(np.abs(p - q).sum())


@dataclass(frozen=True)
class ClientBound:
    client_id: int
    weight: float
    empirical_loss: float
    shard_size: int
    discrepancy: float
    two_sided_term: float
    nu: float


@dataclass
class BoundReport:
    clients: list[ClientBound]
    delta: float
    term1: float
    term2: float
    term3: float
    nu_term: float
    total: float
    measured_lhs: float
    term2_two_sided: float
    nu_estimated: bool = False
    notes: list[str] = field(default_factory=list)


def bound_report(registry: ModelRegistry, shards: Sequence[Dataset], test: Dataset,
                 weights: Sequence[float] | None = None, delta: float = 0.1,
                 nu: float | Sequence[float] = 0.0) -> BoundReport:
    """Evaluate every term for the clients' designated models.

    ``weights`` default to shard sizes normalised to 1.
    """
    _check_delta(delta)
    sizes = [len(s) for s in shards]
    if weights is None:
        weights = np.asarray(sizes, dtype=np.float64) / sum(sizes)
    w = _check_weights(weights)
    if w.size != len(shards):
        raise DimensionError(f"{w.size} weights for {len(shards)} shards")
    nus = np.broadcast_to(np.asarray(nu, dtype=np.float64), w.shape)

    models = [registry.model_for(k) for k in range(len(shards))]
    n_classes = models[0].head.layers[-1].out_dim
    target = test.label_marginal(n_classes)
    two_sided = two_sided_hoeffding_terms(sizes, delta)
    clients = [
        ClientBound(
            client_id=k,
            weight=float(w[k]),
            empirical_loss=error_rate(models[k], shards[k]),
            shard_size=sizes[k],
            discrepancy=discrepancy_proxy(shards[k].label_marginal(n_classes), target),
            two_sided_term=float(two_sided[k]),
            nu=float(nus[k]),
        )
        for k in range(len(shards))
    ]
    term1 = float(sum(c.weight * c.empirical_loss for c in clients))
    term2 = hoeffding_term(sizes, w, delta)
    term3 = 0.5 * float(sum(c.weight * c.discrepancy for c in clients))
    nu_term = float(sum(c.weight * c.nu for c in clients))

    ensemble = np.zeros((len(test), n_classes))
    for wk, model in zip(w, models):
        if wk > 0:
            ensemble += wk * model.predict_proba(test.features)
    measured = float(np.mean(argmax_lowest(ensemble) != test.labels))

    return BoundReport(
        clients=clients, delta=delta, term1=term1, term2=term2, term3=term3, nu_term=nu_term,
        total=term1 + term2 + term3 + nu_term, measured_lhs=measured,
        term2_two_sided=float(np.dot(w, two_sided)),
        notes=[
            "discrepancy d_i is the L1 distance between label marginals (proxy)",
            "nu_i is a configured constant, not estimated",
            "measured loss and total are reported side by side; no inequality is asserted",
        ],
    )


SUMMARY_FIELDS = ("delta", "term1", "term2", "term3", "nu_term", "total", "measured_lhs", "term2_two_sided")


def write_bound_report(report: BoundReport, out_dir: str | os.PathLike) -> tuple[str, str, str]:
    """Write per-client CSV, summary CSV and a text rendering. Returns their paths."""
    os.makedirs(out_dir, exist_ok=True)
    clients_path = os.path.join(out_dir, "bound_clients.csv")
    summary_path = os.path.join(out_dir, "bound_summary.csv")
    text_path = os.path.join(out_dir, "bound_report.txt")
    with open(clients_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["client_id", "weight", "empirical_loss", "shard_size", "discrepancy_proxy",
                         "hoeffding_two_sided", "nu"])
        for c in report.clients:
            writer.writerow([c.client_id, repr(c.weight), repr(c.empirical_loss), c.shard_size,
                             repr(c.discrepancy), repr(c.two_sided_term), repr(c.nu)])
    with open(summary_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["term", "value"])
        for name in SUMMARY_FIELDS:
            writer.writerow([name, repr(float(getattr(report, name)))])
        writer.writerow(["nu_estimated", "false" if not report.nu_estimated else "true"])
    with open(text_path, "w", encoding="utf-8") as fh:
        fh.write(format_bound_report(report))
    return clients_path, summary_path, text_path


def format_bound_report(report: BoundReport) -> str:
    lines = [
        f"Generalization bound diagnostics (delta = {report.delta:g}, {len(report.clients)} clients)",
        f"  empirical loss term      {report.term1:.6f}",
        f"  sample-size term         {report.term2:.6f}   (per-client two-sided form: {report.term2_two_sided:.6f})",
        f"  discrepancy term (proxy) {report.term3:.6f}",
        f"  nu term (not estimated)  {report.nu_term:.6f}",
        f"  total                    {report.total:.6f}",
        f"  measured ensemble loss   {report.measured_lhs:.6f}",
        "",
        "  client  weight    emp_loss  size   d_proxy",
    ]
    for c in report.clients:
        lines.append(f"  {c.client_id:>6}  {c.weight:.4f}    {c.empirical_loss:.4f}  "
                     f"{c.shard_size:>5}  {c.discrepancy:.4f}")
    lines.append("")
    lines.extend(f"  note: {n}" for n in report.notes)
    return "\n".join(lines) + "\n"
