"""Metrics, cross-seed aggregation, block-wise probing, and report tables.

F1 (binary, positive class = screening-positive) and RMSE are computed in
plain sequential arithmetic so results are reproducible and match
brute-force oracles exactly. Reports are emitted as aligned text, CSV, and
JSON with fixed formatting (F1 to 3 decimals, RMSE to 2), mirroring the
block-grid and transfer-table layouts used in the experiment write-ups.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path


def f1_score(predictions, labels, positive: bool = True) -> float:
    """2TP / (2TP + FP + FN); 0.0 when the denominator is 0.

    The zero-denominator convention (no positives anywhere) is reported as
    0 and flagged in report metadata when triggered.
    """
    if len(predictions) != len(labels):
        raise ValueError(f"length mismatch: {len(predictions)} vs {len(labels)}")
    if len(predictions) == 0:
        raise ValueError("empty inputs")
    tp = fp = fn = 0
    for pred, lab in zip(predictions, labels):
        p = bool(pred) == positive
        t = bool(lab) == positive
        if p and t:
            tp += 1
        elif p and not t:
            fp += 1
        elif t and not p:
            fn += 1
    denom = 2 * tp + fp + fn
    if denom == 0:
        return 0.0
    return 2 * tp / denom


def rmse(predictions, targets) -> float:
    """Root mean squared error, sequential accumulation."""
    if len(predictions) != len(targets):
        raise ValueError(f"length mismatch: {len(predictions)} vs {len(targets)}")
    if len(predictions) == 0:
        raise ValueError("empty inputs")
    total = 0.0
    for p, t in zip(predictions, targets):
        diff = float(p) - float(t)
        total += diff * diff
    return math.sqrt(total / len(predictions))


def population_std(values) -> float:
    mean = sum(values) / len(values)
    return math.sqrt(sum((v - mean) ** 2 for v in values) / len(values))


@dataclass
class SeedAggregate:
    """Cross-seed summary. F1 uses mean/max/population-std; RMSE mean/min."""

    f1_avg: float | None = None
    f1_max: float | None = None
    f1_std: float | None = None
    rmse_avg: float | None = None
    rmse_min: float | None = None

    def to_json(self) -> dict:
        return {
            "f1_avg": self.f1_avg,
            "f1_max": self.f1_max,
            "f1_std": self.f1_std,
            "rmse_avg": self.rmse_avg,
            "rmse_min": self.rmse_min,
        }


def aggregate_seeds(results) -> SeedAggregate:
    """Aggregate per-seed results (anything with test_f1/test_rmse attrs)."""
    if not results:
        raise ValueError("no results to aggregate")
    f1s = [r.test_f1 for r in results]
    rmses = [r.test_rmse for r in results]
    if any(v is None for v in f1s) and any(v is not None for v in f1s):
        raise ValueError("inconsistent F1 presence across seeds")
    if any(v is None for v in rmses) and any(v is not None for v in rmses):
        raise ValueError("inconsistent RMSE presence across seeds")
    agg = SeedAggregate()
    if f1s[0] is not None:
        agg.f1_avg = sum(f1s) / len(f1s)
        agg.f1_max = max(f1s)
        agg.f1_std = population_std(f1s)
    if rmses[0] is not None:
        agg.rmse_avg = sum(rmses) / len(rmses)
        agg.rmse_min = min(rmses)
    return agg


@dataclass
class BlockProbeResult:
    model_tag: str
    block_index: int | str  # block number or "Weighted"
    f1_avg: float
    f1_max: float
    f1_std: float

    def to_json(self) -> dict:
        return {
            "model_tag": self.model_tag,
            "block_index": self.block_index,
            "f1_avg": self.f1_avg,
            "f1_max": self.f1_max,
            "f1_std": self.f1_std,
        }


@dataclass
class TransferRow:
    """One row of the transfer table: which tasks trained, test metrics."""

    uses_ad: bool
    uses_dep: bool
    f1_avg: float | None = None
    f1_max: float | None = None
    rmse_avg: float | None = None
    rmse_min: float | None = None

    def to_json(self) -> dict:
        return {
            "uses_ad": self.uses_ad,
            "uses_dep": self.uses_dep,
            "f1_avg": self.f1_avg,
            "f1_max": self.f1_max,
            "rmse_avg": self.rmse_avg,
            "rmse_min": self.rmse_min,
        }


def _f1_cell(value: float | None) -> str:
    return "/" if value is None else f"{value:.3f}"


def _rmse_cell(value: float | None) -> str:
    return "/" if value is None else f"{value:.2f}"


def _align(rows: list[list[str]]) -> str:
    widths = [max(len(r[c]) for r in rows) for c in range(len(rows[0]))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
    return "\n".join(lines) + "\n"


def render_blockwise_txt(rows: list[BlockProbeResult]) -> str:
    table = [["Layer", "F1-avg", "F1-max", "F1-std"]]
    for r in rows:
        table.append(
            [str(r.block_index), f"{r.f1_avg:.3f}", f"{r.f1_max:.3f}", f"{r.f1_std:.3f}"]
        )
    return _align(table)


def render_blockwise_csv(rows: list[BlockProbeResult]) -> str:
    lines = ["layer,f1_avg,f1_max,f1_std"]
    for r in rows:
        lines.append(f"{r.block_index},{r.f1_avg:.3f},{r.f1_max:.3f},{r.f1_std:.3f}")
    return "\n".join(lines) + "\n"


def render_transfer_txt(rows: list[TransferRow]) -> str:
    table = [["AD", "Dep", "F1-avg", "F1-max", "RMSE-avg", "RMSE-min"]]
    for r in rows:
        table.append(
            [
                "yes" if r.uses_ad else "-",
                "yes" if r.uses_dep else "-",
                _f1_cell(r.f1_avg),
                _f1_cell(r.f1_max),
                _rmse_cell(r.rmse_avg),
                _rmse_cell(r.rmse_min),
            ]
        )
    return _align(table)


def render_transfer_csv(rows: list[TransferRow]) -> str:
    lines = ["ad,dep,f1_avg,f1_max,rmse_avg,rmse_min"]
    for r in rows:
        cells = [
            "yes" if r.uses_ad else "",
            "yes" if r.uses_dep else "",
            "" if r.f1_avg is None else f"{r.f1_avg:.3f}",
            "" if r.f1_max is None else f"{r.f1_max:.3f}",
            "" if r.rmse_avg is None else f"{r.rmse_avg:.2f}",
            "" if r.rmse_min is None else f"{r.rmse_min:.2f}",
        ]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def report_self_check(rows: list[BlockProbeResult] | list[TransferRow]) -> list[str]:
    """Sanity invariants embedded in every emitted report."""
    problems = []
    for r in rows:
        f1_avg = getattr(r, "f1_avg", None)
        f1_max = getattr(r, "f1_max", None)
        f1_std = getattr(r, "f1_std", None)
        tag = getattr(r, "block_index", None) or "row"
        if f1_avg is not None and f1_max is not None and f1_max < f1_avg:
            problems.append(f"{tag}: f1_max {f1_max} < f1_avg {f1_avg}")
        if f1_std is not None and f1_std < 0:
            problems.append(f"{tag}: negative f1_std")
        if f1_avg is not None and not 0 <= f1_avg <= 1:
            problems.append(f"{tag}: f1_avg outside [0,1]")
        rmse_avg = getattr(r, "rmse_avg", None)
        rmse_min = getattr(r, "rmse_min", None)
        if rmse_avg is not None and rmse_min is not None and rmse_min > rmse_avg:
            problems.append(f"{tag}: rmse_min {rmse_min} > rmse_avg {rmse_avg}")
    return problems


def write_report(
    out_dir: str | Path,
    name: str,
    txt: str,
    csv: str,
    payload: dict,
) -> dict[str, str]:
    """Write name.{txt,csv,json}; returns path strings keyed by format."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    (out / f"{name}.txt").write_text(txt, encoding="utf-8")
    paths["txt"] = str(out / f"{name}.txt")
    (out / f"{name}.csv").write_text(csv, encoding="utf-8")
    paths["csv"] = str(out / f"{name}.csv")
    (out / f"{name}.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    paths["json"] = str(out / f"{name}.json")
    return paths


@dataclass
class ProbeReport:
    """Block-wise probe output: one row per block plus the weighted run."""

    model_tag: str
    rows: list[BlockProbeResult]
    weighted: BlockProbeResult | None
    argmax_block: int
    learned_weights: list[float] | None
    per_block: dict = field(default_factory=dict)  # block -> RunReport json

    def all_rows(self) -> list[BlockProbeResult]:
        return self.rows + ([self.weighted] if self.weighted is not None else [])

    def to_json(self) -> dict:
        return {
            "model_tag": self.model_tag,
            "rows": [r.to_json() for r in self.rows],
            "weighted": self.weighted.to_json() if self.weighted else None,
            "argmax_block": self.argmax_block,
            "learned_weights": self.learned_weights,
            "per_block": self.per_block,
        }


def blockwise_probe(
    block_data: dict,
    train_config,
    model_config,
    stacked_data=None,
    model_tag: str = "acoustic",
) -> ProbeReport:
    """Train the downstream classifier per block and aggregate F1 stats.

    ``block_data`` maps block index -> TaskData whose splits/labels must
    agree across blocks. When ``stacked_data`` (per-sample (B, N, D)
    stacks) is given, an additional run trains the learned softmax-weighted
    combination of all blocks, reported as the "Weighted" row.
    """
    from .trainer import multi_seed  # late import: trainer uses these metrics

    if not block_data:
        raise ValueError("no blocks to probe")
    blocks = sorted(block_data)
    reference = block_data[blocks[0]]
    for b in blocks[1:]:
        for split in ("train", "validation", "test"):
            ref_split = getattr(reference, split)
            got_split = getattr(block_data[b], split)
            ref_labels = [(s.dialogue_id, s.label) for s in ref_split]
            got_labels = [(s.dialogue_id, s.label) for s in got_split]
            if ref_labels != got_labels:
                raise ValueError(f"block {b}: {split} labels differ from block {blocks[0]}")

    rows = []
    per_block = {}
    for b in blocks:
        report = multi_seed(train_config, model_config, block_data[b], None, mode="single")
        agg = report.aggregate
        rows.append(
            BlockProbeResult(
                model_tag=model_tag,
                block_index=b,
                f1_avg=agg.f1_avg,
                f1_max=agg.f1_max,
                f1_std=agg.f1_std,
            )
        )
        per_block[str(b)] = report.to_json()

    weighted_row = None
    learned = None
    if stacked_data is not None:
        report = multi_seed(train_config, model_config, stacked_data, None, mode="weighted")
        agg = report.aggregate
        weighted_row = BlockProbeResult(
            model_tag=model_tag,
            block_index="Weighted",
            f1_avg=agg.f1_avg,
            f1_max=agg.f1_max,
            f1_std=agg.f1_std,
        )
        per_block["weighted"] = report.to_json()
        # mean learned weights across seeds
        weight_lists = [r.block_weights for r in report.results if r.block_weights]
        if weight_lists:
            learned = [sum(ws[i] for ws in weight_lists) / len(weight_lists)
                       for i in range(len(weight_lists[0]))]

    best = max(rows, key=lambda r: (r.f1_avg, -int(r.block_index)))
    return ProbeReport(
        model_tag=model_tag,
        rows=rows,
        weighted=weighted_row,
        argmax_block=int(best.block_index),
        learned_weights=learned,
        per_block=per_block,
    )
