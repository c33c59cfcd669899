"""Results files and analysis reports (plot-ready data, no rendering)."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .domain import DEFAULT_TAU, BinaryMask, Sample, rle_decode, rle_encode
from .errors import CorruptFileError, InvalidInputError
from .evaluation import (BASELINE_STRATEGIES, classify_errors, corpus_iou, iou, kde_curve,
                         mutually_exclusive_rate)
from .harness import SampleResult, run_pipeline

RESULTS_VERSION = 1
SERIES = ("fused", "topdown", "bottomup")


# -- results files ------------------------------------------------------------

def results_to_dict(results: Sequence[SampleResult], mode: str, tau: float) -> dict:
    samples = []
    for r in results:
        h, w = r.fused.shape
        samples.append({
            "id": r.identifier,
            "H": h,
            "W": w,
            "fused_rle": rle_encode(r.fused),
            "topdown_rle": rle_encode(r.topdown),
            "bottomup_rle": rle_encode(r.bottomup),
            "iou": {"fused": r.iou_fused, "topdown": r.iou_topdown, "bottomup": r.iou_bottomup},
            "topdown_index": r.topdown_index,
            "confidences": list(r.confidences) if r.confidences is not None else None,
            "per_layer_scores": r.per_layer_scores,
            "per_layer_ious": r.per_layer_ious,
        })
    return {"version": RESULTS_VERSION, "mode": mode, "tau": tau, "samples": samples}


def dumps_results(results: Sequence[SampleResult], mode: str, tau: float) -> str:
    return json.dumps(results_to_dict(results, mode, tau), separators=(",", ":"))


def loads_results(text: str) -> tuple[list[SampleResult], str, float]:
    try:
        doc = json.loads(text)
        if doc.get("version") != RESULTS_VERSION:
            raise CorruptFileError("unsupported results version")
        out = []
        for s in doc["samples"]:
            h, w = int(s["H"]), int(s["W"])
            conf = s.get("confidences")
            out.append(SampleResult(
                str(s["id"]),
                rle_decode(s["fused_rle"], h, w),
                rle_decode(s["topdown_rle"], h, w),
                rle_decode(s["bottomup_rle"], h, w),
                float(s["iou"]["fused"]), float(s["iou"]["topdown"]), float(s["iou"]["bottomup"]),
                int(s["topdown_index"]),
                tuple(conf) if conf is not None else None,
                s.get("per_layer_scores") or [],
                s.get("per_layer_ious") or [],
            ))
        return out, str(doc["mode"]), float(doc["tau"])
    except CorruptFileError:
        raise
    except (json.JSONDecodeError, KeyError, TypeError, ValueError, AttributeError) as exc:
        raise CorruptFileError(f"malformed results file: {exc}") from exc


def load_results(path: str | Path) -> tuple[list[SampleResult], str, float]:
    return loads_results(Path(path).read_text())


# -- reports ------------------------------------------------------------------

def series_ious(results: Sequence[SampleResult], series: str) -> list[float]:
    return [getattr(r, "iou_" + series) for r in results]


def evaluation_report(results: Sequence[SampleResult], corpus: Sequence[Sample], mode: str,
                      tau: float = DEFAULT_TAU) -> dict:
    """IoU of the fused output and both branches against the corpus ground truth, the
    three fixed baselines, error bins, IoU density curves and the branch MER."""
    by_id = {s.identifier: s for s in corpus}
    missing = [r.identifier for r in results if r.identifier not in by_id]
    if missing:
        raise InvalidInputError(f"results reference unknown sample ids, e.g. {missing[0]!r}")
    if not results:
        raise InvalidInputError("results file holds no samples")
    gts = [by_id[r.identifier].ground_truth for r in results]
    report: dict = {"mode": mode, "tau": tau, "count": len(results), "iou": {}, "bins": {},
                    "kde": {}}
    per_series: dict[str, list[float]] = {}
    for name in SERIES:
        masks: list[BinaryMask] = [getattr(r, name) for r in results]
        overall, mean = corpus_iou(zip(masks, gts))
        report["iou"][name] = {"overall": overall, "mean": mean}
        per_series[name] = [iou(m, g) for m, g in zip(masks, gts)]
        report["bins"][name] = classify_errors(per_series[name]).to_dict()
        grid, density = kde_curve(per_series[name])
        report["kde"][name] = density.tolist()
    report["kde"]["grid"] = grid.tolist()
    subset = [by_id[r.identifier] for r in results]
    report["baselines"] = {}
    for strategy in BASELINE_STRATEGIES:
        base = run_pipeline(subset, strategy, tau=tau)
        overall, mean = corpus_iou((b.fused, g) for b, g in zip(base, gts))
        report["baselines"][strategy] = {"overall": overall, "mean": mean}
    report["mer"] = {"topdown_vs_bottomup": mutually_exclusive_rate(per_series["topdown"],
                                                                    per_series["bottomup"])}
    return report


def analysis_report(results: Sequence[SampleResult], results_b: Sequence[SampleResult] | None = None,
                    kde: bool = True, mer: bool = True, bins: bool = True) -> dict:
    if not results:
        raise InvalidInputError("results file holds no samples")
    series = {name: series_ious(results, name) for name in SERIES}
    if results_b is not None:
        if [r.identifier for r in results_b] != [r.identifier for r in results]:
            raise InvalidInputError("the two results files cover different samples")
        series["b_fused"] = series_ious(results_b, "fused")
    out: dict = {"count": len(results)}
    if bins:
        out["bins"] = {k: classify_errors(v).to_dict() for k, v in series.items()}
    if kde:
        curves = {}
        for k, v in series.items():
            grid, density = kde_curve(v)
            curves[k] = density.tolist()
        curves["grid"] = grid.tolist()
        out["kde"] = curves
    if mer:
        out["mer"] = {"topdown_vs_bottomup": mutually_exclusive_rate(series["topdown"],
                                                                     series["bottomup"])}
        if results_b is not None:
            out["mer"]["fused_vs_b_fused"] = mutually_exclusive_rate(series["fused"],
                                                                     series["b_fused"])
    layered = [r.per_layer_ious for r in results if r.per_layer_ious]
    if layered:
        out["per_layer_topdown_iou"] = np.mean(np.array(layered), axis=0).tolist()
    return out


def flatten_scalars(doc: dict, prefix: str = "") -> Iterable[tuple[str, float | str]]:
    """Scalar leaves of a nested report as ``(dotted.key, value)``; arrays are skipped."""
    for key, value in doc.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            yield from flatten_scalars(value, name + ".")
        elif isinstance(value, (int, float, str)) and not isinstance(value, bool):
            yield name, value


def report_csv(doc: dict) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["metric", "value"])
    for name, value in flatten_scalars(doc):
        writer.writerow([name, repr(value) if isinstance(value, float) else value])
    return buf.getvalue()


def dumps_report(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))
