"""Per-image evaluation tables for trained networks and the FBP baseline."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import linops, metrics, unroll
from .simdata import Dataset

PEAK_NOTE = "psnr/ssim peak = max(ref) - min(ref); operator_calls in full-operator-equivalents per forward pass"


@dataclass
class MetricResult:
    psnr: float
    ssim: float
    operator_calls: float


@dataclass
class EvalTable:
    rows: list  # per image: method, index, psnr, ssim, operator_calls
    summary: list  # per method: method, n_images, mean_psnr, mean_ssim, operator_calls

    def method(self, name) -> dict:
        for s in self.summary:
            if s["method"] == name:
                return s
        raise KeyError(name)

    def write_csv(self, path, summary_path=None):
        _write(path, self.rows, ["method", "index", "psnr", "ssim", "operator_calls"])
        if summary_path:
            _write(summary_path, self.summary, ["method", "n_images", "mean_psnr", "mean_ssim", "operator_calls"])


def _write(path, rows, cols):
    with open(path, "w", newline="") as f:
        f.write(f"# {PEAK_NOTE}\n")
        w = csv.DictWriter(f, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(r[k])) if isinstance(r[k], (float, np.floating)) else r[k]) for k in cols})


def check_geometry(header: dict, geom: linops.ScanGeometry):
    g = header.get("geometry")
    if g is not None and linops.ScanGeometry.from_dict(g) != geom:
        raise ValueError("geometry mismatch between checkpoint and dataset")


def evaluate(models: dict, dataset: Dataset, op=None, split: str = "test", include_fbp: bool = True,
             workers: int = 1) -> EvalTable:
    """Evaluate ``{name: UnrollParams}`` on the labelled ``split``.

    Each model may also be given as ``(params, header)`` so the checkpoint's
    geometry can be checked against the dataset's.
    """
    items = [(i, it) for i, it in enumerate(dataset.items) if it.split == split]
    if not items:
        raise ValueError(f"no items in split {split!r}")
    if not dataset.has_ground_truth:
        raise ValueError("evaluation needs ground truth")
    op = op or linops.assemble_projector(dataset.geometry)
    rows = []
    if include_fbp:
        for i, it in items:
            rows.append(dict(method="fbp", index=i, psnr=metrics.psnr(it.x0, it.x_true),
                             ssim=metrics.ssim(it.x0, it.x_true), operator_calls=1.0))
    for name, model in models.items():
        params, header = model if isinstance(model, tuple) else (model, {})
        check_geometry(header, dataset.geometry)
        view = unroll.prepare_operator(op, params.config)

        def run(pair, params=params, view=view):
            i, it = pair
            x, calls = unroll.reconstruct(params, view, it.b, it.x0)
            return dict(method=name, index=i, psnr=metrics.psnr(x, it.x_true), ssim=metrics.ssim(x, it.x_true),
                        operator_calls=calls)

        if workers > 1:
            with ThreadPoolExecutor(workers) as ex:
                rows.extend(ex.map(run, items))
        else:
            rows.extend(map(run, items))
    summary = []
    for name in dict.fromkeys(r["method"] for r in rows):
        rs = [r for r in rows if r["method"] == name]
        summary.append(dict(
            method=name,
            n_images=len(rs),
            mean_psnr=float(np.mean([r["psnr"] for r in rs])),
            mean_ssim=float(np.mean([r["ssim"] for r in rs])),
            operator_calls=rs[0]["operator_calls"],
        ))
    return EvalTable(rows, summary)


def metric_result(x, ref, calls=math.nan) -> MetricResult:
    return MetricResult(metrics.psnr(x, ref), metrics.ssim(x, ref), calls)
