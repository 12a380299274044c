"""Overlap, topology and boundary-distance metrics for binary masks.

Digital topology convention: foreground 8-connected, background 4-connected.
"""

import csv
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import _accel
from .errors import ContractError, MetricUndefinedError
from .morph import boundary


def _pair(a, b):
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ContractError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dice(a, b):
    a, b = _pair(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def skeletonize(mask):
    """Zhang-Suen thinning guarded so every deletion is a simple point."""
    return _accel.zhang_suen(np.asarray(mask, dtype=bool))


def cl_dice(pred, gt):
    pred, gt = _pair(pred, gt)
    sp = skeletonize(pred)
    sg = skeletonize(gt)
    np_, ng = int(sp.sum()), int(sg.sum())
    if np_ == 0 and ng == 0:
        return 1.0
    if np_ == 0 or ng == 0:
        return 0.0
    tprec = int((sp & gt).sum()) / np_
    tsens = int((sg & pred).sum()) / ng
    if tprec + tsens == 0:
        return 0.0
    return 2.0 * tprec * tsens / (tprec + tsens)


def betti_numbers(mask):
    """(components, holes) of a 2D mask."""
    m = np.asarray(mask, dtype=bool)
    if m.ndim != 2:
        raise ContractError(f"masks must be 2D, got shape {m.shape}")
    _, b0 = _accel.label(m, 8)
    lab, nbg = _accel.label(~m, 4)
    if nbg == 0:
        return b0, 0
    touching = np.unique(np.concatenate([lab[0], lab[-1], lab[:, 0], lab[:, -1]]))
    touching = touching[touching > 0]
    return b0, nbg - touching.size


def boundary_distances(a, b):
    """(Hausdorff distance, average symmetric surface distance) between mask boundaries."""
    a, b = _pair(a, b)
    if not a.any() or not b.any():
        raise MetricUndefinedError("boundary distances are undefined for an empty mask")
    pa = np.argwhere(boundary(a))
    pb = np.argwhere(boundary(b))
    dab = _accel.nearest_distances(pa, pb)
    dba = _accel.nearest_distances(pb, pa)
    hd = float(max(dab.max(), dba.max()))
    assd = float((dab.sum() + dba.sum()) / (len(dab) + len(dba)))
    return hd, assd


@dataclass
class MetricReport:
    dice: float
    cl_dice: float
    betti0_pred: int
    betti1_pred: int
    betti0_gt: int
    betti1_gt: int
    delta_beta0: int
    delta_beta1: int
    hd: float  # nan when undefined
    assd: float
    topo_correct: bool


def evaluate(pred, gt):
    pred, gt = _pair(pred, gt)
    b0p, b1p = betti_numbers(pred)
    b0g, b1g = betti_numbers(gt)
    try:
        hd, assd = boundary_distances(pred, gt)
    except MetricUndefinedError:
        hd = assd = math.nan
    return MetricReport(
        dice=dice(pred, gt),
        cl_dice=cl_dice(pred, gt),
        betti0_pred=b0p,
        betti1_pred=b1p,
        betti0_gt=b0g,
        betti1_gt=b1g,
        delta_beta0=abs(b0p - b0g),
        delta_beta1=abs(b1p - b1g),
        hd=hd,
        assd=assd,
        topo_correct=(b0p, b1p) == (b0g, b1g),
    )


SUMMARY_FIELDS = ("dice", "cl_dice", "delta_beta0", "delta_beta1", "hd", "assd", "topo_correct")


def aggregate(reports):
    """Mean and std per metric; NaN distances are excluded and counted."""
    out = {"n": len(reports)}
    for name in SUMMARY_FIELDS:
        vals = np.array([float(getattr(r, name)) for r in reports], dtype=float)
        ok = vals[~np.isnan(vals)]
        out[name] = (float(ok.mean()) if ok.size else math.nan,
                     float(ok.std()) if ok.size else math.nan)
        if name in ("hd", "assd"):
            out[name + "_excluded"] = int(np.isnan(vals).sum())
    out["topo_count"] = int(sum(r.topo_correct for r in reports))
    return out


REPORT_COLUMNS = ["id"] + [f.name for f in fields(MetricReport)]


def write_report(path, rows, extra_summaries=()):
    """CSV with one row per (id, MetricReport), sorted by id, then mean/std rows.

    ``extra_summaries`` adds (label, reports) groups, e.g. a baseline.
    """
    rows = sorted(rows, key=lambda r: r[0])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for rid, rep in rows:
            d = asdict(rep)
            w.writerow([rid] + [_fmt(d[c]) for c in REPORT_COLUMNS[1:]])
        groups = [("", [r for _, r in rows])] + list(extra_summaries)
        for label, reps in groups:
            if not reps:
                continue
            agg = aggregate(reps)
            for stat, k in (("mean", 0), ("std", 1)):
                row = [f"{label}{stat}"]
                for c in REPORT_COLUMNS[1:]:
                    row.append(_fmt(agg[c][k]) if c in SUMMARY_FIELDS else "")
                w.writerow(row)
    return path


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, float) and math.isnan(v):
        return "nan"
    return f"{float(v):.6f}"
