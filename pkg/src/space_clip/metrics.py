"""Standard depth-evaluation metrics under the KITTI Eigen protocol."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .decoder import DepthMap

METRIC_KEYS = ("abs_rel", "sq_rel", "rmse", "rmse_log", "d1", "d2", "d3")
METRIC_HEADERS = ("AbsRel", "SqRel", "RMSE", "RMSE log", "δ<1.25", "δ<1.25²", "δ<1.25³")

GARG_CROP = (0.40810811, 0.99189189, 0.03594771, 0.96405229)

# Extended-scale reference values (KITTI Eigen test, full training).
REFERENCE_KITTI_METRICS = {
    "abs_rel": 0.104, "sq_rel": 0.658, "rmse": 4.837, "rmse_log": 0.180,
    "d1": 0.880, "d2": 0.970, "d3": 0.991,
}


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class Protocol:
    min_depth: float = 1e-3
    max_depth: float = 80.0
    crop: str = "garg"
    split: str = "eigen_test"


@dataclass
class MetricsReport:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    d1: float
    d2: float
    d3: float
    n_pixels: int
    protocol: Protocol = field(default_factory=Protocol)

    def values(self) -> tuple[float, ...]:
        return tuple(getattr(self, k) for k in METRIC_KEYS)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        d["protocol"] = Protocol(**d.get("protocol", {}))
        return cls(**d)


def crop_mask(shape: tuple[int, int], crop: str) -> np.ndarray:
    h, w = shape
    mask = np.zeros(shape, dtype=bool)
    if crop == "none":
        mask[:] = True
    elif crop == "garg":
        t, b, l, r = GARG_CROP
        mask[int(t * h) : int(b * h), int(l * w) : int(r * w)] = True
    else:
        raise ProtocolError(f"unknown crop {crop!r}")
    return mask


def compute_metrics(pred: DepthMap, gt: DepthMap, protocol: Protocol = Protocol()) -> MetricsReport:
    if pred.shape != gt.shape:
        raise ProtocolError(f"prediction shape {pred.shape} != ground-truth shape {gt.shape}")
    lo, hi = protocol.min_depth, protocol.max_depth
    g_all = gt.values.astype(np.float64)
    mask = gt.valid & (g_all >= lo) & (g_all <= hi) & crop_mask(gt.shape, protocol.crop)
    n = int(mask.sum())
    if n == 0:
        raise ProtocolError(
            f"no valid pixels under cap [{lo}, {hi}] m and crop {protocol.crop!r}"
        )
    g = g_all[mask]
    p = np.clip(pred.values.astype(np.float64)[mask], lo, hi)
    diff = p - g
    ratio = np.maximum(p / g, g / p)
    return MetricsReport(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff**2 / g)),
        rmse=float(np.sqrt(np.mean(diff**2))),
        rmse_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        d1=float(np.mean(ratio < 1.25)),
        d2=float(np.mean(ratio < 1.25**2)),
        d3=float(np.mean(ratio < 1.25**3)),
        n_pixels=n,
        protocol=protocol,
    )


def aggregate_reports(reports: list[MetricsReport]) -> MetricsReport:
    """Unweighted per-image mean of every metric; pixel counts are summed."""
    if not reports:
        raise ProtocolError("cannot aggregate an empty list of reports")
    proto = reports[0].protocol
    for r in reports[1:]:
        if r.protocol != proto:
            diff = [k for k in asdict(proto) if getattr(proto, k) != getattr(r.protocol, k)]
            raise ProtocolError(f"protocol mismatch in field(s): {', '.join(diff)}")
    # sorted summation keeps the mean independent of list order
    means = {k: float(np.sum(np.sort([getattr(r, k) for r in reports])) / len(reports)) for k in METRIC_KEYS}
    return MetricsReport(**means, n_pixels=sum(r.n_pixels for r in reports), protocol=proto)


def format_table(rows: dict[str, MetricsReport], extra_columns: dict[str, tuple] | None = None,
                 extra_headers: tuple[str, ...] = ()) -> str:
    """Tab-delimited table, one row per named report, metric columns in the standard order."""
    header = ["Method", *extra_headers, *METRIC_HEADERS]
    lines = ["\t".join(header)]
    for name, rep in rows.items():
        extra = [str(v) for v in (extra_columns or {}).get(name, ())]
        lines.append("\t".join([name, *extra, *(f"{v:.4f}" for v in rep.values())]))
    return "\n".join(lines) + "\n"


def write_report(report: MetricsReport, out_dir: str | Path, name: str = "metrics") -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    txt = out_dir / f"{name}.tsv"
    txt.write_text(format_table({name: report}))
    js = out_dir / f"{name}.json"
    js.write_text(json.dumps(report.to_dict(), indent=2))
    return txt, js
