"""Relative-pose evaluation: rotation/translation errors, recall and eCDF tables."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import RigidPose, rotation_angles

RE_BUCKETS_DEG = (3.0, 5.0, 10.0, 30.0, 45.0)
TE_BUCKETS_M = (0.05, 0.1, 0.25, 0.5, 0.75)
RR_ROTATION_GATE_DEG = 15.0


class CountMismatch(ValueError):
    pass


class EmptyInput(ValueError):
    pass


@dataclass
class EvalReport:
    n_poses: int
    n_pairs: int
    te_threshold: float
    re_gate_deg: float
    rr: float  # te < te_threshold and re < re_gate_deg
    rr_translation_only: float
    re_mean_deg: float
    re_median_deg: float
    te_mean: float
    te_median: float
    re_ecdf: dict[str, float]
    te_ecdf: dict[str, float]
    metadata: dict = field(default_factory=dict)
    pair_re_deg: list[float] = field(default_factory=list, repr=False)
    pair_te: list[float] = field(default_factory=list, repr=False)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


def pairwise_errors(pred: Sequence[RigidPose], gt: Sequence[RigidPose]) -> tuple[np.ndarray, np.ndarray]:
    """re (degrees) and te for every ordered pair u != v of relative poses."""
    if len(pred) != len(gt):
        raise CountMismatch(f"{len(pred)} predicted vs {len(gt)} ground-truth poses")
    Rp = np.stack([p.r for p in pred])
    tp = np.stack([p.t for p in pred])
    Rg = np.stack([p.r for p in gt])
    tg = np.stack([p.t for p in gt])
    rel_Rp = np.einsum("uij,vkj->uvik", Rp, Rp)
    rel_Rg = np.einsum("uij,vkj->uvik", Rg, Rg)
    rel_tp = tp[:, None] - np.einsum("uvij,vj->uvi", rel_Rp, tp)
    rel_tg = tg[:, None] - np.einsum("uvij,vj->uvi", rel_Rg, tg)
    re = np.degrees(rotation_angles(np.einsum("uvji,uvjk->uvik", rel_Rp, rel_Rg)))
    te = np.linalg.norm(rel_tp - rel_tg, axis=-1)
    off = ~np.eye(len(pred), dtype=bool)
    return re[off], te[off]


def evaluate(pred: Sequence[RigidPose], gt: Sequence[RigidPose], te_threshold: float = 0.2,
             re_gate_deg: float = RR_ROTATION_GATE_DEG, keep_pairs: bool = True) -> EvalReport:
    re, te = pairwise_errors(pred, gt)
    if len(re) == 0:
        raise EmptyInput("need at least two poses")
    return EvalReport(
        n_poses=len(pred), n_pairs=len(re), te_threshold=te_threshold, re_gate_deg=re_gate_deg,
        rr=float(np.mean((te < te_threshold) & (re < re_gate_deg))),
        rr_translation_only=float(np.mean(te < te_threshold)),
        re_mean_deg=float(re.mean()), re_median_deg=float(np.median(re)),
        te_mean=float(te.mean()), te_median=float(np.median(te)),
        re_ecdf={f"{b:g}": float(np.mean(re < b)) for b in RE_BUCKETS_DEG},
        te_ecdf={f"{b:g}": float(np.mean(te < b)) for b in TE_BUCKETS_M},
        metadata={"rr_rotation_gate": "pairs count as registered only if re < re_gate_deg as well"},
        pair_re_deg=re.tolist() if keep_pairs else [],
        pair_te=te.tolist() if keep_pairs else [],
    )


# ------------------------------------------------------------------ report

SUMMARY_COLUMNS = (["rr", "rr_translation_only", "re_mean_deg", "re_median_deg", "te_mean", "te_median"]
                   + [f"re<{b:g}" for b in RE_BUCKETS_DEG] + [f"te<{b:g}" for b in TE_BUCKETS_M])


def summary_row(r: EvalReport) -> dict[str, float]:
    row = {k: getattr(r, k) for k in SUMMARY_COLUMNS[:6]}
    row.update({f"re<{k}": v for k, v in r.re_ecdf.items()})
    row.update({f"te<{k}": v for k, v in r.te_ecdf.items()})
    return row


def aggregate(reports: Sequence[EvalReport]) -> dict[str, float]:
    """Column means over scenes."""
    if not reports:
        raise EmptyInput("no reports to aggregate")
    rows = [summary_row(r) for r in reports]
    return {c: float(np.mean([row[c] for row in rows])) for c in SUMMARY_COLUMNS}


def render_table(named: dict[str, EvalReport], include_mean: bool = True) -> tuple[str, str]:
    """Aligned text table and CSV text, one row per report plus the mean."""
    if not named:
        raise EmptyInput("no reports to render")
    rows = [(name, summary_row(r)) for name, r in named.items()]
    if include_mean:
        rows.append(("MEAN", aggregate(list(named.values()))))
    header = ["scene"] + list(SUMMARY_COLUMNS)
    body = [[name] + [f"{row[c]:.4f}" for c in SUMMARY_COLUMNS] for name, row in rows]
    widths = [max(len(h), *(len(b[i]) for b in body)) for i, h in enumerate(header)]
    lines = ["  ".join(h.rjust(w) for h, w in zip(header, widths))]
    lines += ["  ".join(c.rjust(w) for c, w in zip(b, widths)) for b in body]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for name, row in rows:
        w.writerow([name] + [repr(row[c]) for c in SUMMARY_COLUMNS])
    return "\n".join(lines) + "\n", buf.getvalue()


def load_report(path) -> EvalReport:
    return EvalReport.from_json(Path(path).read_text())
