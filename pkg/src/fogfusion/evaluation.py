"""Average precision stratified by weather split and KITTI-style difficulty."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .ssd import Detection, iou_matrix
from .weather import GroundTruthBox

DIFFICULTIES = ("easy", "moderate", "hard")
TABLE_SPLITS = ("clear", "light_fog", "dense_fog", "snow_rain")
KITTI_IMAGE_HEIGHT = 375.0
RECALL_POINTS = 40


@dataclass(frozen=True)
class DifficultyRule:
    """Eligibility thresholds per difficulty; ``scale`` rescales the pixel heights."""

    min_height: tuple[float, float, float] = (40.0, 25.0, 25.0)
    max_occlusion: tuple[float, float, float] = (0.0, 0.3, 0.5)
    max_truncation: tuple[float, float, float] = (0.15, 0.3, 0.5)
    scale: float = 1.0

    @classmethod
    def for_plane(cls, plane_height: int) -> "DifficultyRule":
        return cls(scale=plane_height / KITTI_IMAGE_HEIGHT)

    def _index(self, difficulty: str) -> int:
        try:
            return DIFFICULTIES.index(difficulty)
        except ValueError:
            raise ValueError(f"unknown difficulty {difficulty!r}; expected one of {DIFFICULTIES}") from None

    def min_height_px(self, difficulty: str) -> float:
        return self.min_height[self._index(difficulty)] * self.scale

    def eligible(self, gt: GroundTruthBox, difficulty: str) -> bool:
        k = self._index(difficulty)
        return (gt.height >= self.min_height[k] * self.scale
                and gt.occlusion <= self.max_occlusion[k]
                and gt.truncation <= self.max_truncation[k])


@dataclass
class EvalReport:
    """AP per mode and (split, difficulty); ``None`` marks strata without eligible ground truth."""

    ap: dict[str, dict[tuple[str, str], float | None]] = field(default_factory=dict)
    gt_counts: dict[tuple[str, str], int] = field(default_factory=dict)
    det_counts: dict[str, dict[str, int]] = field(default_factory=dict)
    splits: tuple[str, ...] = TABLE_SPLITS
    digest: str = ""

    def get(self, mode: str, split: str, difficulty: str = "moderate") -> float | None:
        return self.ap[mode][(split, difficulty)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        if self.digest:
            buf.write(f"# config_digest={self.digest}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["mode"] + [f"{s}_{d}" for s in self.splits for d in DIFFICULTIES])
        for mode, row in self.ap.items():
            cells = []
            for s in self.splits:
                for d in DIFFICULTIES:
                    v = row.get((s, d))
                    cells.append("" if v is None else f"{v:.2f}")
            w.writerow([mode] + cells)
        return buf.getvalue()


def _as_frames(x) -> list:
    """Accept a single frame's list or a list of per-frame lists (frames must be lists)."""
    x = list(x)
    if x and not isinstance(x[0], list):
        return [x]
    return x


def _det_box(d) -> tuple[float, float, float, float]:
    return d.box if isinstance(d, Detection) else tuple(d[1])


def _det_score(d) -> float:
    return d.score if isinstance(d, Detection) else float(d[0])


def _gt_box(g) -> tuple[float, float, float, float]:
    return g.box if isinstance(g, GroundTruthBox) else tuple(g)


def average_precision(detections, ground_truths, iou_thresh: float = 0.5, difficulty: str = "moderate",
                      rule: DifficultyRule | None = None) -> float | None:
    """AP in [0, 100] with 40-point interpolation, or ``None`` when no ground truth is eligible.

    ``detections`` / ``ground_truths`` are per-frame lists (a single frame may be
    passed unnested; boxes are then tuples). Detections are :class:`Detection` or ``(score, box)``;
    ground truths are :class:`GroundTruthBox` or plain boxes (always eligible).
    Ground truths outside the stratum, and unmatched detections that either hit
    one of them or are shorter than the stratum's minimum height, are neutral.
    """
    rule = rule or DifficultyRule()
    det_frames = _as_frames(detections)
    gt_frames = _as_frames(ground_truths)
    if len(det_frames) != len(gt_frames):
        if not det_frames and len(gt_frames) >= 1:
            det_frames = [[] for _ in gt_frames]
        else:
            raise ValueError(f"{len(det_frames)} detection frames vs {len(gt_frames)} ground-truth frames")
    min_h = rule.min_height_px(difficulty)

    flat = []  # (score, frame, det index)
    frame_data = []
    n_eligible = 0
    for f, (dets, gts) in enumerate(zip(det_frames, gt_frames)):
        boxes = np.array([_gt_box(g) for g in gts], dtype=np.float64).reshape(-1, 4)
        elig = np.array([not isinstance(g, GroundTruthBox) or rule.eligible(g, difficulty) for g in gts], dtype=bool)
        dboxes = np.array([_det_box(d) for d in dets], dtype=np.float64).reshape(-1, 4)
        ov = iou_matrix(dboxes, boxes) if len(dets) and len(gts) else np.zeros((len(dets), len(gts)))
        frame_data.append((elig, ov, dboxes))
        n_eligible += int(elig.sum())
        flat.extend((_det_score(d), f, k) for k, d in enumerate(dets))
    if n_eligible == 0:
        return None

    # descending score; ties broken by frame then detection order for determinism
    flat.sort(key=lambda t: (-t[0], t[1], t[2]))
    taken = [np.zeros(len(fd[0]), dtype=bool) for fd in frame_data]
    tp, fp = [], []
    for _, f, k in flat:
        elig, ov, dboxes = frame_data[f]
        row = ov[k] if ov.shape[1] else np.zeros(0)
        cand = np.flatnonzero(elig & ~taken[f] & (row >= iou_thresh))
        if len(cand):
            g = cand[np.argmax(row[cand])]
            taken[f][g] = True
            tp.append(1)
            fp.append(0)
            continue
        hits_ignored = bool(np.any(~elig & (row >= iou_thresh)))
        too_small = (dboxes[k, 3] - dboxes[k, 1]) < min_h
        if hits_ignored or too_small:
            continue
        tp.append(0)
        fp.append(1)
    if not tp:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(fp)
    recall = ctp / n_eligible
    precision = ctp / (ctp + cfp)
    total = 0.0
    for r in np.arange(1, RECALL_POINTS + 1) / RECALL_POINTS:
        ok = recall >= r - 1e-12
        total += float(precision[ok].max()) if ok.any() else 0.0
    return 100.0 * total / RECALL_POINTS


def ablation_table(models: Mapping[str, Callable[[str], Sequence[Sequence[Detection]]]],
                   dataset: Mapping[str, Sequence[Sequence[GroundTruthBox]]],
                   rule: DifficultyRule | None = None, iou_thresh: float = 0.5, digest: str = "") -> EvalReport:
    """Evaluate every model on every weather split.

    ``models`` maps a mode name to a callable returning per-frame detections for
    a split name; ``dataset`` maps split name to per-frame ground truth.
    """
    rule = rule or DifficultyRule()
    splits = tuple(s for s in TABLE_SPLITS if s in dataset) + tuple(s for s in dataset if s not in TABLE_SPLITS)
    report = EvalReport(splits=splits, digest=digest)
    for s in splits:
        for d in DIFFICULTIES:
            report.gt_counts[(s, d)] = sum(rule.eligible(g, d) for frame in dataset[s] for g in frame)
    for name, predict in models.items():
        row, counts = {}, {}
        for s in splits:
            dets = predict(s)
            counts[s] = sum(len(x) for x in dets)
            for d in DIFFICULTIES:
                row[(s, d)] = average_precision(dets, dataset[s], iou_thresh, d, rule)
        report.ap[name] = row
        report.det_counts[name] = counts
    return report
