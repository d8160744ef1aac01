"""Score detections against ground truth and generate oracle detections.

Matching is spatial first and class-aware second: predictions are visited
in descending confidence and take the unmatched ground-truth box with the
highest IoU. A class-agreeing match is a true positive; a disagreeing one
lands off the diagonal of the confusion matrix and counts as a false
positive for the predicted class and a false negative for the true class.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .core import (FILE_CLASSES, MERGED_CLASSES, Detection, GeoBBox, Label, ObjectClass, PipelineConfig,
                   PixelBBox, iou, merge_class, pixel_box_of)

FRAMES = ("geo", "px")
DISPLAY_NAMES = {
    ObjectClass.SINGLE_PLATFORM: "single platform",
    ObjectClass.PLATFORM_CLUSTER: "platform cluster",
    ObjectClass.WIND_TURBINE: "wind turbine",
    ObjectClass.PLATFORM: "platform",
}


@dataclass(frozen=True)
class GroundTruth:
    box: object
    cls: ObjectClass
    region: str = ""
    frame: str = "geo"
    chip_id: Optional[str] = None

    @classmethod
    def from_record(cls, rec: dict) -> "GroundTruth":
        frame = rec.get("frame", "geo")
        if frame not in FRAMES:
            raise ValueError(f"unknown ground-truth frame {frame!r}")
        box = GeoBBox(*rec["bbox"]) if frame == "geo" else PixelBBox(*rec["bbox"])
        return cls(box, ObjectClass.from_id(rec["class_id"]), str(rec.get("region", "")), frame,
                   rec.get("chip_id"))

    def to_record(self) -> dict:
        rec = {"bbox": list(self.box.as_tuple()), "class_id": int(self.cls), "region": self.region,
               "frame": self.frame}
        if self.chip_id is not None:
            rec["chip_id"] = self.chip_id
        return rec


@dataclass(frozen=True)
class Metrics:
    precision: float
    recall: float
    f1: float


def metrics_from_counts(tp: int, fp: int, fn: int) -> Metrics:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return Metrics(precision, recall, f1)


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are ground-truth classes plus a background row; columns are
    predicted classes plus a background column.

    ``counts[i, -1]`` are missed objects of class ``i`` and ``counts[-1, j]``
    are predictions of class ``j`` that matched nothing.
    """

    classes: tuple
    counts: np.ndarray

    def _i(self, c) -> int:
        return self.classes.index(ObjectClass(c))

    def gt(self, c) -> int:
        return int(self.counts[self._i(c)].sum())

    def tp(self, c) -> int:
        i = self._i(c)
        return int(self.counts[i, i])

    def fp(self, c) -> int:
        i = self._i(c)
        return int(self.counts[:, i].sum() - self.counts[i, i])

    def fn(self, c) -> int:
        i = self._i(c)
        return int(self.counts[i].sum() - self.counts[i, i])

    def percentages(self) -> list:
        """Cells as percent of their ground-truth row; the background row has no total."""
        rows = []
        for i in range(len(self.classes)):
            total = self.counts[i].sum()
            rows.append([100.0 * v / total if total else 0.0 for v in self.counts[i]])
        rows.append(None)
        return rows

    def collapsed(self) -> "ConfusionMatrix":
        """Merge single platforms and clusters into one platform row/column."""
        if self.classes == MERGED_CLASSES:
            return self
        target = [MERGED_CLASSES.index(merge_class(c)) for c in self.classes] + [len(MERGED_CLASSES)]
        n = len(MERGED_CLASSES) + 1
        out = np.zeros((n, n), dtype=np.int64)
        for i, ti in enumerate(target):
            for j, tj in enumerate(target):
                out[ti, tj] += self.counts[i, j]
        return ConfusionMatrix(MERGED_CLASSES, out)

    def to_dict(self) -> dict:
        return {
            "labels": [ObjectClass(c).label for c in self.classes] + ["background"],
            "counts": self.counts.tolist(),
            "percent": self.percentages(),
        }


@dataclass(frozen=True)
class MatchReport:
    confusion: ConfusionMatrix
    pairs: tuple = ()
    frame: str = "geo"

    @property
    def classes(self) -> tuple:
        return self.confusion.classes

    @property
    def merged(self) -> bool:
        return self.classes == MERGED_CLASSES

    def counts(self, c) -> dict:
        m = self.confusion
        return {"gt": m.gt(c), "tp": m.tp(c), "fp": m.fp(c), "fn": m.fn(c)}

    @classmethod
    def from_counts(cls, counts: Mapping) -> "MatchReport":
        """Report from per-class ``(gt, tp, fp, fn)`` without cross-class cells."""
        classes = tuple(ObjectClass(c) for c in counts)
        n = len(classes)
        mat = np.zeros((n + 1, n + 1), dtype=np.int64)
        for i, c in enumerate(classes):
            gt, tp, fp, fn = counts[c]
            if gt != tp + fn:
                raise ValueError(f"{c.label}: GT {gt} != TP {tp} + FN {fn}")
            mat[i, i], mat[-1, i], mat[i, -1] = tp, fp, fn
        return cls(ConfusionMatrix(classes, mat), (), "px")


def _frame_of(gts: Sequence[GroundTruth], preds: Sequence[Detection]) -> str:
    frames = {g.frame for g in gts}
    if len(frames) > 1:
        raise ValueError("mixed ground-truth frames")
    if frames:
        return frames.pop()
    return "geo" if all(p.box_geo is not None for p in preds) else "px"


def match_detections(preds: Sequence[Detection], gts: Sequence[GroundTruth],
                     cfg: PipelineConfig = PipelineConfig(), merge: bool = False) -> MatchReport:
    frame = _frame_of(gts, preds)
    classes = MERGED_CLASSES if merge else FILE_CLASSES
    cast = merge_class if merge else ObjectClass
    n = len(classes)
    bg = n
    mat = np.zeros((n + 1, n + 1), dtype=np.int64)

    pboxes = []
    for p in preds:
        box = p.box_geo if frame == "geo" else p.box_px
        if box is None:
            raise ValueError(f"prediction {p.id} has no {frame} box")
        pboxes.append(box)
    ids = [p.id if p.id is not None else i for i, p in enumerate(preds)]
    order = sorted(range(len(preds)), key=lambda k: (-preds[k].confidence, ids[k]))

    gboxes = np.array([g.box.as_tuple() for g in gts], dtype=np.float64).reshape(-1, 4)
    gareas = (gboxes[:, 2] - gboxes[:, 0]) * (gboxes[:, 3] - gboxes[:, 1])
    gchips = np.array([g.chip_id for g in gts], dtype=object)
    open_ = np.ones(len(gts), dtype=bool)
    pairs = []
    for k in order:
        pred = preds[k]
        best, best_iou = None, 0.0
        if len(gts):
            ax0, ay0, ax1, ay1 = pboxes[k].as_tuple()
            iw = np.minimum(ax1, gboxes[:, 2]) - np.maximum(ax0, gboxes[:, 0])
            ih = np.minimum(ay1, gboxes[:, 3]) - np.maximum(ay0, gboxes[:, 1])
            inter = iw * ih
            with np.errstate(invalid="ignore", divide="ignore"):
                v = np.minimum(1.0, inter / ((ax1 - ax0) * (ay1 - ay0) + gareas - inter))
            ok = open_ & (iw > 0) & (ih > 0)
            if frame == "px":
                ok &= (gchips == None) | (gchips == pred.chip_id)  # noqa: E711
            v = np.where(ok, v, 0.0)
            g = int(np.argmax(v))
            if v[g] > 0:
                best, best_iou = g, float(v[g])
        pc = classes.index(cast(pred.cls))
        if best is not None and best_iou >= cfg.eval_iou:
            open_[best] = False
            mat[classes.index(cast(gts[best].cls)), pc] += 1
            pairs.append((ids[k], best, best_iou))
        else:
            mat[bg, pc] += 1
    for g, gt in enumerate(gts):
        if open_[g]:
            mat[classes.index(cast(gt.cls)), bg] += 1
    return MatchReport(ConfusionMatrix(classes, mat), tuple(pairs), frame)


def compute_metrics(report: MatchReport) -> dict:
    out = {}
    for c in report.classes:
        k = report.counts(c)
        out[c] = metrics_from_counts(k["tp"], k["fp"], k["fn"])
    return out


def confusion_matrix(report: MatchReport, merged: bool = False) -> ConfusionMatrix:
    return report.confusion.collapsed() if merged else report.confusion


def evaluate_run(preds, gts, cfg: PipelineConfig = PipelineConfig(), merge: bool = False):
    report = match_detections(preds, gts, cfg, merge=merge)
    return report, compute_metrics(report), report.confusion


def _class_rows(report: MatchReport) -> list:
    metrics = compute_metrics(report)
    rows = []
    for c in report.classes:
        m = metrics[c]
        rows.append({"class_id": int(c), "class_name": c.label, **report.counts(c),
                     "precision": m.precision, "recall": m.recall, "f1": m.f1})
    return rows


def build_report(preds, gts, cfg: PipelineConfig = PipelineConfig(), merge: bool = True,
                 dataset: Optional[str] = None, model: Optional[str] = None) -> dict:
    """JSON-ready report with per-class and merged blocks plus the confusion matrix."""
    per_class = match_detections(preds, gts, cfg, merge=False)
    merged = match_detections(preds, gts, cfg, merge=True)
    chosen = merged if merge else per_class
    return {
        "dataset": dataset,
        "model": model,
        "frame": per_class.frame,
        "eval_iou": cfg.eval_iou,
        "merge": merge,
        "classes": _class_rows(per_class),
        "merged_classes": _class_rows(merged),
        "confusion": chosen.confusion.to_dict(),
    }


TABLE_COLUMNS = ("Dataset", "YOLO model", "Class", "GT", "TP", "FP", "FN", "Pr", "Rc", "F1")


def validate_report(payload: dict) -> None:
    if not isinstance(payload, dict):
        raise ValueError("report must be a JSON object")
    for block in ("classes", "merged_classes"):
        rows = payload.get(block, [])
        if not isinstance(rows, list):
            raise ValueError(f"{block} must be a list")
        for row in rows:
            if not isinstance(row, dict):
                raise ValueError(f"{block} entries must be objects")
            cid = row.get("class_id")
            if isinstance(cid, bool) or cid not in {int(c) for c in ObjectClass}:
                raise ValueError(f"unknown class id {cid!r} in report")
            for key in ("gt", "tp", "fp", "fn"):
                if not isinstance(row.get(key), int) or row[key] < 0:
                    raise ValueError(f"{block}: class {cid} has invalid {key!r}")


def format_table(payload: dict) -> str:
    """Fixed-width text table with the evaluation table's column layout."""
    validate_report(payload)
    rows = list(payload.get("classes", []))
    seen = {r["class_id"] for r in rows}
    rows += [r for r in payload.get("merged_classes", []) if r["class_id"] not in seen]
    dataset = payload.get("dataset") or "-"
    model = payload.get("model") or "-"
    body = []
    for r in rows:
        m = metrics_from_counts(r["tp"], r["fp"], r["fn"])
        body.append((dataset, model, DISPLAY_NAMES[ObjectClass(r["class_id"])],
                     f"{r['gt']:,}", f"{r['tp']:,}", f"{r['fp']:,}", f"{r['fn']:,}",
                     f"{m.precision:.2f}", f"{m.recall:.2f}", f"{m.f1:.2f}"))
    widths = [max(len(str(x)) for x in col) for col in zip(TABLE_COLUMNS, *body)]
    right = set(range(3, len(TABLE_COLUMNS)))

    def fmt(cells):
        return " ".join(c.rjust(w) if i in right else c.ljust(w)
                        for i, (c, w) in enumerate(zip(cells, widths))).rstrip()

    lines = [fmt(TABLE_COLUMNS), " ".join("-" * w for w in widths)]
    lines += [fmt(row) for row in body]
    return "\n".join(lines) + "\n"


def labels_for_chips(objects: Sequence, chips: Mapping) -> dict:
    """Project ``(cls, GeoBBox)`` objects into every chip whose area holds the box centre.

    Boxes are clipped to the chip; chips without objects map to an empty list.
    """
    out = {cid: [] for cid in sorted(chips)}
    for cid in sorted(chips):
        chip = chips[cid]
        for cls, geo in objects:
            box = pixel_box_of(geo, chip.geotransform)
            cx, cy = box.center
            if 0 <= cx < chip.width and 0 <= cy < chip.height:
                out[cid].append(Label.from_pixel_box(cls, box, chip.width, chip.height))
    return out


def _jitter_box(box: PixelBBox, noise, width, height) -> PixelBBox:
    xs = sorted((float(box.x0 + noise[0]), float(box.x1 + noise[2])))
    ys = sorted((float(box.y0 + noise[1]), float(box.y1 + noise[3])))
    x0, x1 = max(0.0, xs[0]), min(float(width), xs[1])
    y0, y1 = max(0.0, ys[0]), min(float(height), ys[1])
    # keep at least one pixel of extent after clipping
    if x1 - x0 < 1:
        x0 = min(max(0.0, (x0 + x1) / 2 - 0.5), width - 1.0)
        x1 = x0 + 1
    if y1 - y0 < 1:
        y0 = min(max(0.0, (y0 + y1) / 2 - 0.5), height - 1.0)
        y1 = y0 + 1
    return PixelBBox(x0, y0, x1, y1)


def _find_dark_box(raster, avoid, rng, cfg, tries=50):
    h, w = raster.shape
    for _ in range(tries):
        bw, bh = (float(v) for v in rng.uniform(8.0, 40.0, 2))
        x0 = float(rng.uniform(0.0, w - bw))
        y0 = float(rng.uniform(0.0, h - bh))
        box = PixelBBox(x0, y0, x0 + bw, y0 + bh)
        if any(iou(box, a) > 0 for a in avoid):
            continue
        ix0, iy0 = int(np.floor(x0)), int(np.floor(y0))
        ix1, iy1 = int(np.ceil(x0 + bw)), int(np.ceil(y0 + bh))
        if raster[iy0:iy1, ix0:ix1].max() < cfg.dark_pixel_threshold:
            return box
    return None


def oracle_detector(labels: Mapping, chips: Mapping, jitter_sigma_px: float = 2.0, dropout_rate: float = 0.05,
                    spurious_rate: float = 0.05, rng=None, cfg: PipelineConfig = PipelineConfig()) -> list:
    """Stand-in detector: noisy copies of the labels plus spurious boxes on dark water.

    ``labels`` maps chip id to a list of :class:`Label`; ``chips`` maps chip
    id to a chip (anything with ``raster``). Output is deterministic in
    ``rng`` (a seed or a numpy Generator).
    """
    if not 0 <= dropout_rate <= 1 or not 0 <= spurious_rate <= 1:
        raise ValueError("rates must lie in [0, 1]")
    if jitter_sigma_px < 0:
        raise ValueError("jitter must be >= 0")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    dets = []
    total = 0
    for cid in sorted(labels):
        raster = chips[cid].raster
        h, w = raster.shape
        for label in labels[cid]:
            total += 1
            drop = rng.random() < dropout_rate
            conf = float(rng.uniform(0.6, 1.0))
            noise = rng.normal(0.0, jitter_sigma_px, 4) if jitter_sigma_px > 0 else np.zeros(4)
            if drop:
                continue
            box = label.to_pixel_box(w, h)
            if jitter_sigma_px > 0:
                box = _jitter_box(box, noise, w, h)
            dets.append(Detection(None, cid, label.cls, conf, box))
    n_spurious = int(np.floor(spurious_rate * total + 0.5))
    chip_ids = sorted(labels)
    for _ in range(n_spurious):
        if not chip_ids:
            break
        cid = chip_ids[int(rng.integers(len(chip_ids)))]
        raster = chips[cid].raster
        h, w = raster.shape
        avoid = [lab.to_pixel_box(w, h) for lab in labels[cid]]
        box = _find_dark_box(raster, avoid, rng, cfg)
        cls = FILE_CLASSES[int(rng.integers(len(FILE_CLASSES)))]
        conf = float(rng.uniform(0.5, 0.8))
        if box is not None:
            dets.append(Detection(None, cid, cls, conf, box))
    return dets
