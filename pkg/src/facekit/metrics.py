"""Scoring utilities: normalized landmark error with yaw-binned aggregation,
greedy average precision over IoU thresholds, wrapped angular error, and the
full-report evaluation driver tying them together.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import MetricError
from .postprocess import iou_matrix

# outer eye corners in the 68-point scheme
LEFT_EYE_OUTER = 36
RIGHT_EYE_OUTER = 45

NME_BINS = (("[0,30)", 0.0, 30.0), ("[30,60)", 30.0, 60.0), ("[60,90]", 60.0, 90.0))

COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass
class EvalReport:
    """Aggregate scores plus per-image detail.

    NME and AME entries are None when no matched pair produced them; bins
    that received no samples are simply absent from nme_bins.
    """

    nme_mean: float | None
    nme_bins: dict
    nme_mean_of_bins: float | None
    ap50: float
    map_coco: float
    ame: tuple | None
    n_gt: int
    n_pred: int
    n_matched: int
    per_image: list = field(default_factory=list)
    warnings: list = field(default_factory=list)


def nme(pred_kpts, gt_kpts, normalizer="interocular", gt_box=None):
    """Mean landmark distance normalized by face size, on the percent scale.

    The default normalizer is the ground-truth outer-eye-corner distance;
    "bbox" divides by sqrt(gt box area) instead and needs gt_box (cx,cy,w,h).
    """
    pred = np.asarray(pred_kpts, np.float64)[:, :2]
    gt = np.asarray(gt_kpts, np.float64)[:, :2]
    if pred.shape != gt.shape:
        raise MetricError(f"landmark shapes disagree: {pred.shape} vs {gt.shape}")
    if normalizer == "interocular":
        norm = float(np.linalg.norm(gt[RIGHT_EYE_OUTER] - gt[LEFT_EYE_OUTER]))
        if norm <= 1e-12:
            raise MetricError("interocular distance is zero")
    elif normalizer == "bbox":
        if gt_box is None:
            raise MetricError("bbox normalizer needs the ground-truth box")
        w, h = float(gt_box[2]), float(gt_box[3])
        if w <= 0 or h <= 0:
            raise MetricError(f"degenerate box for bbox normalizer: w={w} h={h}")
        norm = math.sqrt(w * h)
    else:
        raise MetricError(f"unknown normalizer {normalizer!r}")
    dists = np.linalg.norm(pred - gt, axis=1)
    return float(100.0 * dists.mean() / norm)


def nme_binned(records):
    """Aggregate (nme, |yaw|) pairs into the three absolute-yaw bins.

    Returns per-bin means, the mean over populated bins, and the pooled
    per-record mean. The two aggregation modes genuinely differ whenever
    bins are unevenly populated, so both are reported.
    """
    values = {label: [] for label, _, _ in NME_BINS}
    pooled = []
    for value, yaw in records:
        yaw = float(yaw)
        if not 0.0 <= yaw <= 90.0:
            raise MetricError(f"absolute yaw {yaw} outside [0, 90]")
        for label, lo, hi in NME_BINS:
            if lo <= yaw < hi or (label == NME_BINS[-1][0] and yaw == hi):
                values[label].append(float(value))
                break
        pooled.append(float(value))
    bins = {label: float(np.mean(v)) for label, v in values.items() if v}
    counts = {label: len(v) for label, v in values.items() if v}
    return {
        "bins": bins,
        "counts": counts,
        "mean_of_bins": float(np.mean(list(bins.values()))) if bins else None,
        "pooled": float(np.mean(pooled)) if pooled else None,
    }


def _ap_single(preds, gt_by_image, n_gt, threshold):
    # preds already sorted by descending confidence, ties by insertion
    if n_gt == 0:
        return 0.0
    matched = {img: np.zeros(len(boxes), bool) for img, boxes in gt_by_image.items()}
    tp = np.zeros(len(preds))
    fp = np.zeros(len(preds))
    for rank, (img, box, _) in enumerate(preds):
        boxes = gt_by_image.get(img)
        if boxes is None or not len(boxes):
            fp[rank] = 1.0
            continue
        free = ~matched[img]
        if not free.any():
            fp[rank] = 1.0
            continue
        ious = iou_matrix(np.asarray(box, np.float64)[None], boxes)[0]
        ious[~free] = -1.0
        best = int(np.argmax(ious))
        if ious[best] >= threshold:
            matched[img][best] = True
            tp[rank] = 1.0
        else:
            fp[rank] = 1.0
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(fp)
    recall = cum_tp / n_gt
    precision = cum_tp / np.maximum(cum_tp + cum_fp, 1e-12)
    # 101-point interpolation: best precision at recall >= r
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 101):
        mask = recall >= r - 1e-12
        ap += float(precision[mask].max()) if mask.any() else 0.0
    return ap / 101.0


def average_precision(preds, gts, iou_thresholds=None):
    """Detection AP: (ap at 0.50, mean ap over the 0.50:0.05:0.95 ladder).

    preds: iterable of (image_id, box cxcywh, confidence);
    gts: iterable of (image_id, box cxcywh). Matching is greedy in
    confidence order against the not-yet-taken ground truths of the image.
    """
    thresholds = tuple(iou_thresholds) if iou_thresholds else COCO_THRESHOLDS
    pred_list = [(img, np.asarray(box, np.float64), float(conf)) for img, box, conf in preds]
    order = sorted(range(len(pred_list)), key=lambda i: (-pred_list[i][2], i))
    pred_sorted = [pred_list[i] for i in order]

    gt_by_image = {}
    n_gt = 0
    for img, box in gts:
        gt_by_image.setdefault(img, []).append(np.asarray(box, np.float64))
        n_gt += 1
    gt_by_image = {img: np.stack(b) for img, b in gt_by_image.items()}

    aps = {t: _ap_single(pred_sorted, gt_by_image, n_gt, t) for t in thresholds}
    ap50 = aps.get(0.5, _ap_single(pred_sorted, gt_by_image, n_gt, 0.5))
    return ap50, float(np.mean(list(aps.values())))


def ame(pred_angles, gt_angles):
    """Per-axis mean absolute angular error in degrees, wrap-aware.

    The difference is reduced to (-180, 180] before taking magnitudes, so
    179 vs -179 scores 2, not 358. Returns (yaw, pitch, roll, mean).
    """
    pred = np.asarray(pred_angles, np.float64).reshape(-1, 3)
    gt = np.asarray(gt_angles, np.float64).reshape(-1, 3)
    if pred.shape != gt.shape:
        raise MetricError(f"angle shapes disagree: {pred.shape} vs {gt.shape}")
    if pred.shape[0] == 0:
        raise MetricError("no angle pairs to average")
    wrapped = np.abs((pred - gt + 180.0) % 360.0 - 180.0)
    per_axis = wrapped.mean(axis=0)
    return (
        float(per_axis[0]),
        float(per_axis[1]),
        float(per_axis[2]),
        float(per_axis.mean()),
    )


def _denorm_face(face, width, height):
    box = np.asarray(face.box, np.float64) * [width, height, width, height]
    kpts = np.asarray(face.kpts, np.float64).copy()
    kpts[:, 0] *= width
    kpts[:, 1] *= height
    return box, kpts


def evaluate(
    gt_records,
    pred_records,
    iou_match=0.5,
    exclude_high_nme=False,
    nme_exclude_threshold=20.0,
    normalizer="interocular",
):
    """Score predictions against ground truth and assemble a full report.

    Records are paired by image id; within an image, predictions claim
    ground-truth faces greedily in confidence order at IoU > iou_match.
    Unmatched ground truths count as recall misses but produce no landmark
    error. The high-NME exclusion drops matched pairs above the threshold
    from landmark aggregation only; detection AP is unaffected.
    """
    gt_by_id = {r.image_id: r for r in gt_records}
    pred_by_id = {r.image_id: r for r in pred_records}
    warnings = []
    for image_id in pred_by_id:
        if image_id not in gt_by_id:
            warnings.append(f"no ground truth for image {image_id}")
    for image_id in gt_by_id:
        if image_id not in pred_by_id:
            warnings.append(f"no predictions for image {image_id}")

    ap_preds = []
    ap_gts = []
    nme_records = []
    nme_plain = []
    ame_pred = []
    ame_gt = []
    per_image = []
    n_pred = n_matched = 0

    for image_id, gt_rec in gt_by_id.items():
        w, h = gt_rec.width, gt_rec.height
        gt_faces = [_denorm_face(f, w, h) for f in gt_rec.faces]
        for box, _ in gt_faces:
            ap_gts.append((image_id, box))

        pred_rec = pred_by_id.get(image_id)
        pred_faces = list(pred_rec.faces) if pred_rec is not None else []
        order = sorted(
            range(len(pred_faces)),
            key=lambda i: (-(pred_faces[i].conf if pred_faces[i].conf is not None else 1.0), i),
        )
        taken = np.zeros(len(gt_faces), bool)
        image_detail = {"image_id": image_id, "n_gt": len(gt_faces), "n_pred": len(pred_faces), "pairs": []}
        for i in order:
            face = pred_faces[i]
            box, kpts = _denorm_face(face, w, h)
            conf = face.conf if face.conf is not None else 1.0
            ap_preds.append((image_id, box, conf))
            n_pred += 1
            if not len(gt_faces) or taken.all():
                continue
            ious = iou_matrix(box[None], np.stack([b for b, _ in gt_faces]))[0]
            ious[taken] = -1.0
            best = int(np.argmax(ious))
            if ious[best] <= iou_match:
                continue
            taken[best] = True
            n_matched += 1
            gt_box, gt_kpts = gt_faces[best]
            gt_face = gt_rec.faces[best]
            value = nme(kpts, gt_kpts, normalizer=normalizer, gt_box=gt_box)
            image_detail["pairs"].append({"pred": i, "gt": best, "nme": value, "iou": float(ious[best])})
            if exclude_high_nme and value > nme_exclude_threshold:
                continue
            nme_plain.append(value)
            if gt_face.angles is not None:
                nme_records.append((value, abs(float(gt_face.angles[0]))))
                if face.angles is not None:
                    ame_pred.append(face.angles)
                    ame_gt.append(gt_face.angles)
        per_image.append(image_detail)

    ap50, map_coco = average_precision(ap_preds, ap_gts)
    binned = nme_binned(nme_records) if nme_records else {"bins": {}, "mean_of_bins": None, "pooled": None}
    return EvalReport(
        nme_mean=float(np.mean(nme_plain)) if nme_plain else None,
        nme_bins=binned["bins"],
        nme_mean_of_bins=binned["mean_of_bins"],
        ap50=ap50,
        map_coco=map_coco,
        ame=ame(ame_pred, ame_gt) if ame_pred else None,
        n_gt=len(ap_gts),
        n_pred=n_pred,
        n_matched=n_matched,
        per_image=per_image,
        warnings=warnings,
    )


def _fmt(value, digits=6):
    return "absent" if value is None else f"{value:.{digits}f}"


def format_report(report, style="text"):
    """Render an EvalReport as human-readable text or line-delimited
    key=value pairs (stable key order, full float precision).
    """
    if style == "kv":
        lines = [
            f"n_gt={report.n_gt}",
            f"n_pred={report.n_pred}",
            f"n_matched={report.n_matched}",
            f"ap50={report.ap50!r}",
            f"map_coco={report.map_coco!r}",
            f"nme_mean={'' if report.nme_mean is None else repr(report.nme_mean)}",
            f"nme_mean_of_bins={'' if report.nme_mean_of_bins is None else repr(report.nme_mean_of_bins)}",
        ]
        for label, _, _ in NME_BINS:
            key = "nme_" + label.strip("[]()").replace(",", "_")
            if label in report.nme_bins:
                lines.append(f"{key}={report.nme_bins[label]!r}")
        if report.ame is not None:
            y, p, r, m = report.ame
            lines += [f"ame_yaw={y!r}", f"ame_pitch={p!r}", f"ame_roll={r!r}", f"ame_mean={m!r}"]
        for w in report.warnings:
            lines.append(f"warning={w}")
        return "\n".join(lines) + "\n"
    if style != "text":
        raise MetricError(f"unknown report style {style!r}")
    lines = [
        f"faces: {report.n_gt} gt, {report.n_pred} predicted, {report.n_matched} matched",
        f"ap50:            {report.ap50:.6f}",
        f"map (0.50:0.95): {report.map_coco:.6f}",
        f"nme mean:        {_fmt(report.nme_mean)}",
        f"nme mean of bins:{_fmt(report.nme_mean_of_bins)}",
    ]
    for label, _, _ in NME_BINS:
        if label in report.nme_bins:
            lines.append(f"  nme {label:8s} {report.nme_bins[label]:.6f}")
    if report.ame is not None:
        y, p, r, m = report.ame
        lines.append(f"ame (deg):       yaw {y:.6f}  pitch {p:.6f}  roll {r:.6f}  mean {m:.6f}")
    for w in report.warnings:
        lines.append(f"warning: {w}")
    return "\n".join(lines) + "\n"
