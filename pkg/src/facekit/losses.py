"""The five training-objective terms as standalone float64 functions with
analytic gradients, plus the deterministic target assigner that produces the
matched samples they consume.

Gradients are returned alongside each loss so they can be verified against
central finite differences without any autodiff machinery. All probability
logarithms clamp their argument at 1e-7 to stay finite under saturation.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import MetricError, ShapeError
from .postprocess import iou_matrix

P_CLAMP = 1e-7


@dataclass
class VFLParams:
    alpha: float = 0.75
    gamma: float = 2.0

    def __post_init__(self):
        if self.alpha < 0 or self.gamma < 0:
            raise ShapeError(f"vfl params must be >= 0, got alpha={self.alpha} gamma={self.gamma}")


@dataclass
class OKSConfig:
    """Keypoint-similarity constants: per-point falloff k_i, visibility
    threshold, and how object scale is derived (sqrt of gt box area).
    """

    falloff: np.ndarray = field(default_factory=lambda: np.full(68, 0.025))
    vis_threshold: float = 0.0
    scale_mode: str = "sqrt_area"

    def __post_init__(self):
        self.falloff = np.asarray(self.falloff, np.float64)
        if np.any(self.falloff <= 0):
            raise ShapeError("OKS falloff constants must be > 0")
        if self.scale_mode != "sqrt_area":
            raise ShapeError(f"unknown scale_mode {self.scale_mode!r}")


@dataclass
class LossWeights:
    cls: float = 0.5
    box: float = 7.5
    dfl: float = 1.5
    kpts: float = 12.0
    kobj: float = 1.0

    def __post_init__(self):
        for name in ("cls", "box", "dfl", "kpts", "kobj"):
            if getattr(self, name) < 0:
                raise ShapeError(f"loss weight {name} must be >= 0")


@dataclass
class MatchedSample:
    """One positive cell paired with its ground truth.

    Geometry is in input pixels; bin logits are raw; keypoint target rows are
    (x, y, vis) with vis in {0, 1, 2}.
    """

    stride: int
    ix: int
    iy: int
    level: int
    pred_box: np.ndarray  # (4,) decoded cx,cy,w,h
    bin_logits: np.ndarray  # (4, reg_max)
    face_logit: float
    kpt_pred: np.ndarray  # (68, 2) decoded x,y
    kpt_logits: np.ndarray  # (68,) confidence logits
    target_box: np.ndarray  # (4,)
    q: float
    target_kpts: np.ndarray  # (68, 3)
    dfl_targets: np.ndarray  # (4,) distances in cell units

    def __post_init__(self):
        if not 0.0 <= self.q <= 1.0:
            raise ShapeError(f"target score q must lie in [0,1], got {self.q}")


def _clamp(p):
    return min(max(float(p), P_CLAMP), 1.0 - P_CLAMP)


def vfl(p, q, params=None):
    """Asymmetric focal loss on one predicted probability.

    q > 0:  -q(q log p + (1-q) log(1-p));  q = 0:  -alpha p^gamma log(1-p).
    Returns (loss, dloss/dp) with p clamped to (1e-7, 1-1e-7).
    """
    params = params or VFLParams()
    p = _clamp(p)
    if q > 0.0:
        loss = -q * (q * math.log(p) + (1.0 - q) * math.log(1.0 - p))
        grad = -q * (q / p - (1.0 - q) / (1.0 - p))
    else:
        a, g = params.alpha, params.gamma
        loss = -a * p**g * math.log(1.0 - p)
        grad = -a * (g * p ** (g - 1.0) * math.log(1.0 - p) - p**g / (1.0 - p))
    return loss, grad


def _ciou_pieces(pred, gt):
    px, py, pw, ph = (float(v) for v in pred)
    gx, gy, gw, gh = (float(v) for v in gt)
    if pw <= 0 or ph <= 0 or gw <= 0 or gh <= 0:
        raise ShapeError(f"boxes must have positive sizes, got pred={pred} gt={gt}")

    px1, px2 = px - pw / 2, px + pw / 2
    py1, py2 = py - ph / 2, py + ph / 2
    gx1, gx2 = gx - gw / 2, gx + gw / 2
    gy1, gy2 = gy - gh / 2, gy + gh / 2

    iw = min(px2, gx2) - max(px1, gx1)
    ih = min(py2, gy2) - max(py1, gy1)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = pw * ph + gw * gh - inter
    iou = inter / union

    cw = max(px2, gx2) - min(px1, gx1)
    ch = max(py2, gy2) - min(py1, gy1)
    c2 = cw * cw + ch * ch
    rho2 = (px - gx) ** 2 + (py - gy) ** 2

    v = (4.0 / math.pi**2) * (math.atan(gw / gh) - math.atan(pw / ph)) ** 2
    return locals()


def ciou_loss(pred_box, gt_box):
    """1 - CIoU with the full analytic gradient w.r.t. pred (cx, cy, w, h),
    including the aspect-term tradeoff weight's dependence on IoU and v.
    """
    z = _ciou_pieces(pred_box, gt_box)
    iou, v = z["iou"], z["v"]
    s = 1.0 - iou + v
    loss = 1.0 - iou + z["rho2"] / z["c2"] + (v * v / s if s > 0 else 0.0)

    px, py, pw, ph = z["px"], z["py"], z["pw"], z["ph"]
    gx1, gx2, gy1, gy2 = z["gx1"], z["gx2"], z["gy1"], z["gy2"]
    px1, px2, py1, py2 = z["px1"], z["px2"], z["py1"], z["py2"]
    inter, union = z["inter"], z["union"]

    # corner derivatives of the intersection extents (zero off the active side)
    iw, ih = z["iw"], z["ih"]
    d_iw = {"x1": -1.0 if px1 > gx1 else 0.0, "x2": 1.0 if px2 < gx2 else 0.0}
    d_ih = {"y1": -1.0 if py1 > gy1 else 0.0, "y2": 1.0 if py2 < gy2 else 0.0}

    def inter_grad(name):
        if inter <= 0.0:
            return 0.0
        if name in d_iw:
            return d_iw[name] * max(ih, 0.0)
        return d_ih[name] * max(iw, 0.0)

    # chain corners -> (cx, cy, w, h): x1 = cx - w/2, x2 = cx + w/2
    def corner_chain(gfun):
        gx1_, gx2_ = gfun("x1"), gfun("x2")
        gy1_, gy2_ = gfun("y1"), gfun("y2")
        return np.array(
            [
                gx1_ + gx2_,
                gy1_ + gy2_,
                0.5 * (gx2_ - gx1_),
                0.5 * (gy2_ - gy1_),
            ]
        )

    d_inter = corner_chain(inter_grad)
    d_union = np.array([0.0, 0.0, ph, pw]) - d_inter
    d_iou = (d_inter * union - inter * d_union) / (union * union)

    # enclosing-box diagonal
    cw, ch, c2, rho2 = z["cw"], z["ch"], z["c2"], z["rho2"]

    def c_grad(name):
        if name == "x1":
            return (-1.0 if px1 < gx1 else 0.0) * 2.0 * cw
        if name == "x2":
            return (1.0 if px2 > gx2 else 0.0) * 2.0 * cw
        if name == "y1":
            return (-1.0 if py1 < gy1 else 0.0) * 2.0 * ch
        return (1.0 if py2 > gy2 else 0.0) * 2.0 * ch

    d_c2 = corner_chain(c_grad)
    d_rho2 = np.array([2.0 * (px - z["gx"]), 2.0 * (py - z["gy"]), 0.0, 0.0])
    d_center = (d_rho2 * c2 - rho2 * d_c2) / (c2 * c2)

    theta = math.atan(z["gw"] / z["gh"]) - math.atan(pw / ph)
    denom = pw * pw + ph * ph
    d_v = np.array(
        [
            0.0,
            0.0,
            -(8.0 / math.pi**2) * theta * ph / denom,
            (8.0 / math.pi**2) * theta * pw / denom,
        ]
    )

    # d(alpha*v)/dx with alpha = v / (1 - IoU + v) treated exactly
    if s > 0:
        dl_div_diou = -1.0 + (v * v) / (s * s)
        dl_div_dv = 2.0 * v / s - (v * v) / (s * s)
    else:
        dl_div_diou, dl_div_dv = -1.0, 0.0
    grad = dl_div_diou * d_iou + d_center + dl_div_dv * d_v
    return loss, grad


def dfl_loss(bin_logits, target):
    """Interpolated cross-entropy over the two bins flanking a real-valued
    distance target. Returns (loss, gradient w.r.t. each bin logit).
    """
    z = np.asarray(bin_logits, np.float64)
    reg_max = z.shape[-1]
    t = float(target)
    if not 0.0 <= t <= reg_max - 1:
        raise ShapeError(f"dfl target {t} outside [0, {reg_max - 1}]")
    left = min(int(math.floor(t)), reg_max - 2)
    right = left + 1
    wl = right - t
    wr = t - left

    e = np.exp(z - z.max())
    p = e / e.sum()
    loss = -(wl * math.log(max(p[left], P_CLAMP)) + wr * math.log(max(p[right], P_CLAMP)))
    grad = p.copy()
    grad[left] -= wl
    grad[right] -= wr
    return loss, grad


def _oks_terms(pred_kpts, gt_kpts, vis, scale, cfg):
    pred = np.asarray(pred_kpts, np.float64).reshape(-1, 2)
    gt = np.asarray(gt_kpts, np.float64).reshape(-1, 2)
    vis = np.asarray(vis, np.float64).reshape(-1)
    if pred.shape != gt.shape or pred.shape[0] != vis.shape[0]:
        raise ShapeError(
            f"keypoint shapes disagree: pred {pred.shape} gt {gt.shape} vis {vis.shape}"
        )
    if scale <= 0:
        raise MetricError(f"object scale must be > 0, got {scale}")
    mask = vis > cfg.vis_threshold
    if not mask.any():
        raise MetricError("no visible keypoints: similarity undefined")
    d2 = ((pred - gt) ** 2).sum(axis=1)
    k = cfg.falloff[: pred.shape[0]]
    e = np.exp(-d2 / (2.0 * scale * scale * k * k))
    return pred, gt, mask, d2, k, e


def oks(pred_kpts, gt_kpts, vis, scale, cfg=None):
    """Mean of exp(-d_i^2 / (2 s^2 k_i^2)) over visible keypoints, in [0, 1]."""
    cfg = cfg or OKSConfig()
    _, _, mask, _, _, e = _oks_terms(pred_kpts, gt_kpts, vis, scale, cfg)
    return float(e[mask].sum() / mask.sum())


def kpts_loss(pred_kpts, gt_kpts, vis, scale, cfg=None):
    """1 - OKS for one face; gradient w.r.t. predicted coordinates (68, 2)."""
    cfg = cfg or OKSConfig()
    pred, gt, mask, _, k, e = _oks_terms(pred_kpts, gt_kpts, vis, scale, cfg)
    n_vis = mask.sum()
    loss = 1.0 - float(e[mask].sum() / n_vis)
    grad = np.zeros_like(pred)
    coef = e[mask] / (float(scale) ** 2 * k[mask] ** 2 * n_vis)
    grad[mask] = coef[:, None] * (pred[mask] - gt[mask])
    return loss, grad


def kobj_loss(pred_conf_logits, vis):
    """Mean binary cross-entropy between keypoint confidence and visibility
    (target 1 where vis > 0). Returns (loss, gradient w.r.t. logits).
    """
    z = np.asarray(pred_conf_logits, np.float64).reshape(-1)
    vis = np.asarray(vis, np.float64).reshape(-1)
    if z.shape != vis.shape:
        raise ShapeError(f"logit/vis length mismatch: {z.shape} vs {vis.shape}")
    if not np.all(np.isfinite(z)):
        raise ShapeError("keypoint confidence logits must be finite")
    t = (vis > 0).astype(np.float64)
    p = np.where(z >= 0, 1.0 / (1.0 + np.exp(-z)), np.exp(z) / (1.0 + np.exp(z)))
    pc = np.clip(p, P_CLAMP, 1.0 - P_CLAMP)
    loss = float(-(t * np.log(pc) + (1.0 - t) * np.log(1.0 - pc)).mean())
    grad = (p - t) / z.shape[0]
    return loss, grad


def _sigmoid_scalar(z):
    return 1.0 / (1.0 + math.exp(-z)) if z >= 0 else math.exp(z) / (1.0 + math.exp(z))


def total_loss(samples, weights=None, vfl_params=None, oks_cfg=None):
    """Weighted sum over matched samples; returns (total, per-term subtotals).

    Terms are summed, not averaged, so the result is additive over disjoint
    sample lists.
    """
    weights = weights or LossWeights()
    subtotals = {"cls": 0.0, "box": 0.0, "dfl": 0.0, "kpts": 0.0, "kobj": 0.0}
    for s in samples:
        subtotals["cls"] += vfl(_sigmoid_scalar(s.face_logit), s.q, vfl_params)[0]
        subtotals["box"] += ciou_loss(s.pred_box, s.target_box)[0]
        subtotals["dfl"] += sum(
            dfl_loss(s.bin_logits[side], s.dfl_targets[side])[0] for side in range(4)
        ) / 4.0
        scale = math.sqrt(float(s.target_box[2]) * float(s.target_box[3]))
        subtotals["kpts"] += kpts_loss(
            s.kpt_pred, s.target_kpts[:, :2], s.target_kpts[:, 2], scale, oks_cfg
        )[0]
        subtotals["kobj"] += kobj_loss(s.kpt_logits, s.target_kpts[:, 2])[0]
    total = (
        weights.cls * subtotals["cls"]
        + weights.box * subtotals["box"]
        + weights.dfl * subtotals["dfl"]
        + weights.kpts * subtotals["kpts"]
        + weights.kobj * subtotals["kobj"]
    )
    return total, subtotals


def _decode_cell(outputs, level, iy, ix, reg_max):
    """Box and keypoints for one cell, mirroring the postprocess affines."""
    stride = outputs.strides[level]
    bins = (
        outputs.box_logits[level][0]
        .reshape(4, reg_max, *outputs.box_logits[level].shape[2:])[:, :, iy, ix]
        .astype(np.float64)
    )
    e = np.exp(bins - bins.max(axis=1, keepdims=True))
    dist = ((e / e.sum(axis=1, keepdims=True)) * np.arange(reg_max)).sum(axis=1)
    ax, ay = (ix + 0.5) * stride, (iy + 0.5) * stride
    x1, y1 = ax - dist[0] * stride, ay - dist[1] * stride
    x2, y2 = ax + dist[2] * stride, ay + dist[3] * stride
    box = np.array([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1])

    kpt = outputs.kpt_raw[level][0]
    n_kpt = kpt.shape[0] // 3
    raw = kpt.reshape(n_kpt, 3, *kpt.shape[1:])[:, :, iy, ix].astype(np.float64)
    kx = (2.0 * raw[:, 0] + (ix - 0.5)) * stride
    ky = (2.0 * raw[:, 1] + (iy - 0.5)) * stride
    return box, bins, np.stack([kx, ky], axis=1), raw[:, 2], ax, ay


def assign_targets(outputs, gt_boxes, gt_kpts, reg_max=16):
    """Deterministic center-prior assignment.

    A cell is positive for a ground-truth face when its anchor point lies
    inside the face box and inside the centered half-size region; collisions
    go to the face whose center is nearest. A face that captures no cell is
    given the cell containing its center at the finest stride. The target
    score q is the IoU between the cell's decoded box and the face.

    gt_boxes: (G, 4) pixel cx,cy,w,h; gt_kpts: (G, 68, 3) pixel x,y,vis.
    """
    gt_boxes = np.asarray(gt_boxes, np.float64).reshape(-1, 4)
    gt_kpts = np.asarray(gt_kpts, np.float64)
    n_gt = gt_boxes.shape[0]
    if n_gt == 0:
        return []
    if gt_kpts.shape[0] != n_gt:
        raise ShapeError(f"gt_kpts count {gt_kpts.shape[0]} != gt_boxes count {n_gt}")

    chosen = {}  # (level, iy, ix) -> gt index
    captured = np.zeros(n_gt, bool)
    for level, stride in enumerate(outputs.strides):
        h, w = outputs.face_logits[level].shape[2:]
        ax = (np.arange(w) + 0.5) * stride
        ay = (np.arange(h) + 0.5) * stride
        for iy in range(h):
            for ix in range(w):
                hits = []
                for g in range(n_gt):
                    cx, cy, bw, bh = gt_boxes[g]
                    dx, dy = abs(ax[ix] - cx), abs(ay[iy] - cy)
                    if dx <= bw / 2 and dy <= bh / 2 and dx <= bw / 4 and dy <= bh / 4:
                        hits.append((dx * dx + dy * dy, g))
                if hits:
                    g = min(hits)[1]
                    chosen[(level, iy, ix)] = g
                    captured[g] = True

    for g in np.nonzero(~captured)[0]:
        stride = outputs.strides[0]
        h, w = outputs.face_logits[0].shape[2:]
        ix = int(np.clip(gt_boxes[g, 0] // stride, 0, w - 1))
        iy = int(np.clip(gt_boxes[g, 1] // stride, 0, h - 1))
        chosen.setdefault((0, iy, ix), g)

    samples = []
    for (level, iy, ix), g in sorted(chosen.items()):
        stride = outputs.strides[level]
        box, bins, kpt_xy, kpt_logits, ax, ay = _decode_cell(outputs, level, iy, ix, reg_max)
        q = float(iou_matrix(box[None], gt_boxes[g][None])[0, 0])
        cx, cy, bw, bh = gt_boxes[g]
        ltrb = np.array(
            [ax - (cx - bw / 2), ay - (cy - bh / 2), (cx + bw / 2) - ax, (cy + bh / 2) - ay]
        )
        ltrb = np.clip(ltrb / stride, 0.0, reg_max - 1 - 0.01)
        face_logit = float(outputs.face_logits[level][0, 0, iy, ix])
        samples.append(
            MatchedSample(
                stride=stride,
                ix=ix,
                iy=iy,
                level=level,
                pred_box=box,
                bin_logits=bins,
                face_logit=face_logit,
                kpt_pred=kpt_xy,
                kpt_logits=kpt_logits,
                target_box=gt_boxes[g].copy(),
                q=q,
                target_kpts=np.asarray(gt_kpts[g], np.float64).copy(),
                dfl_targets=ltrb,
            )
        )
    return samples
