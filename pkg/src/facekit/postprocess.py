"""Turn raw head tensors into face detections.

Decode convention (pinned here and mirrored exactly by the loss targets):

  * anchor point of cell (i, j) at stride s is ((j + 0.5)s, (i + 0.5)s)
  * box channel layout is 4 consecutive groups of reg_max bins in
    (left, top, right, bottom) order; each side decodes as the softmax
    expectation over bins, in cell units, scaled by the stride
  * keypoint channel layout is 68 consecutive (x, y, conf) triples;
    x = (2*raw_x + (j - 0.5))*s, y = (2*raw_y + (i - 0.5))*s
  * confidences pass through a sigmoid
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError

__all__ = [
    "DecodeConfig",
    "FaceDetection",
    "decode_boxes",
    "dfl_decode",
    "iou_matrix",
    "iou_xywh",
    "nms",
    "xywh_to_xyxy",
]


@dataclass
class DecodeConfig:
    conf_threshold: float = 0.002
    iou_threshold: float = 0.7
    reg_max: int = 16

    def __post_init__(self):
        if not (0.0 <= self.conf_threshold <= 1.0 and 0.0 <= self.iou_threshold <= 1.0):
            raise ShapeError(
                f"thresholds must lie in [0,1], got conf={self.conf_threshold} "
                f"iou={self.iou_threshold}"
            )


@dataclass
class FaceDetection:
    """One decoded face: center-size box, confidence, 68 landmarks.

    landmarks is a (68, 3) float array of (x, y, kconf) rows in pixels.
    """

    cx: float
    cy: float
    w: float
    h: float
    conf: float
    landmarks: np.ndarray = field(default_factory=lambda: np.zeros((68, 3)))

    def __post_init__(self):
        self.landmarks = np.asarray(self.landmarks, np.float64)
        if self.landmarks.shape != (68, 3):
            raise ShapeError(f"landmarks must be (68, 3), got {self.landmarks.shape}")

    @property
    def box(self):
        return np.array([self.cx, self.cy, self.w, self.h], np.float64)


def _softmax(z):
    z = np.asarray(z, np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def dfl_decode(bin_logits):
    """Expectation of the softmax over distance bins, in cell units."""
    bin_logits = np.asarray(bin_logits, np.float64)
    if bin_logits.shape[-1] < 2:
        raise ShapeError(f"need at least 2 bins, got {bin_logits.shape[-1]}")
    p = _softmax(bin_logits)
    idx = np.arange(bin_logits.shape[-1], dtype=np.float64)
    return float((p * idx).sum(-1)) if bin_logits.ndim == 1 else (p * idx).sum(-1)


def _sigmoid(z):
    z = np.asarray(z, np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def decode_boxes(outputs, cfg: DecodeConfig):
    """HeadOutputs -> pre-NMS FaceDetection list, batch size 1.

    Detections come out in scan order: level by level, then row-major cells.
    """
    dets = []
    for level, stride in enumerate(outputs.strides):
        box_l = outputs.box_logits[level]
        face_l = outputs.face_logits[level]
        kpt_l = outputs.kpt_raw[level]
        if box_l.shape[0] != 1:
            raise ShapeError(f"decode expects batch 1, got batch {box_l.shape[0]}")
        if box_l.shape[1] != 4 * cfg.reg_max:
            raise ShapeError(
                f"box channels {box_l.shape[1]} != 4*reg_max ({4 * cfg.reg_max})"
            )
        if kpt_l.shape[1] % 3:
            raise ShapeError(f"keypoint channels {kpt_l.shape[1]} not a multiple of 3")
        n_kpt = kpt_l.shape[1] // 3
        h, w = face_l.shape[2], face_l.shape[3]

        conf = _sigmoid(face_l[0, 0])
        ii, jj = np.nonzero(conf >= cfg.conf_threshold)
        if ii.size == 0:
            continue
        kept_conf = conf[ii, jj]

        bins = box_l[0].reshape(4, cfg.reg_max, h, w)[:, :, ii, jj]
        dist = (_softmax(bins.transpose(2, 0, 1)) * np.arange(cfg.reg_max)).sum(-1)
        ax = (jj + 0.5) * stride
        ay = (ii + 0.5) * stride
        x1 = ax - dist[:, 0] * stride
        y1 = ay - dist[:, 1] * stride
        x2 = ax + dist[:, 2] * stride
        y2 = ay + dist[:, 3] * stride

        raw = kpt_l[0].reshape(n_kpt, 3, h, w)[:, :, ii, jj].transpose(2, 0, 1)
        raw = raw.astype(np.float64)
        kx = (2.0 * raw[:, :, 0] + (jj[:, None] - 0.5)) * stride
        ky = (2.0 * raw[:, :, 1] + (ii[:, None] - 0.5)) * stride
        kc = _sigmoid(raw[:, :, 2])

        for n in range(ii.size):
            lm = np.stack([kx[n], ky[n], kc[n]], axis=1)
            dets.append(
                FaceDetection(
                    cx=float((x1[n] + x2[n]) / 2),
                    cy=float((y1[n] + y2[n]) / 2),
                    w=float(x2[n] - x1[n]),
                    h=float(y2[n] - y1[n]),
                    conf=float(kept_conf[n]),
                    landmarks=lm,
                )
            )
    return dets


def xywh_to_xyxy(boxes):
    boxes = np.asarray(boxes, np.float64)
    half = boxes[..., 2:4] / 2.0
    return np.concatenate([boxes[..., 0:2] - half, boxes[..., 0:2] + half], axis=-1)


def iou_matrix(a_xywh, b_xywh):
    """Pairwise IoU of two (N,4) / (M,4) center-size box sets -> (N, M)."""
    a = xywh_to_xyxy(np.atleast_2d(a_xywh))
    b = xywh_to_xyxy(np.atleast_2d(b_xywh))
    tl = np.maximum(a[:, None, :2], b[None, :, :2])
    br = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(br - tl, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0.0, inter / union, 0.0)
    return iou


def iou_xywh(a, b):
    return float(iou_matrix(np.asarray(a)[None], np.asarray(b)[None])[0, 0])


def nms(dets, iou_threshold):
    """Greedy suppression: highest confidence first, drop anything whose IoU
    with a kept box exceeds the threshold. Ties break on insertion index, so
    the result is stable for equal confidences.
    """
    if not dets:
        return []
    order = sorted(range(len(dets)), key=lambda n: (-dets[n].conf, n))
    boxes = np.array([dets[n].box for n in order])
    keep = []
    alive = np.ones(len(order), bool)
    for n in range(len(order)):
        if not alive[n]:
            continue
        keep.append(dets[order[n]])
        rest = np.nonzero(alive[n + 1 :])[0] + n + 1
        if rest.size:
            ious = iou_matrix(boxes[n], boxes[rest])[0]
            alive[rest[ious > iou_threshold]] = False
    return keep
