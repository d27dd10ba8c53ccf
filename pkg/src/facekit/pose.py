"""Head-pose recovery from eight facial landmarks.

A small 3D reference face (chin, nose tip, eye and mouth corners, cheeks) is
aligned to its detected 2D projections by EPnP: the reference points are
rewritten as barycentric combinations of four control points, the control
points' camera coordinates are found in the null space of a 2n x 12 linear
system, and the rigid transform falls out of a Procrustes fit. Euler angles
use the intrinsic yaw(Y) - pitch(X) - roll(Z) sequence, in degrees.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import PoseError, ShapeError

MODEL_POINT_NAMES = (
    "chin",
    "nose_tip",
    "mouth_left",
    "mouth_right",
    "eye_left_outer",
    "eye_right_outer",
    "cheek_left",
    "cheek_right",
)

# 0-indexed positions of the eight reference points in the 68-landmark scheme
DEFAULT_LANDMARK_MAP = {
    "chin": 8,
    "nose_tip": 30,
    "mouth_left": 48,
    "mouth_right": 54,
    "eye_left_outer": 36,
    "eye_right_outer": 45,
    "cheek_left": 0,
    "cheek_right": 16,
}

# all unordered control-point pairs; distance preservation over these six
# pairs pins the scale factors
_PAIRS = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))

_COPLANAR_RATIO = 1e-9


@dataclass
class CameraIntrinsics:
    """Pinhole parameters in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise PoseError(f"focal lengths must be > 0, got fx={self.fx} fy={self.fy}")

    @classmethod
    def for_image(cls, width, height):
        """Uncalibrated default: focal length = image width, principal point
        at the image center.
        """
        return cls(fx=float(width), fy=float(width), cx=width / 2.0, cy=height / 2.0)


@dataclass
class FaceModel3D:
    """Eight named 3D reference points plus their landmark indices.

    Rows of `points` follow MODEL_POINT_NAMES order. The set must span 3D:
    a coplanar model collapses one control-point axis and the solve becomes
    ambiguous, so that is rejected up front.
    """

    points: np.ndarray
    landmark_map: dict = field(default_factory=lambda: dict(DEFAULT_LANDMARK_MAP))

    def __post_init__(self):
        self.points = np.asarray(self.points, np.float64)
        if self.points.shape != (8, 3):
            raise ShapeError(f"expected 8 model points of 3 coords, got {self.points.shape}")
        missing = set(MODEL_POINT_NAMES) - set(self.landmark_map)
        if missing:
            raise ShapeError(f"landmark map missing entries for {sorted(missing)}")
        for name, idx in self.landmark_map.items():
            if not 0 <= int(idx) < 68:
                raise ShapeError(f"landmark index for {name} out of range: {idx}")
        centered = self.points - self.points.mean(axis=0)
        lam = np.linalg.eigvalsh(centered.T @ centered)
        if lam[0] / lam[2] < _COPLANAR_RATIO:
            raise PoseError("model points are coplanar: spread along one axis is zero")

    @property
    def landmark_indices(self):
        return np.array([self.landmark_map[n] for n in MODEL_POINT_NAMES], int)

    def named_point(self, name):
        return self.points[MODEL_POINT_NAMES.index(name)]


@dataclass
class HeadPose:
    """Rigid camera-from-model transform with its Euler decomposition."""

    R: np.ndarray
    t: np.ndarray
    yaw: float
    pitch: float
    roll: float

    def __post_init__(self):
        self.R = np.asarray(self.R, np.float64)
        self.t = np.asarray(self.t, np.float64).reshape(3)
        if self.R.shape != (3, 3):
            raise ShapeError(f"rotation must be 3x3, got {self.R.shape}")
        if np.abs(self.R.T @ self.R - np.eye(3)).max() > 1e-8:
            raise PoseError("rotation is not orthonormal within 1e-8")
        if np.linalg.det(self.R) < 0:
            raise PoseError("rotation has negative determinant (reflection)")

    @classmethod
    def from_rt(cls, rotation, translation):
        yaw, pitch, roll = rotation_to_euler(rotation)
        return cls(R=rotation, t=translation, yaw=yaw, pitch=pitch, roll=roll)


def euler_to_rotation(yaw, pitch, roll):
    """Compose R = Ry(yaw) @ Rx(pitch) @ Rz(roll), angles in degrees."""
    y, p, r = (math.radians(a) for a in (yaw, pitch, roll))
    cy, sy = math.cos(y), math.sin(y)
    cp, sp = math.cos(p), math.sin(p)
    cr, sr = math.cos(r), math.sin(r)
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    rz = np.array([[cr, -sr, 0], [sr, cr, 0], [0, 0, 1]])
    return ry @ rx @ rz


def rotation_to_euler(rotation):
    """Invert euler_to_rotation. Returns (yaw, pitch, roll) in degrees.

    At gimbal lock (|pitch| = 90 deg) yaw and roll share an axis; roll is
    reported as 0 and yaw absorbs the combined angle.
    """
    m = np.asarray(rotation, np.float64)
    if m.shape != (3, 3):
        raise ShapeError(f"rotation must be 3x3, got {m.shape}")
    sp = -m[1, 2]
    if abs(sp) >= 1.0 - 1e-12:
        pitch = math.copysign(90.0, sp)
        if sp > 0:
            yaw = math.degrees(math.atan2(m[0, 1], m[0, 0]))
        else:
            yaw = math.degrees(math.atan2(-m[0, 1], m[0, 0]))
        return yaw, pitch, 0.0
    pitch = math.degrees(math.asin(sp))
    yaw = math.degrees(math.atan2(m[0, 2], m[2, 2]))
    roll = math.degrees(math.atan2(m[1, 0], m[1, 1]))
    return yaw, pitch, roll


def project(points3d, pose, cam):
    """Perspective projection u = fx X'/Z' + cx, v = fy Y'/Z' + cy with
    (X', Y', Z') = R @ X + t. Raises when any point lands at or behind the
    camera plane.
    """
    pts = np.asarray(points3d, np.float64).reshape(-1, 3)
    c = pts @ pose.R.T + pose.t
    if np.any(c[:, 2] <= 1e-9):
        raise PoseError("point at or behind the camera plane")
    u = cam.fx * c[:, 0] / c[:, 2] + cam.cx
    v = cam.fy * c[:, 1] / c[:, 2] + cam.cy
    return np.stack([u, v], axis=1)


def _control_points(world):
    """Centroid plus principal axes scaled by the spread along each."""
    c0 = world.mean(axis=0)
    centered = world - c0
    cov = centered.T @ centered / world.shape[0]
    lam, vec = np.linalg.eigh(cov)  # ascending
    if lam[0] / lam[2] < _COPLANAR_RATIO:
        raise PoseError("reference points are coplanar")
    ctrl = [c0]
    for k in (2, 1, 0):
        ctrl.append(c0 + math.sqrt(lam[k]) * vec[:, k])
    return np.array(ctrl)


def _barycentric(world, ctrl):
    a = np.ones((4, 4))
    a[:3] = ctrl.T
    rhs = np.ones((4, world.shape[0]))
    rhs[:3] = world.T
    return np.linalg.solve(a, rhs).T  # (n, 4)


def _null_basis(pts2d, alphas, cam):
    n = pts2d.shape[0]
    m = np.zeros((2 * n, 12))
    for i in range(n):
        u, v = pts2d[i]
        for j in range(4):
            a = alphas[i, j]
            m[2 * i, 3 * j] = a * cam.fx
            m[2 * i, 3 * j + 2] = a * (cam.cx - u)
            m[2 * i + 1, 3 * j + 1] = a * cam.fy
            m[2 * i + 1, 3 * j + 2] = a * (cam.cy - v)
    _, vec = np.linalg.eigh(m.T @ m)
    return vec[:, :4].T.reshape(4, 4, 3)  # 4 basis vectors x 4 ctrl pts x xyz


def _pair_deltas(basis):
    return np.array([[basis[k, a] - basis[k, b] for a, b in _PAIRS] for k in range(4)])


def _beta_init(deltas, rho, case):
    """Closed-form scale estimates from the distance-preservation system."""
    if case == 1:
        num = sum(math.sqrt(r) * np.linalg.norm(deltas[0, p]) for p, r in enumerate(rho))
        den = sum(float(deltas[0, p] @ deltas[0, p]) for p in range(6))
        return np.array([num / den, 0.0, 0.0, 0.0])
    if case == 2:
        l = np.zeros((6, 3))
        for p in range(6):
            da, db = deltas[0, p], deltas[1, p]
            l[p] = [da @ da, 2.0 * (da @ db), db @ db]
        b, *_ = np.linalg.lstsq(l, rho, rcond=None)
        ba = math.sqrt(abs(b[0]))
        bb = math.sqrt(abs(b[2]))
        if b[1] < 0:
            bb = -bb
        return np.array([ba, bb, 0.0, 0.0])
    l = np.zeros((6, 6))
    for p in range(6):
        d1, d2, d3 = deltas[0, p], deltas[1, p], deltas[2, p]
        l[p] = [d1 @ d1, 2.0 * (d1 @ d2), d2 @ d2, 2.0 * (d1 @ d3), 2.0 * (d2 @ d3), d3 @ d3]
    try:
        b = np.linalg.solve(l, rho)
    except np.linalg.LinAlgError:
        b, *_ = np.linalg.lstsq(l, rho, rcond=None)
    b1 = math.sqrt(abs(b[0]))
    b2 = math.copysign(math.sqrt(abs(b[2])), b[1])
    b3 = math.copysign(math.sqrt(abs(b[5])), b[3])
    return np.array([b1, b2, b3, 0.0])


def _gauss_newton(beta, deltas, rho, iters=5):
    """Refine the four scales so control-point distances match the model."""
    for _ in range(iters):
        resid = np.empty(6)
        jac = np.empty((6, 4))
        for p in range(6):
            d = (beta[:, None] * deltas[:, p]).sum(axis=0)
            resid[p] = d @ d - rho[p]
            jac[p] = 2.0 * deltas[:, p] @ d
        step, *_ = np.linalg.lstsq(jac, -resid, rcond=None)
        beta = beta + step
    return beta


def _procrustes(world, camera):
    """Rigid R, t with R proper, minimizing ||R w + t - c||^2."""
    wc = world.mean(axis=0)
    cc = camera.mean(axis=0)
    h = (world - wc).T @ (camera - cc)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return r, cc - r @ wc


def epnp_solve(pts2d, model, cam):
    """Recover the pose whose projection of the eight model points best
    matches the observed pixels.

    Candidate solutions are generated for one, two, and three active
    null-space directions, each refined by a few Gauss-Newton steps on the
    control-point distances, and scored by mean reprojection error; ties go
    to the candidate with the smaller translation.
    """
    pts2d = np.asarray(pts2d, np.float64).reshape(-1, 2)
    world = model.points
    if pts2d.shape[0] != world.shape[0]:
        raise ShapeError(f"{pts2d.shape[0]} pixels for {world.shape[0]} model points")

    ctrl = _control_points(world)
    alphas = _barycentric(world, ctrl)
    basis = _null_basis(pts2d, alphas, cam)
    deltas = _pair_deltas(basis)
    rho = np.array([float((ctrl[a] - ctrl[b]) @ (ctrl[a] - ctrl[b])) for a, b in _PAIRS])

    best = None
    for case in (1, 2, 3):
        beta = _gauss_newton(_beta_init(deltas, rho, case), deltas, rho)
        ctrl_cam = (beta[:, None, None] * basis).sum(axis=0)
        cam_pts = alphas @ ctrl_cam
        if cam_pts[:, 2].sum() < 0:
            cam_pts = -cam_pts
        if np.any(cam_pts[:, 2] <= 0):
            continue
        r, t = _procrustes(world, cam_pts)
        try:
            pose = HeadPose.from_rt(r, t)
            err = float(np.linalg.norm(project(world, pose, cam) - pts2d, axis=1).mean())
        except PoseError:
            continue
        key = (err, float(np.linalg.norm(t)))
        if best is None or key < best[0]:
            best = (key, pose)

    if best is None:
        raise PoseError("no candidate pose places the face in front of the camera")
    return best[1]


def pose_from_detection(det, model, cam):
    """Run the solver on the eight mapped landmarks of one detection."""
    lm = np.asarray(det.landmarks, np.float64)
    if lm.shape[0] != 68:
        raise ShapeError(f"expected 68 landmarks, got {lm.shape[0]}")
    return epnp_solve(lm[model.landmark_indices, :2], model, cam)
