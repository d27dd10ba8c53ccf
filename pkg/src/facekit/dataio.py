"""File formats and the synthetic-scene generator.

Annotations are plain text: an image header line followed by one line per
face. Weights use a purpose-built flat binary layout (magic, version, then
length-prefixed named tensors of little-endian float32), chosen over any
framework checkpoint so round-trips are bit-exact and files diff cleanly.
The generator projects a 68-point 3D face template at known poses, making
it the ground-truth oracle for the pose solver and the metric harness.

Face line layouts, distinguished by field count:
    209: class + box(4) + 68*(x y vis)                   ground truth
    210: class + box(4) + conf + 68*(x y vis)            prediction
    212: 209 + yaw pitch roll                            ground truth + pose
    213: 210 + yaw pitch roll                            prediction + pose
Coordinates are normalized by image size; vis is 0, 1, or 2.
"""

import math
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import FormatError, PoseError, ShapeError
from .pose import CameraIntrinsics, FaceModel3D, HeadPose, euler_to_rotation, project

MAGIC = b"FKMT"
WEIGHTS_VERSION = 1

_N_KPT = 68
_BASE_FIELDS = 1 + 4 + 3 * _N_KPT  # class + box + landmarks = 209


@dataclass
class FaceAnnotation:
    """One face: normalized box, 68 normalized landmarks with visibility,
    optional confidence (predictions) and Euler angles (degrees).
    """

    box: np.ndarray
    kpts: np.ndarray
    conf: float | None = None
    angles: tuple | None = None
    class_id: int = 0

    def __post_init__(self):
        self.box = np.asarray(self.box, np.float64).reshape(4)
        self.kpts = np.asarray(self.kpts, np.float64).reshape(_N_KPT, 3)
        bad = set(np.unique(self.kpts[:, 2])) - {0.0, 1.0, 2.0}
        if bad:
            raise FormatError(f"visibility flags must be 0, 1, or 2, got {sorted(bad)}")
        if self.angles is not None:
            self.angles = tuple(float(a) for a in self.angles)
            if len(self.angles) != 3:
                raise FormatError(f"expected 3 Euler angles, got {len(self.angles)}")


@dataclass
class AnnotationRecord:
    image_id: str
    width: int
    height: int
    faces: list = field(default_factory=list)


def _parse_face_line(tokens, line_no):
    n = len(tokens)
    has_conf = n in (_BASE_FIELDS + 1, _BASE_FIELDS + 4)
    has_angles = n in (_BASE_FIELDS + 3, _BASE_FIELDS + 4)
    if n not in (_BASE_FIELDS, _BASE_FIELDS + 1, _BASE_FIELDS + 3, _BASE_FIELDS + 4):
        raise FormatError(
            f"line {line_no}: face line has {n} fields, expected "
            f"{_BASE_FIELDS}/{_BASE_FIELDS + 1}/{_BASE_FIELDS + 3}/{_BASE_FIELDS + 4}"
        )
    try:
        values = [float(t) for t in tokens]
    except ValueError as e:
        col = next(i for i, t in enumerate(tokens) if not _is_float(t))
        raise FormatError(f"line {line_no}, column {col + 1}: not a number: {tokens[col]!r}") from e

    pos = 0
    class_id = int(values[pos])
    pos += 1
    box = np.array(values[pos : pos + 4])
    pos += 4
    conf = None
    if has_conf:
        conf = values[pos]
        pos += 1
    kpts = np.array(values[pos : pos + 3 * _N_KPT]).reshape(_N_KPT, 3)
    pos += 3 * _N_KPT
    angles = tuple(values[pos : pos + 3]) if has_angles else None
    try:
        return FaceAnnotation(box=box, kpts=kpts, conf=conf, angles=angles, class_id=class_id)
    except FormatError as e:
        raise FormatError(f"line {line_no}: {e}") from e


def _is_float(token):
    try:
        float(token)
        return True
    except ValueError:
        return False


def parse_annotations(path):
    """Read an annotation file into records. Raises with the offending line
    number on any structural problem.
    """
    records = []
    current = None
    text = Path(path).read_text(encoding="utf-8")
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        if tokens[0] == "image":
            if len(tokens) != 4:
                raise FormatError(f"line {line_no}: image header needs 'image <id> <W> <H>'")
            try:
                w, h = int(tokens[2]), int(tokens[3])
            except ValueError:
                raise FormatError(f"line {line_no}: image size must be integral") from None
            if w <= 0 or h <= 0:
                raise FormatError(f"line {line_no}: image size must be positive, got {w}x{h}")
            current = AnnotationRecord(image_id=tokens[1], width=w, height=h)
            records.append(current)
        else:
            if current is None:
                raise FormatError(f"line {line_no}: face line before any image header")
            current.faces.append(_parse_face_line(tokens, line_no))
    return records


def _fmt_float(v):
    # repr round-trips doubles exactly, keeping parse(write(x)) lossless
    return repr(float(v))


def write_annotations(records, path):
    lines = []
    for rec in records:
        lines.append(f"image {rec.image_id} {rec.width} {rec.height}")
        for f in rec.faces:
            parts = [str(f.class_id)]
            parts += [_fmt_float(v) for v in f.box]
            if f.conf is not None:
                parts.append(_fmt_float(f.conf))
            for row in f.kpts:
                parts += [_fmt_float(row[0]), _fmt_float(row[1]), str(int(row[2]))]
            if f.angles is not None:
                parts += [_fmt_float(a) for a in f.angles]
            lines.append(" ".join(parts))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- weights

def save_weights(model, path):
    """Serialize every named parameter as float32 in graph walk order."""
    params = dict(model.named_params())
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<II", WEIGHTS_VERSION, len(params))
    for name, arr in params.items():
        encoded = name.encode("utf-8")
        blob += struct.pack("<I", len(encoded))
        blob += encoded
        blob += struct.pack("<I", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(blob))


def _read_exact(buf, offset, size, what):
    if offset + size > len(buf):
        raise FormatError(f"truncated weights file while reading {what}")
    return buf[offset : offset + size], offset + size


def load_weights(path, model):
    """Load a weights file into a model in place.

    The file's tensor set must match the model's parameter names exactly and
    every shape must agree; anything else is a hard error naming the tensors
    involved.
    """
    buf = Path(path).read_bytes()
    head, offset = _read_exact(buf, 0, 12, "header")
    if head[:4] != MAGIC:
        raise FormatError(f"bad magic: expected {MAGIC!r}, got {bytes(head[:4])!r}")
    version, count = struct.unpack("<II", head[4:])
    if version != WEIGHTS_VERSION:
        raise FormatError(f"unsupported weights version {version}")

    stored = {}
    for _ in range(count):
        raw, offset = _read_exact(buf, offset, 4, "name length")
        (name_len,) = struct.unpack("<I", raw)
        raw, offset = _read_exact(buf, offset, name_len, "tensor name")
        name = raw.decode("utf-8")
        raw, offset = _read_exact(buf, offset, 4, f"rank of {name}")
        (rank,) = struct.unpack("<I", raw)
        raw, offset = _read_exact(buf, offset, 4 * rank, f"dims of {name}")
        dims = struct.unpack(f"<{rank}I", raw)
        size = 4 * int(np.prod(dims, dtype=np.int64)) if rank else 4
        raw, offset = _read_exact(buf, offset, size, f"payload of {name}")
        stored[name] = np.frombuffer(raw, dtype="<f4").reshape(dims)
    if offset != len(buf):
        raise FormatError(f"{len(buf) - offset} trailing bytes after last tensor")

    params = dict(model.named_params())
    missing = sorted(set(params) - set(stored))
    extra = sorted(set(stored) - set(params))
    if missing or extra:
        raise FormatError(f"tensor set mismatch: missing {missing}, unexpected {extra}")
    for name, arr in params.items():
        if stored[name].shape != arr.shape:
            raise FormatError(
                f"shape mismatch for {name}: file {stored[name].shape}, model {arr.shape}"
            )
    for name, arr in params.items():
        np.copyto(arr, stored[name])
    return model


# ---------------------------------------------------------------- 3D assets

def parse_face_model(path):
    """Read the 8-point reference model: "name x y z" lines plus a
    "map name index" block giving each point's 68-scheme landmark index.
    """
    points = {}
    mapping = {}
    text = Path(path).read_text(encoding="utf-8")
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        if tokens[0] == "map":
            if len(tokens) != 3:
                raise FormatError(f"line {line_no}: map line needs 'map <name> <index>'")
            try:
                mapping[tokens[1]] = int(tokens[2])
            except ValueError:
                raise FormatError(f"line {line_no}: map index must be integral") from None
        else:
            if len(tokens) != 4:
                raise FormatError(f"line {line_no}: point line needs 'name x y z'")
            try:
                points[tokens[0]] = [float(t) for t in tokens[1:]]
            except ValueError:
                raise FormatError(f"line {line_no}: bad coordinate on point {tokens[0]}") from None

    from .pose import MODEL_POINT_NAMES

    missing = set(MODEL_POINT_NAMES) - set(points)
    if missing:
        raise FormatError(f"model file missing points: {sorted(missing)}")
    arr = np.array([points[n] for n in MODEL_POINT_NAMES])
    return FaceModel3D(points=arr, landmark_map=mapping)


def load_face_template(path):
    """Read the dense 68-point 3D template: one "x y z" line per landmark."""
    rows = []
    text = Path(path).read_text(encoding="utf-8")
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        if len(tokens) != 3:
            raise FormatError(f"line {line_no}: template line needs 'x y z'")
        try:
            rows.append([float(t) for t in tokens])
        except ValueError:
            raise FormatError(f"line {line_no}: bad template coordinate") from None
    if len(rows) != _N_KPT:
        raise FormatError(f"template has {len(rows)} points, expected {_N_KPT}")
    return np.array(rows)


def _asset_path(name):
    return resources.files("facekit").joinpath("assets").joinpath(name)


def default_face_model():
    return parse_face_model(_asset_path("face_model_8pt.txt"))


def default_face_template():
    return load_face_template(_asset_path("face_template_68.txt"))


# ---------------------------------------------------------------- generator

@dataclass
class SceneSpec:
    """Knobs for the synthetic-scene generator. Angle ranges are degrees;
    noise_sigma is pixels of isotropic landmark jitter (truncated at six
    sigma); margin keeps face centers away from the image border.
    """

    n_images: int = 50
    faces_per_image: int = 1
    image_size: tuple = (640, 640)
    yaw_range: tuple = (-85.0, 85.0)
    pitch_range: tuple = (-60.0, 60.0)
    roll_range: tuple = (-44.0, 44.0)
    tz_range: tuple = (700.0, 1400.0)
    noise_sigma: float = 0.0
    margin: float = 0.2
    seed: int = 0

    def __post_init__(self):
        for name, (lo, hi), bound in (
            ("yaw", self.yaw_range, 90.0),
            ("pitch", self.pitch_range, 89.0),
            ("roll", self.roll_range, 45.0),
        ):
            if lo > hi or lo <= -bound or hi >= bound:
                raise PoseError(f"{name} range ({lo}, {hi}) outside safe (+-{bound}) interval")
        if self.n_images < 0 or self.faces_per_image < 1:
            raise ShapeError("need n_images >= 0 and faces_per_image >= 1")
        if not 0.0 <= self.margin < 0.5:
            raise ShapeError(f"margin must be in [0, 0.5), got {self.margin}")
        if self.noise_sigma < 0:
            raise ShapeError("noise_sigma must be >= 0")


def _draw_face(rng, spec, cam, pts3d, width, height):
    # rejection-sample until the whole projection fits inside the frame
    for _ in range(64):
        yaw = rng.uniform(*spec.yaw_range)
        pitch = rng.uniform(*spec.pitch_range)
        roll = rng.uniform(*spec.roll_range)
        tz = rng.uniform(*spec.tz_range)
        u_c = rng.uniform(spec.margin * width, (1.0 - spec.margin) * width)
        v_c = rng.uniform(spec.margin * height, (1.0 - spec.margin) * height)
        t = np.array([(u_c - cam.cx) * tz / cam.fx, (v_c - cam.cy) * tz / cam.fy, tz])
        pose = HeadPose.from_rt(euler_to_rotation(yaw, pitch, roll), t)
        uv = project(pts3d, pose, cam)
        if uv.min() >= 2.0 and uv[:, 0].max() <= width - 2.0 and uv[:, 1].max() <= height - 2.0:
            return pose, uv
    raise PoseError("could not place a face inside the frame; loosen margin or tz range")


def generate_synthetic(spec, model=None, template=None, cam=None):
    """Produce (annotation records, per-image pose lists) for known poses.

    Landmarks are perspective projections of the 3D template with the eight
    solver anchor points taken verbatim from the reference model, so running
    the pose solver on noiseless output must recover each generating pose.
    Everything is drawn from one seeded generator: same spec, same bytes.
    """
    model = model if model is not None else default_face_model()
    template = np.array(template if template is not None else default_face_template(), np.float64)
    if template.shape != (_N_KPT, 3):
        raise ShapeError(f"template must be ({_N_KPT}, 3), got {template.shape}")
    width, height = spec.image_size
    cam = cam if cam is not None else CameraIntrinsics.for_image(width, height)

    pts3d = template.copy()
    pts3d[model.landmark_indices] = model.points  # anchors exact by construction

    # separate streams so turning noise on never reshuffles scene geometry
    rng = np.random.default_rng([spec.seed, 0])
    rng_noise = np.random.default_rng([spec.seed, 1])
    records, poses = [], []
    for i in range(spec.n_images):
        rec = AnnotationRecord(image_id=f"synth{i:05d}", width=width, height=height)
        image_poses = []
        for _ in range(spec.faces_per_image):
            pose, uv = _draw_face(rng, spec, cam, pts3d, width, height)
            if spec.noise_sigma > 0:
                jitter = rng_noise.normal(0.0, spec.noise_sigma, uv.shape)
                lim = 6.0 * spec.noise_sigma
                uv = uv + np.clip(jitter, -lim, lim)
            x1, y1 = uv.min(axis=0)
            x2, y2 = uv.max(axis=0)
            box = np.array(
                [(x1 + x2) / 2 / width, (y1 + y2) / 2 / height, (x2 - x1) / width, (y2 - y1) / height]
            )
            kpts = np.zeros((_N_KPT, 3))
            kpts[:, 0] = uv[:, 0] / width
            kpts[:, 1] = uv[:, 1] / height
            kpts[:, 2] = 2.0
            rec.faces.append(
                FaceAnnotation(box=box, kpts=kpts, angles=(pose.yaw, pose.pitch, pose.roll))
            )
            image_poses.append(pose)
        records.append(rec)
        poses.append(image_poses)
    return records, poses


def load_image_tensor(path):
    """Read an image stored as a .npy array into NCHW float32.

    Accepts (3,H,W), (1,3,H,W), or HWC (H,W,3); values are expected to
    already be scaled to [0, 1].
    """
    try:
        arr = np.load(path)
    except (OSError, ValueError) as e:
        raise FormatError(f"cannot read image array {path}: {e}") from e
    if arr.ndim == 3 and arr.shape[2] == 3 and arr.shape[0] != 3:
        arr = arr.transpose(2, 0, 1)
    if arr.ndim == 3 and arr.shape[0] == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[0] != 1 or arr.shape[1] != 3:
        raise FormatError(f"image array must be 1x3xHxW after normalization, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise FormatError("image array contains non-finite values")
    return np.ascontiguousarray(arr, np.float32)
