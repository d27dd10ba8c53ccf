"""Command-line operator surface.

Subcommands cover the whole loop: weight init, fusion verification,
inference (network tensors or landmark files), scoring, pose-only scoring,
synthetic dataset generation, and latency measurement. Every run first
echoes its fully-resolved configuration so logs are self-describing.

Exit codes: 0 success, 1 tolerance or assertion failure, 2 usage error,
3 I/O error.
"""

import argparse
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import dataio, metrics
from .errors import FacekitError, FormatError, PoseError, ShapeError
from .netgraph import build_model, count_params, forward, model_config
from .pose import CameraIntrinsics, pose_from_detection
from .postprocess import DecodeConfig, decode_boxes, nms

PAD_VALUE = 0.5  # neutral mid-gray for letterbox borders


def letterbox(image, target):
    """Fit an NCHW image into a target square: scale the long side down (or
    up) to target, center, and pad the rest with mid-gray. Returns the new
    tensor plus (scale, pad_x, pad_y) needed to map detections back.
    """
    _, c, h, w = image.shape
    scale = target / max(h, w)
    new_h = max(1, round(h * scale))
    new_w = max(1, round(w * scale))
    src_y = np.minimum((np.arange(new_h) / scale).astype(int), h - 1)
    src_x = np.minimum((np.arange(new_w) / scale).astype(int), w - 1)
    resized = image[:, :, src_y][:, :, :, src_x]
    out = np.full((1, c, target, target), PAD_VALUE, image.dtype)
    pad_y = (target - new_h) // 2
    pad_x = (target - new_w) // 2
    out[:, :, pad_y : pad_y + new_h, pad_x : pad_x + new_w] = resized
    return out, scale, pad_x, pad_y


def unletterbox_detection(det, scale, pad_x, pad_y):
    """Map one detection from letterboxed to original-image pixels."""
    det.cx = (det.cx - pad_x) / scale
    det.cy = (det.cy - pad_y) / scale
    det.w = det.w / scale
    det.h = det.h / scale
    det.landmarks[:, 0] = (det.landmarks[:, 0] - pad_x) / scale
    det.landmarks[:, 1] = (det.landmarks[:, 1] - pad_y) / scale
    return det


def _echo_config(name, pairs):
    print(f"run: {name}")
    for key in sorted(pairs):
        print(f"  {key} = {pairs[key]}")


def _build(args):
    cfg = model_config(args.config)
    return cfg, build_model(cfg, seed=args.seed)


def _pose_assets():
    model3d = dataio.default_face_model()
    return model3d


def cmd_fuse_check(args):
    cfg, net = _build(args)
    _echo_config(
        "fuse-check",
        {"config": args.config, "seed": args.seed, "imgsz": args.imgsz, "n": args.n,
         "perturb": args.perturb, "stem": cfg.stem_kind, "bottleneck": cfg.bottleneck_kind},
    )
    deployed = net.deploy()
    params_before = net.param_count()
    params_after = deployed.param_count()
    fused = params_before - params_after

    if args.perturb:
        # negative control: corrupt one deployed weight and expect a breach
        for _, arr in deployed.named_params():
            arr.flat[0] += 0.5
            break

    rng = np.random.default_rng(args.seed + 1)
    worst = 0.0
    for _ in range(args.n):
        x = rng.uniform(0.0, 1.0, (1, 3, args.imgsz, args.imgsz)).astype(np.float32)
        a = net.forward(x)
        b = deployed.forward(x)
        for ta, tb in zip(a.box_logits + a.face_logits + a.kpt_raw, b.box_logits + b.face_logits + b.kpt_raw):
            worst = max(worst, float(np.abs(ta.astype(np.float64) - tb.astype(np.float64)).max()))
    print(f"params train form:  {params_before}")
    print(f"params deploy form: {params_after}")
    if fused == 0:
        print("0 fused blocks (configuration has no multi-branch convolutions)")
    print(f"max deviation over {args.n} inputs: {worst:.6e}")
    ok = worst <= 1e-4
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


def _infer_network(args, out_records):
    cfg = model_config(args.config)
    net = build_model(cfg, seed=args.seed)
    if args.weights:
        dataio.load_weights(args.weights, net)
    decode_cfg = DecodeConfig(conf_threshold=args.conf, iou_threshold=args.iou)
    model3d = _pose_assets()

    image = dataio.load_image_tensor(args.input)
    _, _, orig_h, orig_w = image.shape
    boxed, scale, pad_x, pad_y = letterbox(image, args.imgsz)
    outputs = forward(net, boxed)
    dets = nms(decode_boxes(outputs, decode_cfg), decode_cfg.iou_threshold)
    cam = CameraIntrinsics.for_image(orig_w, orig_h)

    faces = []
    for det in dets:
        det = unletterbox_detection(det, scale, pad_x, pad_y)
        angles = None
        try:
            pose = pose_from_detection(det, model3d, cam)
            angles = (pose.yaw, pose.pitch, pose.roll)
        except (PoseError, ShapeError):
            pass  # face kept, pose column absent
        kpts = det.landmarks.copy()
        kpts[:, 0] /= orig_w
        kpts[:, 1] /= orig_h
        kpts[:, 2] = np.where(kpts[:, 2] > 0.5, 2.0, 0.0)
        faces.append(
            dataio.FaceAnnotation(
                box=np.array([det.cx / orig_w, det.cy / orig_h, det.w / orig_w, det.h / orig_h]),
                kpts=kpts,
                conf=det.conf,
                angles=angles,
            )
        )
    image_id = Path(args.input).stem
    out_records.append(dataio.AnnotationRecord(image_id=image_id, width=orig_w, height=orig_h, faces=faces))
    return len(dets)


def _infer_landmarks(args, out_records):
    records = dataio.parse_annotations(args.input)
    model3d = _pose_assets()
    n = 0
    for rec in records:
        cam = CameraIntrinsics.for_image(rec.width, rec.height)
        faces = []
        for face in rec.faces:
            lm = face.kpts.copy()
            lm[:, 0] *= rec.width
            lm[:, 1] *= rec.height
            angles = None
            try:
                pose = pose_from_detection(_DetView(lm), model3d, cam)
                angles = (pose.yaw, pose.pitch, pose.roll)
            except (PoseError, ShapeError):
                pass
            faces.append(
                dataio.FaceAnnotation(
                    box=face.box.copy(),
                    kpts=face.kpts.copy(),
                    conf=face.conf if face.conf is not None else 1.0,
                    angles=angles,
                )
            )
            n += 1
        out_records.append(
            dataio.AnnotationRecord(image_id=rec.image_id, width=rec.width, height=rec.height, faces=faces)
        )
    return n


class _DetView:
    def __init__(self, landmarks):
        self.landmarks = landmarks


def cmd_infer(args):
    _echo_config(
        "infer",
        {"input": args.input, "out": args.out, "weights": args.weights, "config": args.config,
         "conf": args.conf, "iou": args.iou, "imgsz": args.imgsz, "seed": args.seed},
    )
    out_records = []
    if args.input.endswith(".npy"):
        n = _infer_network(args, out_records)
    elif args.input.endswith(".txt"):
        n = _infer_landmarks(args, out_records)
    else:
        print(f"cannot tell input mode from extension: {args.input}", file=sys.stderr)
        return 2
    dataio.write_annotations(out_records, args.out)
    print(f"wrote {n} faces across {len(out_records)} images to {args.out}")
    return 0


def cmd_eval(args):
    _echo_config(
        "eval",
        {"gt": args.gt, "pred": args.pred, "report": args.report,
         "exclude_high_nme": args.exclude_high_nme, "normalizer": args.normalizer},
    )
    gt = dataio.parse_annotations(args.gt)
    pred = dataio.parse_annotations(args.pred)
    report = metrics.evaluate(
        gt, pred, exclude_high_nme=args.exclude_high_nme, normalizer=args.normalizer
    )
    rendered = metrics.format_report(report, args.report)
    print(rendered, end="")
    if args.out:
        Path(args.out).write_text(rendered, encoding="utf-8")
    return 0


def cmd_pose(args):
    _echo_config("pose", {"gt": args.gt, "pred": args.pred, "report": args.report})
    gt = dataio.parse_annotations(args.gt)
    pred = dataio.parse_annotations(args.pred)
    report = metrics.evaluate(gt, pred)
    if report.ame is None:
        print("no matched face pairs carry Euler angles", file=sys.stderr)
        return 1
    yaw, pitch, roll, mean = report.ame
    if args.report == "kv":
        out = f"ame_yaw={yaw!r}\name_pitch={pitch!r}\name_roll={roll!r}\name_mean={mean!r}\n"
    else:
        out = f"ame (deg): yaw {yaw:.6f}  pitch {pitch:.6f}  roll {roll:.6f}  mean {mean:.6f}\n"
    print(out, end="")
    if args.out:
        Path(args.out).write_text(out, encoding="utf-8")
    return 0


def cmd_synth(args):
    _echo_config(
        "synth",
        {"out": args.out, "n_images": args.n_images, "faces_per_image": args.faces_per_image,
         "noise_sigma": args.noise_sigma, "imgsz": args.imgsz, "seed": args.seed},
    )
    spec = dataio.SceneSpec(
        n_images=args.n_images,
        faces_per_image=args.faces_per_image,
        image_size=(args.imgsz, args.imgsz),
        noise_sigma=args.noise_sigma,
        seed=args.seed,
    )
    records, _ = dataio.generate_synthetic(spec)
    dataio.write_annotations(records, args.out)
    print(f"wrote {sum(len(r.faces) for r in records)} faces across {len(records)} images to {args.out}")
    return 0


def _time_forward(net, x, reps):
    times = []
    for _ in range(reps):
        start = time.perf_counter()
        net.forward(x)
        times.append((time.perf_counter() - start) * 1e3)
    return times


def cmd_bench(args):
    cfg, net = _build(args)
    _echo_config(
        "bench",
        {"config": args.config, "imgsz": args.imgsz, "n": args.n, "seed": args.seed,
         "stem": cfg.stem_kind, "bottleneck": cfg.bottleneck_kind},
    )
    decode_cfg = DecodeConfig(conf_threshold=args.conf, iou_threshold=args.iou)
    deployed = net.deploy()
    rng = np.random.default_rng(args.seed)
    x = rng.uniform(0.0, 1.0, (1, 3, args.imgsz, args.imgsz)).astype(np.float32)

    net.forward(x)  # warm any jit caches before timing
    train_times = _time_forward(net, x, args.n)
    deploy_times = _time_forward(deployed, x, args.n)

    outputs = forward(deployed, x)
    post_times = []
    for _ in range(args.n):
        start = time.perf_counter()
        nms(decode_boxes(outputs, decode_cfg), decode_cfg.iou_threshold)
        post_times.append((time.perf_counter() - start) * 1e3)

    def stats(name, ts):
        ordered = sorted(ts)
        p95 = ordered[min(len(ordered) - 1, int(0.95 * len(ordered)))]
        print(
            f"{name}: mean {statistics.mean(ts):.2f} ms  median {statistics.median(ts):.2f} ms"
            f"  p95 {p95:.2f} ms"
        )

    stats("forward (train form) ", train_times)
    stats("forward (deploy form)", deploy_times)
    stats("postprocess          ", post_times)
    ratio = statistics.median(train_times) / statistics.median(deploy_times)
    print(f"fused speedup ratio: {ratio:.3f}")
    return 0


def cmd_init_weights(args):
    cfg, net = _build(args)
    _echo_config(
        "init-weights",
        {"config": args.config, "seed": args.seed, "out": args.out,
         "stem": cfg.stem_kind, "bottleneck": cfg.bottleneck_kind},
    )
    dataio.save_weights(net, args.out)
    print(f"wrote {count_params(net)} parameters to {args.out}")
    return 0


def _add_common(p, weights=False):
    p.add_argument("--config", default="tiny", help="preset name or config file path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--imgsz", type=int, default=640)
    p.add_argument("--conf", type=float, default=0.002, help="confidence threshold")
    p.add_argument("--iou", type=float, default=0.7, help="duplicate-suppression IoU threshold")
    if weights:
        p.add_argument("--weights", default=None, help="weights file to load")


def build_parser():
    parser = argparse.ArgumentParser(prog="facekit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fuse-check", help="verify multi-branch fusion preserves outputs")
    _add_common(p)
    p.add_argument("--n", type=int, default=3, help="random inputs to compare")
    p.add_argument("--perturb", action="store_true", help="corrupt a fused weight (negative control)")
    p.set_defaults(fn=cmd_fuse_check)

    p = sub.add_parser("infer", help="run detection on a .npy image or pose on a .txt landmark file")
    _add_common(p, weights=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--out", default=None, help="also write the report here")
    p.add_argument("--report", choices=("text", "kv"), default="text")
    p.add_argument("--exclude-high-nme", action="store_true")
    p.add_argument("--normalizer", choices=("interocular", "bbox"), default="interocular")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("pose", help="angle-error report only")
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--report", choices=("text", "kv"), default="text")
    p.set_defaults(fn=cmd_pose)

    p = sub.add_parser("synth", help="generate a synthetic labeled dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-images", type=int, default=50)
    p.add_argument("--faces-per-image", type=int, default=1)
    p.add_argument("--noise-sigma", type=float, default=0.0)
    p.add_argument("--imgsz", type=int, default=640)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("bench", help="latency of train vs deploy forms plus postprocess")
    _add_common(p)
    p.add_argument("--n", type=int, default=5, help="timing repetitions")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("init-weights", help="build a seeded model and save its weights")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_init_weights)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    try:
        return args.fn(args)
    except (FileNotFoundError, OSError, FormatError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return 3
    except FacekitError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
