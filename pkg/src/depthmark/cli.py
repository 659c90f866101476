"""Command-line interface: ``synth``, ``train``, ``predict`` and ``eval``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
Logs go to standard error; data products go to files.
"""

import argparse
import ast
import logging
import sys
from pathlib import Path

import numpy as np

from . import model_io
from .cascade import RankDeficientError
from .depth import FaceBox, Shape, detect_face
from .estimators import GridLandmarker, SmufLandmarker
from .evaluation import bench_predict, ced_csv, make_record, summarize, summary_csv
from .gating import PoseBin, gated_predict, selection_correct
from .io import (
    AnnotationFormatError,
    DepthFormatError,
    load_depth_image,
    read_annotation,
    read_manifest,
    sidecar_path,
    write_annotation,
    write_depth_image,
    write_manifest,
)
from .synth import HeadParams, make_dataset

log = logging.getLogger("depthmark")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# RunConfig keys: the estimator parameters plus the method selector
GRID_KEYS = set(GridLandmarker().get_params())
SMUF_KEYS = set(SmufLandmarker().get_params())
CONFIG_KEYS = GRID_KEYS | SMUF_KEYS | {"method", "dms"}


def _value(text):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def read_config(path):
    """Flat ``key=value`` file; ``#`` starts a comment. Unknown keys are errors."""
    cfg = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from None
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, _, value = (t.strip() for t in line.partition("="))
        if key not in CONFIG_KEYS:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        cfg[key] = _value(value)
    return cfg


def build_estimator(cfg):
    cfg = dict(cfg)
    method = cfg.pop("method", "grid")
    if "dms" in cfg:
        cfg["n_dms"] = cfg.pop("dms")
    cls = {"grid": GridLandmarker, "smuf": SmufLandmarker}.get(method)
    if cls is None:
        raise UsageError(f"method must be grid or smuf, got {method!r}")
    allowed = set(cls().get_params())
    bad = sorted(set(cfg) - allowed)
    if bad:
        raise UsageError(f"keys {bad} do not apply to method {method}")
    try:
        est = cls(**cfg)
        if method == "grid":
            est.extractor()
            est.train_config()
        else:
            est.train_config()
        est._bins()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None
    return est


def _range(text):
    try:
        lo, hi = (float(t) for t in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected lo:hi, got {text!r}") from None
    if lo > hi:
        raise argparse.ArgumentTypeError(f"empty range {text!r}")
    return lo, hi


def _box(text):
    try:
        x, y, w, h = (float(t) for t in text.split(","))
        return FaceBox(x, y, w, h)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected x,y,w,h with w,h > 0, got {text!r}") from None


def _load_samples(manifest, subset=None):
    rows = read_manifest(manifest)
    root = Path(manifest).parent
    if subset:
        rows = [r for r in rows if r["subset"] == subset]
    if not rows:
        raise DataError(f"{manifest}: no samples" + (f" in subset {subset!r}" if subset else ""))
    out = []
    for r in rows:
        path = root / r["file"]
        if not path.exists():
            raise DataError(f"missing image {path}")
        out.append((r, path))
    return out


def cmd_synth(args):
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    if not 0.0 <= args.test_fraction < 1.0:
        raise UsageError("--test-fraction must lie in [0, 1)")
    lo, hi = args.yaw_range
    if lo < -90 or hi > 90:
        raise UsageError("--yaw-range must lie within -90:90")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc}") from None
    template = HeadParams(noise_sigma=args.noise)
    samples = make_dataset(
        args.n, (lo, hi), template, seed=args.seed,
        expression_range=args.expression_range, occlusion_prob=args.occlusion_prob,
    )
    n_test = int(round(args.test_fraction * args.n))
    rows = []
    for i, s in enumerate(samples):
        subset = "test" if i >= args.n - n_test else "train"
        name = f"face_{i:05d}.pgm"
        write_depth_image(out / name, s.image)
        write_annotation(sidecar_path(out / name), s.gt, s.yaw, subset)
        rows.append({"file": name, "yaw": s.yaw, "subset": subset})
    write_manifest(out / "manifest.tsv", rows)
    log.info("wrote %d samples to %s (seed %d)", args.n, out, args.seed)


def cmd_train(args):
    cfg = read_config(args.config) if args.config else {}
    for key in ("method", "dms"):
        if getattr(args, key) is not None:
            cfg[key] = getattr(args, key)
    cfg["seed"] = args.seed
    est = build_estimator(cfg)
    images, shapes, yaws = [], [], []
    for r, path in _load_samples(args.manifest, args.subset):
        images.append(load_depth_image(path))
        shape, _ = read_annotation(sidecar_path(path))
        if len(shape) != len(shape.expand()):
            shape = shape.expand()
        shapes.append(shape)
        yaws.append(r["yaw"])
    log.info("training %s on %d images", type(est).__name__, len(images))
    est.fit(images, shapes, yaws=yaws)
    for z, sub in enumerate(est.model_.subsets):
        m = sub.model
        for k, st in enumerate(m.stages):
            if hasattr(st, "W"):
                log.info("subset %d stage %d: W %dx%d, R %dx%d", z, k + 1, *st.W.shape, *st.R.shape)
        for k, t in enumerate(m.trace):
            before, after = (t["before"], t["after"]) if isinstance(t, dict) else t
            log.info("subset %d stage %d: training error %.4f -> %.4f px", z, k + 1, before, after)
    model_io.save_estimator(est, args.out)
    log.info("model written to %s", args.out)


def cmd_predict(args):
    try:
        est = model_io.load_estimator(args.model)
    except FileNotFoundError:
        raise DataError(f"missing model {args.model}") from None
    if args.image:
        items = [({"file": Path(p).name, "yaw": 0.0, "subset": ""}, Path(p)) for p in args.image]
        for _, p in items:
            if not p.exists():
                raise DataError(f"missing image {p}")
    elif args.manifest:
        items = _load_samples(args.manifest, args.subset)
    else:
        raise UsageError("give --manifest or --image")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for r, path in items:
        img = load_depth_image(path)
        box = args.box or detect_face(img)
        (shape,), (z,) = est.predict_with_subset([img], [box])
        b = est.model_.subsets[z].pose_bin
        target = out / sidecar_path(Path(r["file"])).name
        write_annotation(target, shape, r["yaw"], r["subset"], extra={
            "selected_subset": z,
            "selected_yaw_min": repr(float(b.yaw_min)),
            "selected_yaw_max": repr(float(b.yaw_max)),
            "box": ",".join(repr(float(v)) for v in (box.x, box.y, box.w, box.h)),
            "seed": est.seed,
        })
        rows.append({"file": target.name, "yaw": r["yaw"], "subset": r["subset"]})
    write_manifest(out / "predictions.tsv", rows)
    log.info("wrote %d predictions to %s", len(rows), out)


def cmd_eval(args):
    gt_items = _load_samples(args.manifest, args.subset)
    pred_dir = Path(args.pred)
    records = []
    for r, path in gt_items:
        pred_path = pred_dir / sidecar_path(Path(r["file"])).name
        if not pred_path.exists():
            raise DataError(f"no prediction for {r['file']} in {pred_dir}")
        gt, _ = read_annotation(sidecar_path(path))
        pred, head = read_annotation(pred_path)
        pitch = load_depth_image(path).pitch
        try:
            z = int(head.get("selected_subset", 0))
            b = PoseBin(float(head.get("selected_yaw_min", -90.0)), float(head.get("selected_yaw_max", 90.0)))
            box = FaceBox(*(float(v) for v in head["box"].split(","))) if "box" in head else None
        except (ValueError, KeyError) as exc:
            raise DataError(f"{pred_path}: bad prediction header: {exc}") from None
        records.append(make_record(pred, gt.expand() if len(gt) < 22 else gt, pitch, z,
                                   selection_correct(b, r["yaw"]), box, args.margin, name=r["file"]))
    summary = summarize(records)
    extra = {"seed": args.seed}
    if args.bench:
        if not args.model:
            raise UsageError("--bench needs --model")
        est = model_io.load_estimator(args.model)
        samples = []
        for _, path in gt_items[: args.bench_images]:
            img = load_depth_image(path)
            pre = est._prepare(img)
            samples.append((pre, detect_face(img)))
        summary.timing = bench_predict(
            lambda s, timer: gated_predict(s[0], s[1], est.model_, timer=timer),
            samples, args.bench_repetitions,
        )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.csv").write_text(summary_csv(summary, extra), encoding="utf-8")
    (out / "ced.csv").write_text(ced_csv(summary), encoding="utf-8")
    log.info("overall %.3f mm over %d/%d images; detection %.1f%%, selection %.1f%%",
             summary.overall_mean, summary.n_used, summary.n_records,
             summary.detection_rate, summary.selection_rate)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value configuration file")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=None, help="cap BLAS threads")
    common.add_argument("--out", required=True)
    common.add_argument("--log-level", default="INFO")

    p = argparse.ArgumentParser(prog="depthmark", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic corpus")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--yaw-range", type=_range, default=(-90.0, 90.0))
    s.add_argument("--expression-range", type=_range, default=(0.0, 0.0))
    s.add_argument("--occlusion-prob", type=float, default=0.0)
    s.add_argument("--noise", type=float, default=0.3, help="depth noise sigma, mm")
    s.add_argument("--test-fraction", type=float, default=0.0)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", parents=[common], help="train a gated model")
    t.add_argument("--manifest", required=True)
    t.add_argument("--subset", default="train", help="manifest subset to use ('' for all)")
    t.add_argument("--method", choices=("grid", "smuf"))
    t.add_argument("--dms", type=int, choices=(1, 3, 5))
    t.set_defaults(func=cmd_train)

    q = sub.add_parser("predict", parents=[common], help="predict landmarks")
    q.add_argument("--model", required=True)
    q.add_argument("--manifest")
    q.add_argument("--subset", default=None)
    q.add_argument("--image", nargs="+")
    q.add_argument("--box", type=_box, help="x,y,w,h; bypasses detection")
    q.set_defaults(func=cmd_predict)

    e = sub.add_parser("eval", parents=[common], help="score predictions")
    e.add_argument("--manifest", required=True)
    e.add_argument("--subset", default=None)
    e.add_argument("--pred", required=True, help="directory written by predict")
    e.add_argument("--margin", type=float, default=0.1)
    e.add_argument("--bench", action="store_true", help="add per-phase timings")
    e.add_argument("--model", help="model for --bench")
    e.add_argument("--bench-images", type=int, default=100)
    e.add_argument("--bench-repetitions", type=int, default=1)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads is not None:
            if args.threads < 1:
                raise UsageError("--threads must be >= 1")
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                args.func(args)
        else:
            args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"depthmark: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (np.linalg.LinAlgError, RankDeficientError, FloatingPointError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except (DataError, DepthFormatError, AnnotationFormatError, model_io.ModelFormatError,
            OSError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
