"""Command-line entry point: ``abrdf {generate,train,render,eval}``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from abrdf.camera import CAMERA_RADIUS, T_FAR, CameraModel, SceneTransform
from abrdf.dataset import generate_synthetic, load_dataset
from abrdf.dataset.io import read_sidecar, write_normal_png, write_png, write_sidecar
from abrdf.dataset.synthetic import SyntheticScene
from abrdf.diffcore.checkpoint import load_checkpoint
from abrdf.errors import ConfigurationError, DatasetError, DomainError, NumericError, UsageError
from abrdf.evaluation import EvalReport, mean_angular_error, render_view
from abrdf.fields import VARIANTS, ModelConfig
from abrdf.renderer import RenderConfig
from abrdf.training import TrainConfig, train

log = logging.getLogger("abrdf")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
BUFFERS = ("rgb", "normal", "shadow", "albedo", "depth")
CHECKPOINT_NAME = "checkpoint.abrdf"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _vec3(text: str) -> np.ndarray:
    try:
        v = np.array([float(x) for x in text.split(",")], dtype=np.float64)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected x,y,z, got {text!r}") from None
    if v.shape != (3,) or not np.all(np.isfinite(v)) or np.linalg.norm(v) == 0:
        raise argparse.ArgumentTypeError(f"expected a non-zero x,y,z vector, got {text!r}")
    return v / np.linalg.norm(v)


def _view(text: str):
    if text == "top":
        return text
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError("--view takes a view index or 'top'") from None


def _positive(kind):
    def parse(text):
        x = kind(text)
        if x <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return x
    return parse


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="abrdf", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write the synthetic sphere-plus-occluder dataset")
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--views", type=_positive(int), default=16)
    g.add_argument("--lights", type=_positive(int), default=16)
    g.add_argument("--resolution", type=_positive(int), default=64)

    t = sub.add_parser("train", help="fit the fields to a dataset")
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--variant", choices=VARIANTS, default="lambertian")
    t.add_argument("--scale", choices=("desk", "full"), default="desk",
                   help="network and sampling size (default: desk)")
    t.add_argument("--iters", type=_positive(int))
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--n-coarse", type=_positive(int))
    t.add_argument("--n-fine", type=int)
    t.add_argument("--batch", type=_positive(int))
    t.add_argument("--lambda-sil", type=float, default=0.1)
    t.add_argument("--gamma", type=_positive(float), default=2.2)
    t.add_argument("--lr", type=_positive(float), help="initial learning rate (default: per scale)")
    t.add_argument("--log-every", type=_positive(int), default=1)
    t.add_argument("--checkpoint-every", type=int, default=0)

    r = sub.add_parser("render", help="render or relight views from a checkpoint")
    r.add_argument("--checkpoint", type=Path, required=True,
                   help="checkpoint file or the training output directory")
    r.add_argument("--data", type=Path, help="dataset supplying camera poses")
    r.add_argument("--out", type=Path, required=True)
    r.add_argument("--view", type=_view, default=1, help="view number (1-based) or 'top' for a top-down camera")
    r.add_argument("--light", type=_vec3, help="light direction x,y,z (default: along the view vector)")
    r.add_argument("--light-sweep", type=_positive(int), metavar="K",
                   help="render K lights rotating about the view axis")
    r.add_argument("--sweep-angle", type=float, default=45.0,
                   help="angle in degrees between swept lights and the view axis")
    r.add_argument("--buffer", choices=BUFFERS, action="append",
                   help="buffer to write; repeatable (default: all available)")
    r.add_argument("--gamma", type=_positive(float))
    r.add_argument("--n-coarse", type=_positive(int))
    r.add_argument("--n-fine", type=int)

    e = sub.add_parser("eval", help="score normal maps against ground truth")
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--checkpoint", type=Path, help="render normals from this checkpoint")
    e.add_argument("--estimates", type=Path,
                   help="directory of view_XX_normal.bin world-frame normal maps instead of rendering")
    e.add_argument("--out", type=Path, required=True, help="CSV report path")
    e.add_argument("--object", help="row label (default: dataset directory name)")
    e.add_argument("--n-coarse", type=_positive(int))
    e.add_argument("--n-fine", type=int)
    return ap


def _checkpoint_path(path: Path) -> Path:
    p = path / CHECKPOINT_NAME if path.is_dir() else path
    if not p.exists():
        raise DatasetError(f"checkpoint {p} not found")
    return p


def _load_model(path: Path, args):
    ck = load_checkpoint(_checkpoint_path(path))
    if "model" not in ck.extra:
        raise ConfigurationError(f"{path}: checkpoint has no model description")
    cfg = ModelConfig.from_dict(ck.extra["model"])
    rcfg = RenderConfig(**ck.extra.get("render", {}))
    over = {"perturb": False}
    for name, field in (("n_coarse", "n_coarse"), ("n_fine", "n_fine"), ("gamma", "gamma")):
        if getattr(args, name, None) is not None:
            over[field] = getattr(args, name)
    return ck, cfg, replace(rcfg, **over)


def cmd_generate(args) -> int:
    root = generate_synthetic(args.out, SyntheticScene(), args.views, args.lights, args.resolution)
    print(f"wrote {args.views} views x {args.lights} lights to {root}")
    return EXIT_OK


def cmd_train(args) -> int:
    ds = load_dataset(args.data)
    if args.scale == "desk":
        cfg = ModelConfig.desk(args.variant)
        rcfg, tcfg = RenderConfig.desk(), TrainConfig.desk()
    else:
        cfg = ModelConfig(variant=args.variant)
        rcfg, tcfg = RenderConfig(), TrainConfig()
    rover = {"gamma": args.gamma}
    if args.n_coarse is not None:
        rover["n_coarse"] = args.n_coarse
    if args.n_fine is not None:
        rover["n_fine"] = args.n_fine
    rcfg = replace(rcfg, **rover)
    tover = {"seed": args.seed, "lambda_sil": args.lambda_sil,
             "log_every": args.log_every, "checkpoint_every": args.checkpoint_every}
    if args.lr is not None:
        tover["lr"] = args.lr
    if args.iters is not None:
        tover["iterations"] = args.iters
    if args.batch is not None:
        tover["batch_size"] = args.batch
    tcfg = replace(tcfg, **tover)

    def progress(m):
        if m["step"] % max(tcfg.iterations // 20, 1) == 0:
            log.info("step %d  L_app %.5g  L_sil %.5g", m["step"], m["L_app"], m["L_sil"])

    _, _, hist = train(ds, cfg, rcfg, tcfg, args.out, progress=progress)
    print(f"trained {len(hist)} steps; loss {hist[0]['total']:.5g} -> {hist[-1]['total']:.5g}; "
          f"checkpoint {args.out / CHECKPOINT_NAME}")
    return EXIT_OK


def top_down_camera(cameras: list[CameraModel], transform: SceneTransform) -> CameraModel:
    """Camera above the scene centre, looking down the mean camera up-axis."""
    up = -np.mean([c.rotation[1] for c in cameras], axis=0)
    if np.linalg.norm(up) < 1e-6:
        raise ConfigurationError("cannot infer an up direction from the dataset cameras")
    up /= np.linalg.norm(up)
    centre = transform.invert(np.zeros(3))
    ref = cameras[0]
    eye = centre + up * (CAMERA_RADIUS / transform.scale)
    return CameraModel.look_at(eye, centre, ref.forward, ref.fx, ref.width, ref.height)


def sweep_lights(camera: CameraModel, k: int, angle_deg: float) -> np.ndarray:
    """``k`` directions at ``angle_deg`` from the view vector, a full turn about it."""
    axis = -camera.forward
    e1, e2 = camera.rotation[0], -camera.rotation[1]
    phi = 2.0 * np.pi * np.arange(k) / k
    a = np.radians(angle_deg)
    return (np.cos(a) * axis[None, :]
            + np.sin(a) * (np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2))


def _write_buffer(out: Path, stem: str, name: str, img, scale_depth: float) -> list[Path]:
    if name == "normal":
        return [write_normal_png(out / f"{stem}.png", img), write_sidecar(out / f"{stem}.bin", img)]
    if name == "depth":
        return [write_png(out / f"{stem}.png", np.clip(img / scale_depth, 0, 1), bits=16),
                write_sidecar(out / f"{stem}.bin", img)]
    return [write_png(out / f"{stem}.png", img)]


def cmd_render(args) -> int:
    ck, cfg, rcfg = _load_model(args.checkpoint, args)
    transform = SceneTransform.from_dict(ck.transform)
    if args.data is not None:
        cameras = load_dataset(args.data, eager=False).cameras
    else:
        raise UsageError("render needs --data for camera poses")
    if args.view == "top":
        camera, tag = top_down_camera(cameras, transform), "top"
    else:
        if not 1 <= args.view <= len(cameras):
            raise UsageError(f"--view {args.view} out of range 1..{len(cameras)}")
        camera, tag = cameras[args.view - 1], f"view_{args.view:02d}"
    if args.light_sweep:
        if args.light is not None:
            raise UsageError("--light and --light-sweep are exclusive")
        lights = sweep_lights(camera, args.light_sweep, args.sweep_angle)
    else:
        lights = [args.light if args.light is not None else -camera.forward]
    wanted = args.buffer or [b for b in BUFFERS if b != "albedo" or cfg.variant == "lambertian"]
    if "albedo" in wanted and cfg.variant != "lambertian":
        raise UsageError("the albedo buffer exists only for the lambertian variant")
    args.out.mkdir(parents=True, exist_ok=True)
    written = []
    for k, s in enumerate(lights):
        res = render_view(ck.params, cfg, camera, s, transform, rcfg)
        for name in wanted:
            img = res.buffer(name)
            if not np.all(np.isfinite(img)):
                raise NumericError(f"non-finite {name} buffer for light {k}")
            stem = f"{tag}_{name}" if not args.light_sweep else f"{tag}_{name}_{k:03d}"
            written += _write_buffer(args.out, stem, name, img, T_FAR / transform.scale)
    print(f"wrote {len(written)} files to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if (args.checkpoint is None) == (args.estimates is None):
        raise UsageError("eval needs exactly one of --checkpoint or --estimates")
    ds = load_dataset(args.data, eager=False)
    model = _load_model(args.checkpoint, args) if args.checkpoint is not None else None
    errors = []
    for v, vd in enumerate(ds.views):
        cam = vd.camera
        gt = ds.ground_truth_normals(v)
        if model is not None:
            ck, cfg, rcfg = model
            est = render_view(ck.params, cfg, cam, -cam.forward, ds.transform, rcfg).normal_world
        else:
            path = args.estimates / f"view_{v + 1:02d}_normal.bin"
            if not path.exists():
                raise DatasetError(f"missing estimate {path}")
            est = read_sidecar(path).astype(np.float64)
        if est.shape != gt.shape:
            raise DatasetError(f"view {v + 1}: estimate shape {est.shape} does not match {gt.shape}")
        # scored in the camera frame; rotations leave angles unchanged but keep the maps comparable
        R = cam.rotation
        errors.append(mean_angular_error(est @ R.T, gt @ R.T, vd.mask))
    report = EvalReport()
    report.add(args.object or Path(args.data).resolve().name, errors)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(report.to_csv())
    print(report.to_text(), end="")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "render": cmd_render, "eval": cmd_eval}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigurationError, DomainError) as exc:
        print(f"abrdf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, OSError) as exc:
        print(f"abrdf: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"abrdf: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
