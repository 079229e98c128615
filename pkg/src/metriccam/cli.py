"""Command-line entry points.

Exit codes: 0 success, 2 bad usage or config errors, 3 missing or
malformed files, 4 training divergence, 5 internal failures and
degenerate numeric inputs (constant predictions, empty masks). The
METRICCAM_THREADS environment variable caps the thread count of the
numeric backends; it is applied before numpy is imported, which is why
the heavy imports in this module live inside functions.

Config precedence for train/ablate: explicit flags beat the --config
JSON file, which beats built-in defaults.
"""

import argparse
import json
import os
import sys
import traceback
from dataclasses import dataclass

from .errors import (DegenerateInputError, DivergenceError, DomainError,
                     FileFormatError, MetricCamError)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4
EXIT_INTERNAL = 5

_THREAD_VARS = ("OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "OMP_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS",
                "NUMBA_NUM_THREADS")


def _configure_threads() -> None:
    raw = os.environ.get("METRICCAM_THREADS")
    if raw is None or raw == "":
        return
    try:
        n = int(raw)
    except ValueError:
        raise DomainError(f"METRICCAM_THREADS must be an integer, got {raw!r}")
    if n < 1:
        raise DomainError("METRICCAM_THREADS must be >= 1")
    for var in _THREAD_VARS:
        os.environ[var] = str(n)


def _print_json(obj, path=None) -> None:
    from . import fileio

    if path is None:
        sys.stdout.write(fileio.dump_json(obj).decode())
    else:
        fileio.write_json(path, obj)
        print(path)


def _csv_floats(text: str) -> tuple:
    try:
        return tuple(float(v) for v in text.split(",") if v != "")
    except ValueError:
        raise DomainError(f"expected comma-separated numbers, got {text!r}")


def _csv_ints(text: str) -> tuple:
    try:
        return tuple(int(v) for v in text.split(",") if v != "")
    except ValueError:
        raise DomainError(f"expected comma-separated integers, got {text!r}")


def _pixel(text: str) -> tuple:
    parts = text.split(",")
    if len(parts) != 2:
        raise DomainError(f"expected a pixel as u,v, got {text!r}")
    try:
        return int(parts[0]), int(parts[1])
    except ValueError:
        raise DomainError(f"expected integer pixel coordinates, got {text!r}")


@dataclass(frozen=True)
class ExperimentManifest:
    """Paths and seed pinning down one reproducible experiment."""

    dataset: str
    out: str
    seed: int
    config_path: str | None = None

    def validate(self) -> None:
        if not os.path.exists(self.dataset):
            raise FileNotFoundError(f"dataset manifest not found: {self.dataset}")
        if self.config_path is not None and not os.path.exists(self.config_path):
            raise FileNotFoundError(f"config file not found: {self.config_path}")


def cmd_synth(args) -> int:
    from . import synthscene

    cfg = synthscene.DatasetConfig(
        focals=_csv_floats(args.focals), per_focal=args.per_focal,
        width=args.width, height=args.height, seed=args.seed,
        channels=args.channels)
    manifest = synthscene.make_dataset(args.out, cfg)
    print(manifest)
    return EXIT_OK


_TRAIN_KEYS = ("manifest", "variant", "canonical_focal", "iterations",
               "batch_size", "lr", "crop_width", "crop_height", "hflip_prob",
               "seed", "train_focals", "loss_weights", "freeze_layers",
               "widths", "log_every", "divergence_limit")


def _load_config_file(path):
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as err:
            raise FileFormatError(f"config file {path}: {err}") from err
    if not isinstance(obj, dict):
        raise FileFormatError(f"config file {path} must hold a JSON object")
    unknown = sorted(set(obj) - set(_TRAIN_KEYS))
    if unknown:
        raise DomainError(f"unknown config keys: {', '.join(unknown)}")
    return obj


def _train_config(args):
    from . import model

    merged = _load_config_file(getattr(args, "config", None))
    flags = {
        "manifest": args.manifest,
        "variant": args.variant,
        "canonical_focal": args.canonical_focal,
        "iterations": args.iterations,
        "batch_size": args.batch_size,
        "lr": args.lr,
        "crop_width": args.crop_width,
        "crop_height": args.crop_height,
        "hflip_prob": args.hflip_prob,
        "seed": args.seed,
        "train_focals": _csv_floats(args.train_focals) if args.train_focals else None,
        "freeze_layers": _csv_ints(args.freeze_layers) if args.freeze_layers else None,
        "log_every": args.log_every,
    }
    for key, val in flags.items():
        if val is not None:
            merged[key] = val
    if args.loss_weight:
        weights = dict(merged.get("loss_weights") or {})
        for item in args.loss_weight:
            if "=" not in item:
                raise DomainError(f"--loss-weight expects name=value, got {item!r}")
            name, _, val = item.partition("=")
            try:
                weights[name] = float(val)
            except ValueError:
                raise DomainError(f"bad loss weight value {val!r}")
        merged["loss_weights"] = weights
    if "manifest" not in merged:
        raise DomainError("a dataset manifest is required "
                          "(--manifest flag or config file)")
    for key in ("train_focals", "freeze_layers", "widths"):
        if merged.get(key) is not None:
            merged[key] = tuple(merged[key])
    try:
        return model.TrainConfig(**merged)
    except TypeError as err:
        raise DomainError(f"bad training config: {err}") from err


def _config_dict(cfg) -> dict:
    from dataclasses import asdict

    d = asdict(cfg)
    d["manifest"] = str(d["manifest"])
    if d["train_focals"] is not None:
        d["train_focals"] = list(d["train_focals"])
    d["widths"] = list(d["widths"])
    d["freeze_layers"] = list(d["freeze_layers"])
    return d


def cmd_train(args) -> int:
    import os.path

    from . import __version__, fileio, model

    cfg = _train_config(args)
    ExperimentManifest(str(cfg.manifest), args.out, cfg.seed,
                       args.config).validate()
    os.makedirs(args.out, exist_ok=True)
    result = model.train(cfg)
    ckpt = os.path.join(args.out, "model.ckpt")
    model.save_model(ckpt, result.model, {
        "variant": cfg.variant,
        "canonical_focal": cfg.canonical_focal,
        "iterations": cfg.iterations,
        "seed": cfg.seed,
    })
    fileio.write_history_csv(os.path.join(args.out, "history.csv"),
                             result.history)
    summary = {
        "version": __version__,
        "config": _config_dict(cfg),
        "groups": list(result.groups),
        "in_channels": result.in_channels,
        "n_params": result.model.n_params,
        "final_loss": result.history[-1]["total"],
        "checkpoint": ckpt,
    }
    _print_json(summary, os.path.join(args.out, "train_summary.json"))
    return EXIT_OK


def cmd_ablate(args) -> int:
    import os.path

    from . import __version__, model

    cfg = _train_config(args)
    ExperimentManifest(str(cfg.manifest), args.out, cfg.seed,
                       args.config).validate()
    if not os.path.exists(args.eval_manifest):
        raise FileNotFoundError(
            f"eval manifest not found: {args.eval_manifest}")
    variants = (tuple(args.variants.split(","))
                if args.variants else model.VARIANTS)
    report = model.ablate(cfg, args.eval_manifest, variants)
    out = {
        "version": __version__,
        "config": _config_dict(cfg),
        "eval_manifest": str(args.eval_manifest),
        "variants": report,
    }
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    _print_json(out, args.out)
    return EXIT_OK


def _load_model_for_eval(args):
    from . import model

    net, header = model.load_model(args.model)
    variant = args.variant or header.get("variant")
    if variant is None:
        raise DomainError("checkpoint lacks a variant; pass --variant")
    focal = args.canonical_focal or header.get("canonical_focal")
    if focal is None:
        raise DomainError("checkpoint lacks a canonical focal; "
                          "pass --canonical-focal")
    return net, variant, float(focal)


def _eval_depth_files(args) -> int:
    from . import __version__, evalmetrics, fileio
    from .camera import DepthMap

    if args.gt is None:
        raise DomainError("--pred needs --gt, the reference depth file")
    pred_vals, pred_mask = fileio.read_pfm(args.pred)
    gt_vals, gt_mask = fileio.read_pfm(args.gt)
    if pred_vals.shape != gt_vals.shape:
        raise DomainError(
            f"shape mismatch: pred {pred_vals.shape} vs gt {gt_vals.shape}")
    values = pred_vals
    gt = DepthMap(gt_vals, gt_mask & pred_mask)
    aligned = None
    if args.align:
        res = evalmetrics.align_scale_shift(values, gt)
        values = res.values
        gt = DepthMap(gt.values, res.mask)
        aligned = {"scale": res.scale, "shift": res.shift,
                   "n_nonpositive": res.n_nonpositive}
    m = evalmetrics.depth_metrics(values, gt)
    report = {
        "version": __version__,
        "pred": str(args.pred),
        "gt": str(args.gt),
        "aligned": aligned,
        "metrics": m.to_dict(),
    }
    _print_json(report, args.out)
    return EXIT_OK


def cmd_eval_depth(args) -> int:
    import numpy as np

    from . import __version__, evalmetrics, model

    if args.pred is not None:
        return _eval_depth_files(args)
    if args.model is None or args.manifest is None:
        raise DomainError("eval-depth needs either --pred/--gt files "
                          "or --model/--manifest")
    net, variant, focal = _load_model_for_eval(args)
    frames = model.load_manifest_frames(args.manifest)
    per_group = {}
    for fr, group, _ in frames:
        pred = model.predict_metric(net, fr.image, fr.intrinsics, variant, focal)
        values = pred.values
        gt = fr.depth
        if args.align:
            res = evalmetrics.align_scale_shift(values, gt)
            values = res.values
            gt = type(gt)(gt.values, res.mask)
        m = evalmetrics.depth_metrics(values, gt)
        per_group.setdefault(group, []).append(m.to_dict())
    groups = {}
    for g, rows in sorted(per_group.items()):
        agg = {key: float(np.mean([r[key] for r in rows]))
               for key in rows[0] if key != "n_valid"}
        agg["n_frames"] = len(rows)
        groups[str(g)] = agg
    report = {
        "version": __version__,
        "model": str(args.model),
        "manifest": str(args.manifest),
        "variant": variant,
        "canonical_focal": focal,
        "aligned": bool(args.align),
        "groups": groups,
        "mean_absrel": float(np.mean([g["absrel"] for g in groups.values()])),
    }
    _print_json(report, args.out)
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    from . import __version__, fileio, model, recon
    from .camera import DepthMap

    if args.manifest is None:
        raise DomainError("reconstruct needs --manifest")
    if not args.gt and args.model is None:
        raise DomainError("reconstruct needs --model, or --gt for "
                          "ground-truth depth")
    if args.report and not args.ref:
        raise DomainError("--report needs --ref, the reference PLY "
                          "to score against")
    net = variant = focal = None
    if not args.gt:
        net, variant, focal = _load_model_for_eval(args)
    frames = model.load_manifest_frames(args.manifest)
    if args.frames:
        wanted = _csv_ints(args.frames)
        bad = [i for i in wanted if not (0 <= i < len(frames))]
        if bad:
            raise DomainError(f"frame indices out of range: {bad}")
        frames = [frames[i] for i in wanted]
    clouds = []
    for fr, _, _ in frames:
        if args.gt:
            dm = fr.depth
        else:
            pred = model.predict_metric(net, fr.image, fr.intrinsics,
                                        variant, focal)
            dm = DepthMap(pred.values, fr.depth.mask)
        pts = recon.unproject(dm, fr.intrinsics)
        clouds.append((pts, fr.pose.rotation, fr.pose.translation))
    fused = recon.transform_fuse(clouds, voxel=args.voxel)
    fileio.write_ply(args.out, fused)
    print(args.out)
    if args.report:
        ref = fileio.read_ply(args.ref)
        res = recon.icp(fused, ref, trim_fraction=args.icp_trim)
        aligned = fused @ res.rotation.T + res.translation
        fs = recon.fscore(aligned, ref, tau=args.tau)
        report = {
            "version": __version__,
            "model": None if args.gt else str(args.model),
            "source": "gt" if args.gt else "prediction",
            "reference": str(args.ref),
            "n_frames": len(frames),
            "n_points": int(len(fused)),
            "voxel": args.voxel,
            "icp": {"rmse": res.rmse, "n_iterations": res.n_iterations,
                    "converged": res.converged},
            "chamfer_l1": recon.chamfer_l1(aligned, ref),
            **fs,
        }
        _print_json(report, args.report)
    return EXIT_OK


def cmd_measure(args) -> int:
    from . import __version__, model, recon

    net, variant, focal = _load_model_for_eval(args)
    frames = model.load_manifest_frames(args.manifest)
    if not (0 <= args.frame < len(frames)):
        raise DomainError(f"frame index {args.frame} out of range")
    fr, _, _ = frames[args.frame]
    pred = model.predict_metric(net, fr.image, fr.intrinsics, variant, focal)
    pred_map = type(fr.depth)(pred.values, fr.depth.mask)
    a = _pixel(args.pixel_a)
    b = _pixel(args.pixel_b)
    out = {
        "version": __version__,
        "frame": args.frame,
        "pixel_a": list(a),
        "pixel_b": list(b),
        "distance_m": recon.measure(pred_map, fr.intrinsics, a, b),
        "gt_distance_m": recon.measure(fr.depth, fr.intrinsics, a, b),
    }
    _print_json(out, args.out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    import numpy as np

    from . import losses
    from .camera import CameraIntrinsics, DepthMap, pixel_rays

    rng = np.random.default_rng(args.seed)
    h, w = args.height, args.width
    k = CameraIntrinsics(10.0, 10.0, w / 2.0, h / 2.0, w, h)
    gt_vals = rng.uniform(2.0, 8.0, (h, w))
    mask = np.ones((h, w), dtype=bool)
    mask[0, 0] = False
    gt = DepthMap(gt_vals, mask)
    x0 = gt_vals * rng.uniform(0.8, 1.25, (h, w))

    nrm = np.array([0.2, -0.3, -1.0])
    nrm /= np.linalg.norm(nrm)
    plane_depth = 5.0 / (pixel_rays(k) @ nrm / nrm[2])
    gt_plane = DepthMap(plane_depth, np.ones((h, w), dtype=bool))
    gt_normals = np.broadcast_to(nrm, (h, w, 3)).copy()
    plane_id = np.zeros((h, w), dtype=np.int32)
    x_plane = plane_depth * rng.uniform(0.9, 1.1, (h, w))

    checks = {
        "silog": (lambda x: _pair(losses.silog(x, gt)), x0),
        "patchnorm": (lambda x: _pair(losses.patchnorm(
            x, gt, np.random.default_rng(123))), x0),
        "vnl": (lambda x: _pair(losses.vnl(
            x, gt, k, np.random.default_rng(5), n_triplets=50)), x0),
        "pwn": (lambda x: _pair(losses.pwn(
            x, gt_plane, gt_normals, plane_id, k,
            np.random.default_rng(9), n_pairs=30)), x_plane),
    }
    failed = []
    results = {}
    for name, (fn, x) in checks.items():
        rep = losses.gradcheck(fn, x, rel_tol=args.tol)
        results[name] = {"max_rel_err": rep.max_rel_err,
                         "n_checked": rep.n_checked,
                         "passed": rep.max_rel_err < args.tol}
        if not results[name]["passed"]:
            failed.append(name)

    from . import __version__, model as model_mod

    net = model_mod.TinyDepthNet(in_channels=1,
                                 rng=np.random.default_rng(args.seed))
    x_in = rng.uniform(0.0, 1.0, (1, 1, h, w))
    layer_reports = model_mod.layer_gradcheck(
        net, x_in, rng=np.random.default_rng(args.seed + 1), sample=30,
        rel_tol=args.tol)
    layers = {}
    for name, rep in layer_reports.items():
        layers[name] = {"max_rel_err": rep.max_rel_err,
                        "n_checked": rep.n_checked,
                        "passed": rep.max_rel_err < args.tol}
        if not layers[name]["passed"]:
            failed.append(f"layer {name}")
    _print_json({
        "version": __version__,
        "config": {"seed": args.seed, "width": w, "height": h,
                   "tol": args.tol},
        "losses": results,
        "layers": layers,
    }, None)
    if failed:
        print(f"gradcheck FAILED: {', '.join(failed)}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


def _pair(result):
    return result.value, result.grad


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="metriccam",
        description="Metric depth from single images: synthetic data, "
                    "training, evaluation, reconstruction.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--focals", default="400,700,1000,1300",
                   help="comma-separated focal lengths in pixels")
    p.add_argument("--per-focal", type=int, default=24)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=48)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--channels", type=int, choices=(1, 3), default=1)
    p.set_defaults(func=cmd_synth)

    def add_train_args(p):
        p.add_argument("--manifest", default=None,
                       help="dataset manifest (here or in --config)")
        p.add_argument("--variant", default=None,
                       help="canon_label | canon_image | none | camconvs")
        p.add_argument("--canonical-focal", type=float, default=None)
        p.add_argument("--iterations", type=int, default=None)
        p.add_argument("--batch-size", type=int, default=None)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--crop-width", type=int, default=None)
        p.add_argument("--crop-height", type=int, default=None)
        p.add_argument("--hflip-prob", type=float, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--train-focals", default=None,
                       help="comma-separated subset of manifest focal groups")
        p.add_argument("--loss-weight", action="append", default=None,
                       metavar="NAME=VALUE")
        p.add_argument("--freeze-layers", default=None,
                       help="comma-separated layer indices to exclude "
                            "from optimization")
        p.add_argument("--log-every", type=int, default=None)
        p.add_argument("--config", default=None,
                       help="JSON config file; flags override its values")

    p = sub.add_parser("train", help="train one variant")
    add_train_args(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="train and score all variants")
    add_train_args(p)
    p.add_argument("--eval-manifest", required=True)
    p.add_argument("--variants", default=None,
                   help="comma-separated variant subset")
    p.add_argument("--out", required=True, help="report JSON path")
    p.set_defaults(func=cmd_ablate)

    def add_model_args(p, model_required=True):
        p.add_argument("--model", required=model_required, default=None)
        p.add_argument("--manifest", required=model_required, default=None)
        p.add_argument("--variant", default=None)
        p.add_argument("--canonical-focal", type=float, default=None)

    p = sub.add_parser("eval-depth",
                       help="score a model on a manifest, or one depth "
                            "file against another")
    add_model_args(p, model_required=False)
    p.add_argument("--pred", default=None,
                   help="predicted depth file; switches to file mode")
    p.add_argument("--gt", default=None, help="reference depth file")
    p.add_argument("--align", action="store_true",
                   help="least-squares scale/shift before scoring")
    p.add_argument("--out", default=None, help="report JSON path (default stdout)")
    p.set_defaults(func=cmd_eval_depth)

    p = sub.add_parser("reconstruct",
                       help="fuse predicted or ground-truth depth into a cloud")
    add_model_args(p, model_required=False)
    p.add_argument("--gt", action="store_true",
                   help="fuse ground-truth depth instead of predictions")
    p.add_argument("--frames", default=None, help="comma-separated frame indices")
    p.add_argument("--voxel", type=float, default=None)
    p.add_argument("--tau", type=float, default=0.05)
    p.add_argument("--ref", default=None, help="reference PLY for scoring")
    p.add_argument("--icp-trim", type=float, default=0.0,
                   help="fraction of worst correspondences to drop")
    p.add_argument("--out", required=True, help="output PLY path")
    p.add_argument("--report", default=None,
                   help="write icp-aligned chamfer/f-score vs --ref here")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("measure", help="distance between two pixels")
    add_model_args(p)
    p.add_argument("--frame", type=int, required=True)
    p.add_argument("--pixel-a", required=True, metavar="U,V")
    p.add_argument("--pixel-b", required=True, metavar="U,V")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_measure)

    p = sub.add_parser("gradcheck", help="finite-difference check of all losses")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--width", type=int, default=8)
    p.add_argument("--height", type=int, default=6)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    try:
        _configure_threads()
        try:
            args = build_parser().parse_args(argv)
        except SystemExit as err:
            return int(err.code or 0)
        return args.func(args)
    except DomainError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (FileFormatError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as err:
        print(f"error: training diverged at iteration {err.iteration}",
              file=sys.stderr)
        return EXIT_DIVERGED
    except DegenerateInputError as err:
        print(f"error: degenerate input: {err}", file=sys.stderr)
        return EXIT_INTERNAL
    except MetricCamError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception:
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
