"""Command-line entry point: ``mhformer {synth,train,eval,infer,stats,gradcheck}``.

Exit codes: 0 success, 2 validation error, 3 numerical failure, 4 I/O error.
"""

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from . import checkpoint, data, gradcheck, metrics, stats
from .config import ConfigError, ModelConfig, TrainConfig, tiny_config
from .model import export_attention, forward, hypothesis_decode, init_params
from .tensor import NonFiniteError, ShapeError
from .training import Amsgrad, predict_center, test_time_flip, train, write_loss_csv

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("mhformer")


class NumericFailure(Exception):
    pass


# --------------------------------------------------------------------------
# config plumbing
# --------------------------------------------------------------------------

def _flag(name):
    return "--" + name.replace("_", "-")


def _add_config_flags(p, cls, group_title):
    g = p.add_argument_group(group_title)
    for f in dataclasses.fields(cls):
        kind = type(f.default)
        if kind is bool:
            g.add_argument(_flag(f.name), dest=f"{cls.__name__}.{f.name}", type=_parse_bool, default=None, metavar="BOOL")
        else:
            g.add_argument(_flag(f.name), dest=f"{cls.__name__}.{f.name}", type=kind, default=None)


def _parse_bool(s):
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {s}")


def _overrides(args, cls):
    pre = cls.__name__ + "."
    return {k[len(pre):]: v for k, v in vars(args).items() if k.startswith(pre) and v is not None}


def _read_config_file(path):
    if not path:
        return {}, {}
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a JSON object")
    if "model" in doc or "train" in doc:
        return dict(doc.get("model", {})), dict(doc.get("train", {}))
    return doc, {}


def _configs(args, base_model=None, base_train=None):
    """Model/train configs from (base or defaults) <- config file <- flags; returns explicit model keys too."""
    mfile, tfile = _read_config_file(getattr(args, "config", None))
    mflags, tflags = _overrides(args, ModelConfig), _overrides(args, TrainConfig)
    md = {**(base_model.to_dict() if base_model else {}), **mfile, **mflags}
    td = {**(base_train.to_dict() if base_train else {}), **tfile, **tflags}
    return ModelConfig.from_dict(md), TrainConfig.from_dict(td), set(mfile) | set(mflags)


# --------------------------------------------------------------------------
# data helpers
# --------------------------------------------------------------------------

def _load_pairs(paths2d, paths3d):
    if paths3d is not None and len(paths2d) != len(paths3d):
        raise ConfigError("--data2d and --data3d need the same number of files")
    pairs = []
    for i, p2 in enumerate(paths2d):
        s2 = data.load_pose_json(p2)
        if s2.dims != 2:
            raise ConfigError(f"{p2}: expected a 2D pose file")
        s3 = None
        if paths3d is not None:
            s3 = data.load_pose_json(paths3d[i])
            if s3.dims != 3:
                raise ConfigError(f"{paths3d[i]}: expected a 3D pose file")
            if s3.num_frames != s2.num_frames or not s3.skeleton.same_as(s2.skeleton):
                raise ConfigError(f"{p2} and {paths3d[i]} disagree on frames or skeleton")
        pairs.append((s2, s3))
    return pairs


def _windows(pairs, N, sigma=0.0, seed=0):
    xs, ys = [], []
    for i, (s2, s3) in enumerate(pairs):
        if sigma > 0:
            s2 = data.add_noise(s2, sigma, seed + i)
        y = data.model_targets(s3) if s3 is not None else None
        x, y = data.window_arrays(data.model_inputs(s2), y, N)
        xs.append(x)
        if y is not None:
            ys.append(y)
    return np.concatenate(xs), (np.concatenate(ys) if ys else None)


def _check_data_matches(cfg, skeleton):
    if skeleton.num_joints != cfg.J:
        raise ConfigError(f"data has {skeleton.num_joints} joints but the model expects J={cfg.J}")


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_synth(args):
    if args.frames < 1:
        raise ConfigError("--frames must be >= 1")
    if args.sigma < 0:
        raise ConfigError("--sigma must be >= 0")
    sk = data.get_skeleton(args.skeleton)
    if args.camera == "default":
        cam = data.default_camera()
    else:
        with open(args.camera, encoding="utf-8") as fh:
            cam = data.CameraModel.from_json(json.load(fh))
    motion = data.MotionParams(amplitude=args.amplitude)
    world = data.synth_generate(sk, args.frames, args.seed, motion, fps=args.fps)
    seq2d = data.add_noise(data.project(world, cam), args.sigma, args.seed + 1_000_003)
    seq3d = data.to_camera_sequence(world, cam)
    seq3d.meta["camera"] = cam.to_json()
    out2, out3 = f"{args.out}_2d.json", f"{args.out}_3d.json"
    data.save_pose_json(seq2d, out2)
    data.save_pose_json(seq3d, out3)
    print(f"wrote {out2} and {out3} ({args.frames} frames)")


def _ckpt_paths(out):
    root, ext = os.path.splitext(out)
    return lambda epoch: f"{root}.epoch{epoch:03d}{ext or '.mhfc'}"


def cmd_train(args):
    optim_arrays, optim_meta, start_epoch, prev_losses = None, None, 0, []
    if args.resume:
        cfg0, tc0, params, optim_arrays, header = checkpoint.load_training_state(args.resume)
        cfg, tc, _ = _configs(args, cfg0, tc0)
        if cfg != cfg0:
            raise ConfigError("model configuration cannot change when resuming")
        optim_meta = header["extra"].get("optimizer")
        start_epoch = int(header["epoch"])
        prev_losses = list(header["extra"].get("epoch_losses", []))
        params = params.astype(cfg.np_dtype)
        params.requires_grad_(True)
    else:
        cfg, tc, explicit = _configs(args)
        params = None
    pairs = _load_pairs(args.data2d, args.data3d)
    skeleton = pairs[0][0].skeleton
    if params is None and "J" not in explicit:
        cfg.J = skeleton.num_joints
    cfg.validate()
    tc.validate()
    _check_data_matches(cfg, skeleton)
    if params is None:
        params = init_params(cfg, tc.seed)
    x, y = _windows(pairs, cfg.N)
    names = [n for n in params.names() if not n.startswith("hyp_head.") or tc.hyp_aux_weight > 0]
    opt = Amsgrad(names, tc.beta1, tc.beta2, tc.adam_eps)
    if optim_arrays:
        opt.load_state_arrays(optim_arrays, optim_meta["step"])
    epoch_path = _ckpt_paths(args.out_ckpt)
    loss_csv = args.loss_csv or args.out_ckpt + ".loss.csv"
    if not args.resume or not os.path.exists(loss_csv):
        write_loss_csv([], loss_csv)
    written = [0]

    def on_epoch(epoch, res):
        write_loss_csv(res.history[written[0]:], loss_csv, append=True)
        written[0] = len(res.history)
        checkpoint.save_training_state(epoch_path(epoch + 1), params, cfg, tc, opt, epoch + 1,
                                       res.epoch_losses[-1], prev_losses + res.epoch_losses)

    res = train(params, cfg, x, y, tc, skeleton.pairs, opt, start_epoch, on_epoch)
    final_loss = res.epoch_losses[-1] if res.epoch_losses else None
    checkpoint.save_training_state(args.out_ckpt, params, cfg, tc, opt, start_epoch + tc.epochs, final_loss,
                                   prev_losses + res.epoch_losses)
    print(f"trained {tc.epochs} epoch(s) on {len(x)} windows; final loss {final_loss}; wrote {args.out_ckpt}")


def _load_model(path):
    cfg, tc, params, _, header = checkpoint.load_training_state(path)
    params = params.astype(cfg.np_dtype)
    params.requires_grad_(False)
    return cfg, tc, params


def _root_relative_mm(frames):
    return frames - frames[:, :1]


def cmd_eval(args):
    pairs = _load_pairs(args.data2d, args.data3d)
    skeleton = pairs[0][0].skeleton
    gts = np.concatenate([_root_relative_mm(s3.frames) for _, s3 in pairs])
    if args.pred3d:
        preds = np.concatenate([_root_relative_mm(data.load_pose_json(p).frames) for p in args.pred3d])
        if preds.shape != gts.shape:
            raise ConfigError(f"prediction shape {preds.shape} does not match ground truth {gts.shape}")
        report = metrics.evaluate(preds, gts, {"source": "pred3d"})
        _emit_json(report, args.out)
        return
    if not args.ckpt:
        raise ConfigError("eval needs --ckpt or --pred3d")
    cfg, _, params = _load_model(args.ckpt)
    if args.N is not None and args.N != cfg.N:
        raise ConfigError(f"--N {args.N} disagrees with the checkpoint window length {cfg.N}")
    _check_data_matches(cfg, skeleton)

    def run(sigma):
        x, _ = _windows(pairs, cfg.N, sigma, args.seed)
        if args.flip:
            pred = test_time_flip(params, cfg, x, skeleton.pairs)
        else:
            pred = predict_center(params, cfg, x)
        return pred * 1000.0

    conf = {"ckpt": os.path.basename(args.ckpt), "N": cfg.N, "M": cfg.M, "flip": bool(args.flip), "sigma_px": args.sigma}
    report = metrics.evaluate(run(args.sigma), gts, conf)
    if args.noise_sweep:
        sigmas = [float(s) for s in args.noise_sweep.split(",")]
        rows = []
        for s in sigmas:
            p = run(s)
            rows.append((s, metrics.mpjpe(p, gts), metrics.p_mpjpe(p, gts)))
        report["noise_sweep"] = [{"sigma_px": s, "mpjpe_mm": a, "p_mpjpe_mm": b} for s, a, b in rows]
        if args.sweep_csv:
            with open(args.sweep_csv, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["sigma_px", "mpjpe_mm", "p_mpjpe_mm"])
                w.writerows(rows)
    _emit_json(report, args.out)


def _emit_json(obj, path):
    text = json.dumps(obj, indent=2, allow_nan=False)
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(text)


def cmd_infer(args):
    cfg, _, params = _load_model(args.ckpt)
    (s2, _), = _load_pairs([args.data2d], None)
    _check_data_matches(cfg, s2.skeleton)
    x, _ = data.window_arrays(data.model_inputs(s2), None, cfg.N)
    meta = {"frame": "camera_root_relative_mm", "source_ckpt": os.path.basename(args.ckpt)}
    centers, hyps = [], [[] for _ in range(cfg.M)]
    want_hyp = bool(args.dump_hypotheses)
    if want_hyp and "hyp_head.h1.w" not in params:
        raise ConfigError("checkpoint has no per-hypothesis heads; train with --hyp-heads true")
    for lo in range(0, len(x), 256):
        xb = x[lo:lo + 256]
        seq, center, z = forward(xb, params, cfg, return_hypotheses=True)
        centers.append(center.data)
        if want_hyp:
            for m, dec in enumerate(hypothesis_decode(z, params, cfg)):
                hyps[m].append(dec.data[:, cfg.N // 2])
    out = np.concatenate(centers).astype(np.float64) * 1000.0
    data.save_pose_json(data.PoseSequence(out, s2.skeleton, s2.fps, "mhformer", meta), args.out)
    print(f"wrote {args.out} ({len(out)} frames)")
    if want_hyp:
        for m in range(cfg.M):
            path = f"{args.dump_hypotheses}_h{m + 1}.json"
            arr = np.concatenate(hyps[m]).astype(np.float64) * 1000.0
            data.save_pose_json(data.PoseSequence(arr, s2.skeleton, s2.fps, "mhformer", dict(meta, hypothesis=m + 1)), path)
            print(f"wrote {path}")
    if args.dump_attention:
        k = args.attention_frame if args.attention_frame is not None else len(x) // 2
        if not 0 <= k < len(x):
            raise ConfigError(f"--attention-frame {k} out of range")
        recs = export_attention(x[k], params, cfg)
        with open(args.dump_attention, "w", encoding="utf-8") as fh:
            json.dump(recs, fh, allow_nan=False)
        print(f"wrote {args.dump_attention} ({len(recs)} maps)")


def cmd_stats(args):
    cfg, _, _ = _configs(args)
    cfg.validate(for_forward=False)
    rep = stats.report(cfg)
    if args.json:
        print(json.dumps(dict(rep, config=cfg.to_dict())))
    else:
        print(f"params: {rep['params']} ({rep['params'] / 1e6:.2f}M)")
        print(f"flops:  {rep['flops']} ({rep['flops'] / 1e9:.2f}G)")


def cmd_gradcheck(args):
    base = tiny_config()
    cfg, _, _ = _configs(args, base_model=base)
    cfg.validate()
    from .tensor import corrupt_adjoint
    import contextlib

    ctx = corrupt_adjoint(args.corrupt_adjoint) if args.corrupt_adjoint else contextlib.nullcontext()
    with ctx:
        res = gradcheck.run(cfg, seed=args.seed, max_coords=args.max_coords)
    bad = gradcheck.failures(res)
    for block, err in res.items():
        tag = "FAIL" if block in bad else "ok"
        print(f"{block:16s} {err:.3e}  (tol {gradcheck.tolerance(block):.0e})  {tag}")
    if bad:
        raise NumericFailure(f"gradient check failed for: {', '.join(bad)}")


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="mhformer", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate paired synthetic 3D/2D pose files")
    s.add_argument("--skeleton", default="h36m17", choices=sorted(data.SKELETONS))
    s.add_argument("--frames", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--sigma", type=float, default=0.0, help="2D Gaussian noise std in pixels")
    s.add_argument("--camera", default="default", help="'default' or a camera JSON file")
    s.add_argument("--amplitude", type=float, default=1.0, help="motion amplitude multiplier")
    s.add_argument("--fps", type=float, default=50.0)
    s.add_argument("--out", required=True, help="output prefix; writes <out>_2d.json and <out>_3d.json")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="JSON file with 'model' and/or 'train' sections")
    t.add_argument("--data2d", nargs="+", required=True)
    t.add_argument("--data3d", nargs="+", required=True)
    t.add_argument("--out-ckpt", required=True)
    t.add_argument("--loss-csv")
    t.add_argument("--resume", help="checkpoint to continue from")
    _add_config_flags(t, ModelConfig, "model config")
    _add_config_flags(t, TrainConfig, "train config")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="center-frame metrics on paired data")
    e.add_argument("--ckpt")
    e.add_argument("--data2d", nargs="+", required=True)
    e.add_argument("--data3d", nargs="+", required=True)
    e.add_argument("--pred3d", nargs="+", help="evaluate these prediction files instead of a checkpoint")
    e.add_argument("--flip", action="store_true", help="test-time flip averaging")
    e.add_argument("--sigma", type=float, default=0.0, help="extra 2D noise (px) before inference")
    e.add_argument("--noise-sweep", help="comma-separated sigmas, e.g. 0,2,5,10")
    e.add_argument("--sweep-csv")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--N", type=int, help="expected window length (must match the checkpoint)")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="lift a 2D pose file to 3D")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--data2d", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--dump-attention")
    i.add_argument("--attention-frame", type=int)
    i.add_argument("--dump-hypotheses", help="prefix for per-hypothesis pose files")
    i.set_defaults(func=cmd_infer)

    st = sub.add_parser("stats", help="parameter count and FLOPs")
    st.add_argument("--config")
    st.add_argument("--json", action="store_true")
    _add_config_flags(st, ModelConfig, "model config")
    st.set_defaults(func=cmd_stats)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("--config")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--max-coords", type=int, default=None, help="subsample coordinates per tensor")
    g.add_argument("--corrupt-adjoint", help=argparse.SUPPRESS)
    _add_config_flags(g, ModelConfig, "model config")
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        args.func(args)
    except (NonFiniteError, NumericFailure) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (checkpoint.CheckpointError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, data.PoseFormatError, ShapeError, ValueError, KeyError, TypeError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
