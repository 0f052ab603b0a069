"""Command-line entry point.

    coarse2fine synth --count 200 --seed 7 --out data/
    coarse2fine train --config run.cfg --data data/ --out run/
    coarse2fine eval --checkpoint run/checkpoints/final.ckpt --data test/ --out eval/
    coarse2fine gradcheck --all

Exit status: 0 success, 1 domain error (bad data, corrupt checkpoint, failed
check), 2 usage error.  A config file (``--config`` or $C2F_CONFIG) sets
defaults and ``--set key=value`` overrides it.  Commands write only below
``--out``.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

import numpy as np

from . import artmodel as am
from . import config as cfgmod
from . import datagen as dg
from . import evaluation as E
from . import gradsuite
from . import meshkit as mk
from . import neural as nn
from . import trainer as tr
from .camrender import overlay_image, project
from .pipeline import base_camera, predict

log = logging.getLogger("coarse2fine")

DOMAIN_ERRORS = (dg.AnnotationError, tr.CheckpointError, cfgmod.ConfigParseError, mk.MeshError,
                 am.ModelFormatError, nn.ConfigError, FileNotFoundError, IsADirectoryError, NotADirectoryError)


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ helpers


def _override(text):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), value


def _resolve_config(args):
    cfg = cfgmod.load_config(getattr(args, "config", None))
    pairs = list(getattr(args, "set", None) or [])
    if getattr(args, "seed", None) is not None:
        pairs.append(("seed", str(args.seed)))
    return cfgmod.apply_overrides(cfg, pairs)


def _announce(cfg, out=None):
    text = cfgmod.dump_config(cfg)
    log.info("resolved config:\n%s", text.rstrip())
    if out:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "config.cfg"), "w") as fh:
            fh.write(text)


def _annotation_path(data):
    return os.path.join(data, "annotations.txt") if os.path.isdir(data) else data


def _load_data(data, cfg):
    ds = dg.load_annotations(_annotation_path(data), out_size=cfgmod.image_size(cfg))
    log.info("loaded %d samples from %s", len(ds), data)
    return ds


def _model_from(cfg):
    return tr.build_model(cfg)


# ----------------------------------------------------------------- commands


def cmd_synth(args):
    cfg = _resolve_config(args)
    _announce(cfg, args.out)
    model = _model_from(cfg)
    count = args.count if args.count is not None else cfg.data.count
    seed = args.seed if args.seed is not None else cfg.data.seed
    ds = dg.synth_generate(model, count, cfg.data.camera, seed=seed)
    path = dg.export_annotations(ds, args.out)
    print(f"wrote {len(ds)} samples to {path}")
    return 0


def cmd_train(args):
    cfg = _resolve_config(args)
    _announce(cfg, args.out)
    if args.data:
        train = _load_data(args.data, cfg)
    else:
        model = _model_from(cfg)
        train = dg.synth_generate(model, cfg.data.count, cfg.data.camera, seed=cfg.data.seed)
        log.info("no --data: generated %d synthetic samples (seed %d)", len(train), cfg.data.seed)
    net, rows = tr.run_schedule(cfg, train, out_dir=args.out, resume=args.resume)
    tr.write_log(rows, os.path.join(args.out, "log.csv"))
    print(f"trained {len(rows)} epochs; checkpoints in {os.path.join(args.out, 'checkpoints')}")
    return 0


def cmd_eval(args):
    net, cfg = tr.load_trained(args.checkpoint)
    if getattr(args, "set", None):
        cfg = cfgmod.apply_overrides(cfg, args.set)
    _announce(cfg, args.out)
    ds = _load_data(args.data, cfg)
    part_map = E.validate_part_map(cfg.eval.part_map, net.model.n_joints)
    report = E.evaluate(net, ds, cfg.eval.threshold, part_map)
    E.write_report_csv(report, os.path.join(args.out, "report.csv"))
    table = E.format_table(report)
    with open(os.path.join(args.out, "table.txt"), "w") as fh:
        fh.write(table)
    print(table, end="")
    return 0


def cmd_decimate(args):
    if args.mesh:
        mesh = mk.read_obj(args.mesh)
    else:
        mesh = _model_from(_resolve_config(args)).mesh()
    os.makedirs(args.out, exist_ok=True)
    hier = mk.build_hierarchy(mesh, n_levels=args.levels, factor=args.factor)
    mk.save_hierarchy(hier, os.path.join(args.out, "hierarchy.bin"))
    for i, lvl in enumerate(hier.levels):
        mk.write_obj(lvl.mesh, os.path.join(args.out, f"level{i}.obj"))
        print(f"level {i}: {lvl.mesh.n_vertices} vertices, {len(lvl.mesh.faces)} faces")
    return 0


def cmd_gradcheck(args):
    if not args.all and not args.suite:
        raise UsageError("gradcheck needs --all or at least one --suite")
    unknown = [s for s in (args.suite or []) if s not in gradsuite.SUITES]
    if unknown:
        raise UsageError(f"unknown suite(s): {', '.join(unknown)}; known: {', '.join(gradsuite.SUITES)}")
    results = gradsuite.run_all(seed=args.seed or 0, names=None if args.all else args.suite)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{r.name:<{width}}  max rel err {r.error:.3e}  tol {r.tolerance:.0e}  "
              f"{'ok' if r.passed else 'FAIL'}  ({r.seconds:.2f}s)")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} suites within tolerance")
    return 1 if failed else 0


def _init_params(net, model, sample, cfg):
    if net is not None:
        pred = predict(net, sample.image[None], refine_mesh=False)
        return {k: getattr(pred.params, k).data[0] for k in ("betas", "pose", "trans")} | {
            "focal": float(pred.params.focal.data[0])}
    h = cfg.network.heads
    return {"betas": model.shape_mean.copy(), "pose": model.pose_mean.copy(),
            "trans": np.array([0.0, 0.0, h.depth_init]), "focal": h.focal_init}


def _select(ds, indices):
    idx = list(range(len(ds))) if not indices else indices
    bad = [i for i in idx if not 0 <= i < len(ds)]
    if bad:
        raise dg.AnnotationError(f"sample index out of range: {bad}")
    return idx


def cmd_fit(args):
    if args.checkpoint:
        net, cfg = tr.load_trained(args.checkpoint)
        model = net.model
    else:
        net, cfg = None, _resolve_config(args)
        model = _model_from(cfg)
    if getattr(args, "set", None) and args.checkpoint:
        cfg = cfgmod.apply_overrides(cfg, args.set)
    _announce(cfg, args.out)
    ds = _load_data(args.data, cfg)
    iters = args.iterations if args.iterations is not None else cfg.eval.tto_iterations
    with open(os.path.join(args.out, "fit_summary.csv"), "w", newline="") as summary:
        wr = csv.writer(summary)
        wr.writerow(["sample", "name", "iterations", "initial_loss", "final_loss", "keypoint_error_px2"])
        for i in _select(ds, args.index):
            s = ds[i]
            init = _init_params(net, model, s, cfg)
            fitted, trace = E.test_time_optimize(model, s, init, iters, lr=cfg.eval.tto_lr,
                                                 weights=cfg.weights, sharpness=cfg.eval.tto_sharpness)
            name = s.name or f"{i:06d}"
            with open(os.path.join(args.out, f"trace_{name}.csv"), "w", newline="") as fh:
                tw = csv.writer(fh)
                tw.writerow(["iteration", "loss"])
                tw.writerows((k, repr(v)) for k, v in enumerate(trace))
            np.savez(os.path.join(args.out, f"fit_{name}.npz"), **{k: np.asarray(v) for k, v in fitted.items()})
            wr.writerow([i, name, iters, repr(trace[0]) if trace else "", repr(trace[-1]) if trace else "",
                         repr(E.keypoint_error(model, s, fitted))])
    print(f"fitted {len(_select(ds, args.index))} samples; traces in {args.out}")
    return 0


def cmd_render_overlay(args):
    net, cfg = tr.load_trained(args.checkpoint)
    _announce(cfg, args.out)
    ds = _load_data(args.data, cfg)
    model = net.model
    camera = base_camera(net.image_size)
    for i in _select(ds, args.index):
        s = ds[i]
        pred = predict(net, s.image[None], refine_mesh=True)
        f = pred.params.focal.data
        name = s.name or f"{i:06d}"
        for stage, V, J in (("coarse", pred.V_c.data, pred.joints_c.data), ("refined", pred.V_f.data, pred.joints_f.data)):
            mask = E._hard_masks(V, model.faces, camera, f)[0]
            kp = project(J, camera, f).data[0]
            img = _overlay(s, mask, kp, args.scale)
            img.save(os.path.join(args.out, f"overlay_{name}_{stage}.png"))
    print(f"wrote overlays to {args.out}")
    return 0


def _overlay(sample, mask, kp, scale):
    return overlay_image(sample.image, sample.silhouette, mask, sample.keypoints, kp, sample.visibility, scale)


def cmd_export_model(args):
    cfg = _resolve_config(args)
    _announce(cfg, args.out)
    model = _model_from(cfg)
    am.save_model(model, os.path.join(args.out, "model.c2fm"))
    mk.write_obj(model.mesh(), os.path.join(args.out, "template.obj"))
    print(f"model: {model.n_vertices} vertices, {model.n_joints} joints, {model.n_shape} shape dims -> {args.out}")
    return 0


# ------------------------------------------------------------------- parser


def build_parser():
    p = argparse.ArgumentParser(prog="coarse2fine", description="Coarse-to-fine animal mesh recovery toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def add(name, fn, help_, out=True, config=True):
        sp = sub.add_parser(name, help=help_, description=help_)
        if config:
            sp.add_argument("--config", help=f"config file (default ${cfgmod.ENV_VAR})")
            sp.add_argument("--set", action="append", type=_override, metavar="KEY=VALUE",
                            help="override one config value; repeatable; wins over the file")
        if out:
            sp.add_argument("--out", required=True, help="output directory (nothing is written elsewhere)")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("synth", cmd_synth, "render a synthetic dataset from the toy model")
    sp.add_argument("--count", type=int)
    sp.add_argument("--seed", type=int)

    sp = add("train", cmd_train, "run the three-stage training schedule")
    sp.add_argument("--data", help="annotation file or directory (default: synthetic from the config)")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--resume", help="checkpoint to continue from")

    sp = add("eval", cmd_eval, "coarse and refined PCK / IOU on a dataset")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)

    sp = add("decimate", cmd_decimate, "build a mesh hierarchy by quadric edge collapse")
    sp.add_argument("--mesh", help="OBJ file (default: the configured model's template)")
    sp.add_argument("--levels", type=int, default=3)
    sp.add_argument("--factor", type=int, default=4)
    sp.add_argument("--seed", type=int)

    sp = add("gradcheck", cmd_gradcheck, "gradient checks against central differences", out=False, config=False)
    sp.add_argument("--all", action="store_true", help="run every registered suite")
    sp.add_argument("--suite", action="append", help="run one suite by name; repeatable")
    sp.add_argument("--seed", type=int, default=0)

    sp = add("fit", cmd_fit, "test-time optimization of model parameters per sample")
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint", help="start from this network's coarse output (default: prior mean)")
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--index", type=int, action="append", help="sample index; repeatable (default: all)")
    sp.add_argument("--seed", type=int)

    sp = add("render-overlay", cmd_render_overlay, "ground-truth vs rendered silhouette overlays")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--index", type=int, action="append")
    sp.add_argument("--scale", type=int, default=4)

    sp = add("export-model", cmd_export_model, "write the configured body model and its template mesh")
    sp.add_argument("--seed", type=int)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.fn(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"coarse2fine: error: {exc}", file=sys.stderr)
        return 2
    except DOMAIN_ERRORS as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
