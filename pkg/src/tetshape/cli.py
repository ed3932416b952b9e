"""Command-line entry point.

One binary with subcommands for grid building, shape encoding, training,
sampling, latent operations, surface extraction, metrics, and the gradient
self-check.  Settings come from a JSON config file with flag overrides
(flags win); every command prints the resolved configuration it ran with.
"""

from __future__ import annotations

import argparse
import copy
import glob
import json
import os
import sys

import numpy as np

from . import evalkit, neuralmodel, shapefields, surfacex, tensorops, tetgrid
from .meshio import write_medit_tets, write_vtk_tets

DEFAULT_CONFIG = {
    "grid": {"m": 5, "levels": 3, "max_tets": 2**24},
    "train": {
        "epochs": 50,
        "batch": 30,
        "lr": 1e-4,
        "beta1": 0.0,
        "beta2": 0.9,
        "latent": 64,
        "width": 16,
        "critic_width": 16,
        "lambda_d": 1.0,
        "lambda_kl": 1e-3,
        "n_critic": 5,
        "lambda_gp": 10.0,
        "mode": "both",
        "seed": 0,
        "pool_mode": "avg",
    },
    "extract": {"tau": 0.5, "beta": 0.5, "gamma": 4.0, "smooth_iters": 1},
    "encode": {"margin": 0.05},
}


class ConfigError(ValueError):
    pass


def load_config(path=None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        with open(path) as f:
            user = json.load(f)
        _merge_checked(cfg, user, [])
    return cfg


def _merge_checked(base: dict, user: dict, trail) -> None:
    for key, value in user.items():
        here = trail + [key]
        if key not in base:
            raise ConfigError(f"unknown config key: {'.'.join(here)}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {'.'.join(here)} must be an object")
            _merge_checked(base[key], value, here)
        else:
            base[key] = value


def _override(cfg: dict, section: str, args, names) -> None:
    """Copy explicitly-set flags over the config (flags win)."""
    for flag, key in names.items():
        value = getattr(args, flag, None)
        if value is not None:
            cfg[section][key] = value


def _print_config(cfg: dict, command: str) -> None:
    print(f"resolved config ({command}):")
    print(json.dumps(cfg, indent=2, sort_keys=True))


def _load_hierarchy_for(grid: tetgrid.TetGrid, max_tets: int) -> tetgrid.GridHierarchy:
    """Deterministically rebuild the hierarchy a stored finest grid came from."""
    m = tetgrid.infer_base_resolution(grid)
    hierarchy = tetgrid.build_hierarchy(m, grid.level, max_tets=max_tets)
    if not hierarchy.finest.structurally_equal(grid):
        raise ValueError("grid file does not match its deterministic reconstruction")
    return hierarchy


def _extract_pipeline(fields, grid, extract_cfg, deform=True, smooth=True, mu=None):
    occ = surfacex.threshold_occupancy(fields.occupancy, extract_cfg["tau"])
    if mu is not None:
        occ = surfacex.deformation_filter(
            grid, occ, fields.tet_deformation, mu, extract_cfg["gamma"]
        )
    surface = surfacex.extract_surface(grid, occ, fields.vertex_deformation)
    if deform and not surface.is_empty:
        surface = surfacex.apply_deformation(surface)
        if smooth and extract_cfg["smooth_iters"] > 0:
            surface = surfacex.weighted_laplacian_smooth(
                surface, extract_cfg["beta"], extract_cfg["smooth_iters"]
            )
    return occ, surface


def cmd_grid_build(args, cfg) -> int:
    _override(cfg, "grid", args, {"m": "m", "levels": "levels", "max_tets": "max_tets"})
    _print_config(cfg, "grid build")
    g = cfg["grid"]
    hierarchy = tetgrid.build_hierarchy(g["m"], g["levels"], max_tets=g["max_tets"])
    fine = hierarchy.finest
    tetgrid.save_grid(fine, args.out)
    print(f"wrote {args.out}: level {fine.level}, K={fine.num_tets}, V={fine.num_vertices}")
    if args.vtk:
        write_vtk_tets(args.vtk, fine.vertices, fine.tets)
        print(f"wrote {args.vtk}")
    if args.medit:
        write_medit_tets(args.medit, fine.vertices, fine.tets)
        print(f"wrote {args.medit}")
    return 0


def cmd_validate(args, cfg) -> int:
    _print_config(cfg, "validate")
    grid = tetgrid.load_grid(args.grid)
    report = tetgrid.validate(grid)
    print(f"grid {args.grid}: level {grid.level}, K={grid.num_tets}")
    print(report)
    print("all-pass" if report.all_passed else "FAILED")
    return 0 if report.all_passed else 1


def cmd_encode(args, cfg) -> int:
    _override(cfg, "encode", args, {"margin": "margin"})
    _print_config(cfg, "encode")
    grid = tetgrid.load_grid(args.grid)
    hierarchy = _load_hierarchy_for(grid, cfg["grid"]["max_tets"])
    mesh = shapefields.load_and_normalize(args.mesh, cfg["encode"]["margin"])
    fields = shapefields.encode_shape(mesh, hierarchy)
    shapefields.save_fields(fields, args.out)
    occ = int(fields.occupancy_bits().sum())
    print(f"wrote {args.out}: K={fields.num_tets}, occupied={occ}")
    return 0


def _train_config_from(cfg) -> neuralmodel.TrainConfig:
    t = cfg["train"]
    return neuralmodel.TrainConfig(
        epochs=t["epochs"],
        batch_size=t["batch"],
        lr=t["lr"],
        beta1=t["beta1"],
        beta2=t["beta2"],
        lambda_d=t["lambda_d"],
        lambda_kl=t["lambda_kl"],
        n_critic=t["n_critic"],
        lambda_gp=t["lambda_gp"],
        mode=t["mode"],
        seed=t["seed"],
    )


TRAIN_FLAGS = {
    "epochs": "epochs", "batch": "batch", "lr": "lr", "latent": "latent",
    "width": "width", "critic_width": "critic_width", "lambda_d": "lambda_d",
    "lambda_kl": "lambda_kl", "n_critic": "n_critic", "lambda_gp": "lambda_gp",
    "mode": "mode", "seed": "seed",
}


def cmd_train(args, cfg) -> int:
    _override(cfg, "train", args, TRAIN_FLAGS)
    _print_config(cfg, "train")
    grid = tetgrid.load_grid(args.grid)
    hierarchy = _load_hierarchy_for(grid, cfg["grid"]["max_tets"])
    t = cfg["train"]
    if args.toy_count:
        dataset = evalkit.build_toy_dataset(args.toy_count, t["seed"], hierarchy)
        fields = dataset.train_fields
        print(f"toy dataset: {len(fields)} train / {len(dataset.val_indices)} validation shapes")
        if args.manifest:
            evalkit.save_manifest(dataset.specs, args.manifest)
            print(f"wrote {args.manifest}")
    else:
        paths = sorted(glob.glob(os.path.join(args.fields, "*.tfld"))) \
            if os.path.isdir(args.fields) else sorted(glob.glob(args.fields))
        if not paths:
            raise FileNotFoundError(f"no field files under {args.fields}")
        fields = [shapefields.load_fields(p) for p in paths]
        print(f"loaded {len(fields)} field files")
    model_cfg = neuralmodel.ModelConfig(
        m=tetgrid.infer_base_resolution(grid),
        levels=grid.level,
        latent=t["latent"],
        width=t["width"],
        critic_width=t["critic_width"],
        pool_mode=t["pool_mode"],
        seed=t["seed"],
    )
    train_cfg = _train_config_from(cfg)
    train_cfg.checkpoint_path = args.out
    model = neuralmodel.ShapeModel(hierarchy, model_cfg)
    print(f"model parameters: {model.num_parameters()}")
    trainer = neuralmodel.Trainer(model, train_cfg)
    log = trainer.run(fields)
    if args.loss_log:
        neuralmodel.write_loss_log(log, args.loss_log)
        print(f"wrote {args.loss_log}")
    print(f"wrote {args.out} after {len(log)} steps")
    return 0


def _write_fields_outputs(fields, model, args, cfg) -> None:
    if args.out:
        shapefields.save_fields(fields, args.out)
        print(f"wrote {args.out}")
    if args.obj:
        grid = model.hierarchy.finest
        _, surface = _extract_pipeline(fields, grid, cfg["extract"])
        surfacex.export_surface_obj(surface, args.obj)
        print(f"wrote {args.obj}: {surface.num_faces} faces")


def cmd_reconstruct(args, cfg) -> int:
    _print_config(cfg, "reconstruct")
    model = neuralmodel.load_checkpoint(args.model)
    fields = shapefields.load_fields(args.fields)
    recon = model.reconstruct(fields)
    _write_fields_outputs(recon, model, args, cfg)
    return 0


def cmd_sample(args, cfg) -> int:
    _override(cfg, "train", args, {"seed": "seed"})
    _print_config(cfg, "sample")
    model = neuralmodel.load_checkpoint(args.model)
    fields = model.sample(np.random.default_rng(cfg["train"]["seed"]))
    _write_fields_outputs(fields, model, args, cfg)
    return 0


def cmd_interp(args, cfg) -> int:
    _print_config(cfg, "interp")
    model = neuralmodel.load_checkpoint(args.model)
    mu_a, _ = model.encode(shapefields.load_fields(args.fields_a))
    mu_b, _ = model.encode(shapefields.load_fields(args.fields_b))
    z = neuralmodel.lerp(mu_a, mu_b, args.t)
    fields = model.decode(z)
    _write_fields_outputs(fields, model, args, cfg)
    return 0


def cmd_arith(args, cfg) -> int:
    _print_config(cfg, "arith")
    model = neuralmodel.load_checkpoint(args.model)
    mus = []
    for path in (args.a, args.b, args.c):
        mu, _ = model.encode(shapefields.load_fields(path))
        mus.append(mu)
    z = neuralmodel.latent_arith(*mus)
    fields = model.decode(z)
    _write_fields_outputs(fields, model, args, cfg)
    return 0


def cmd_extract(args, cfg) -> int:
    _override(cfg, "extract", args, {
        "tau": "tau", "beta": "beta", "gamma": "gamma", "smooth_iters": "smooth_iters",
    })
    _print_config(cfg, "extract")
    grid = tetgrid.load_grid(args.grid)
    fields = shapefields.load_fields(args.fields)
    occ, surface = _extract_pipeline(
        fields, grid, cfg["extract"],
        deform=not args.no_deform,
        smooth=not args.no_smooth,
        mu=args.mu,
    )
    surfacex.export_surface_obj(surface, args.out)
    print(f"wrote {args.out}: {surface.num_faces} faces, "
          f"chi={surfacex.euler_characteristic(surface)}, "
          f"closed={surfacex.is_closed(surface)}")
    vdef = None if args.no_deform else fields.vertex_deformation
    for path, fmt in ((args.tet_vtk, "vtk"), (args.tet_medit, "medit")):
        if path:
            bad = surfacex.export_tet_mesh(grid, occ, path, vdef, fmt=fmt,
                                           ensure_positive=True)
            print(f"wrote {path} ({int(occ.sum())} tets, {len(bad)} volume violations)")
    return 0


def _emit_metric(name, value, rows, csv_path) -> None:
    print(f"{name}: {value:.9g}")
    if csv_path:
        with open(csv_path, "w") as f:
            f.write("metric,value\n")
            for n, v in rows:
                f.write(f"{n},{v!r}\n")
        print(f"wrote {csv_path}")


def cmd_metrics_chamfer(args, cfg) -> int:
    _print_config(cfg, "metrics chamfer")
    a = shapefields.TriMesh.from_obj(args.a)
    b = shapefields.TriMesh.from_obj(args.b)
    value = evalkit.chamfer(a, b, n_samples=args.samples, seed=args.seed)
    _emit_metric("chamfer", value, [("chamfer", value)], args.csv)
    return 0


def cmd_metrics_variety(args, cfg) -> int:
    _print_config(cfg, "metrics variety")
    paths = sorted(p for pattern in args.meshes for p in glob.glob(pattern))
    if len(paths) < 2:
        raise FileNotFoundError("variety needs at least two mesh files")
    meshes = [shapefields.TriMesh.from_obj(p) for p in paths]
    value = evalkit.variety(meshes, k_pairs=args.k, n_closest=args.n,
                            seed=args.seed, n_samples=args.samples)
    _emit_metric(f"variety over {len(meshes)} meshes", value,
                 [("variety", value)], args.csv)
    return 0


def cmd_gradcheck(args, cfg) -> int:
    _print_config(cfg, "gradcheck")
    hierarchy = tetgrid.build_hierarchy(args.m, args.levels)
    report = tensorops.run_standard_gradchecks(hierarchy, tolerance=args.tol,
                                               seed=cfg["train"]["seed"])
    print(report)
    print("all-pass" if report.all_passed else "FAILED")
    return 0 if report.all_passed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tetshape",
        description="Tetrahedral-grid shape representation: grids, fields, "
                    "training, extraction, and metrics.",
    )
    parser.add_argument("--config", help="JSON config file (flags override it)")
    parser.add_argument("--threads", type=int, help="cap kernel parallelism")
    sub = parser.add_subparsers(dest="command", required=True)

    p_grid = sub.add_parser("grid", help="grid construction")
    grid_sub = p_grid.add_subparsers(dest="grid_command", required=True)
    p = grid_sub.add_parser("build", help="build a grid hierarchy, save the finest level")
    p.add_argument("--m", type=int, help="cubes per axis of the base grid, default 5")
    p.add_argument("--levels", type=int, help="hierarchy levels, default 3")
    p.add_argument("--max-tets", dest="max_tets", type=int,
                   help="resource cap on the finest level, default 2^24")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--vtk", help="also export legacy-VTK for inspection")
    p.add_argument("--medit", help="also export MEDIT .mesh for inspection")
    p.set_defaults(func=cmd_grid_build)

    p = sub.add_parser("validate", help="check grid integrity")
    p.add_argument("grid")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("encode", help="encode an OBJ mesh into occupancy/deformation fields")
    p.add_argument("--mesh", required=True)
    p.add_argument("--grid", required=True)
    p.add_argument("--margin", type=float)
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("train", help="train the generative model")
    p.add_argument("--grid", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--fields", help="directory or glob of .tfld files")
    src.add_argument("--toy-count", dest="toy_count", type=int,
                     help="generate a procedural dataset of this size")
    p.add_argument("--manifest", help="write the toy dataset shape manifest here")
    p.add_argument("-o", "--out", required=True, help="checkpoint path")
    p.add_argument("--loss-log", dest="loss_log", help="CSV loss curve path")
    train_defaults = DEFAULT_CONFIG["train"]
    for flag in TRAIN_FLAGS:
        kind = str if flag == "mode" else (int if flag in
               ("epochs", "batch", "latent", "width", "critic_width", "n_critic", "seed") else float)
        p.add_argument(f"--{flag.replace('_', '-')}", dest=flag, type=kind,
                       help=f"default {train_defaults[flag]}")
    p.set_defaults(func=cmd_train)

    def fields_out(p, need_out=True):
        p.add_argument("-o", "--out", required=need_out, help="output .tfld path")
        p.add_argument("--obj", help="also extract and write an OBJ surface")

    p = sub.add_parser("reconstruct", help="encode+decode a field file through the model")
    p.add_argument("--model", required=True)
    p.add_argument("--fields", required=True)
    fields_out(p)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("sample", help="decode a random latent code")
    p.add_argument("--model", required=True)
    p.add_argument("--seed", type=int, help="sampling seed")
    fields_out(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("interp", help="interpolate between two encoded shapes")
    p.add_argument("--model", required=True)
    p.add_argument("--fields-a", dest="fields_a", required=True)
    p.add_argument("--fields-b", dest="fields_b", required=True)
    p.add_argument("--t", type=float, default=0.5)
    fields_out(p)
    p.set_defaults(func=cmd_interp)

    p = sub.add_parser("arith", help="latent arithmetic a - b + c")
    p.add_argument("--model", required=True)
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--c", required=True)
    fields_out(p)
    p.set_defaults(func=cmd_arith)

    p = sub.add_parser("extract", help="turn fields into a surface mesh")
    p.add_argument("--fields", required=True)
    p.add_argument("--grid", required=True)
    p.add_argument("-o", "--out", required=True, help="output OBJ path")
    p.add_argument("--tau", type=float, help="occupancy threshold, default 0.5")
    p.add_argument("--beta", type=float,
                   help="smoothing self-weight in [0,1], default 0.5")
    p.add_argument("--gamma", type=float,
                   help="deformation filter multiplier of mu, default 4")
    p.add_argument("--smooth-iters", dest="smooth_iters", type=int,
                   help="smoothing iterations, default 1")
    p.add_argument("--no-smooth", action="store_true")
    p.add_argument("--no-deform", action="store_true")
    p.add_argument("--mu", type=float, help="enable deformation filtering with this mu")
    p.add_argument("--tet-vtk", dest="tet_vtk", help="export occupied tets as legacy VTK")
    p.add_argument("--tet-medit", dest="tet_medit", help="export occupied tets as MEDIT .mesh")
    p.set_defaults(func=cmd_extract)

    p_metrics = sub.add_parser("metrics", help="evaluation metrics")
    msub = p_metrics.add_subparsers(dest="metrics_command", required=True)
    p = msub.add_parser("chamfer")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--samples", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", help="write the metric as CSV here")
    p.set_defaults(func=cmd_metrics_chamfer)
    p = msub.add_parser("variety")
    p.add_argument("--meshes", nargs="+", required=True, help="OBJ paths or globs")
    p.add_argument("--k", type=int, default=250)
    p.add_argument("--n", type=int, default=25)
    p.add_argument("--samples", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", help="write the metric as CSV here")
    p.set_defaults(func=cmd_metrics_variety)

    p = sub.add_parser("gradcheck", help="finite-difference check of all operators")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--m", type=int, default=2)
    p.add_argument("--levels", type=int, default=2)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.threads:
            from . import _kernels

            if _kernels.HAVE_NUMBA:
                _kernels.numba.set_num_threads(args.threads)
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except (ValueError, IOError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
