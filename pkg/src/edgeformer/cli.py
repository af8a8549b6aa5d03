"""Command-line front end: ``edgeformer <command> ...``.

Exit codes: 0 success, 1 data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .checks import gradient_suite
from .descriptor import save_descriptors
from .evalmetrics import evaluate
from .groundtruth import SHAPE_KINDS, EdgeLabelSet, FeatureFileError, parse_abc_features, synth_shape, synth_shape_n
from .model import load_checkpoint
from .perturb import add_gaussian_noise, random_downsample, sampling_density
from .pointcloud import CloudFormatError, load_cloud, save_cloud, sidecar_path
from .spatial import InsufficientNeighborsError, UndefinedNormalError, estimate_normals_pca, mesh_vertex_normals
from .training import (
    TrainConfig,
    load_train_config,
    patch_descriptors,
    patches_from_cloud,
    predict,
    train,
)

log = logging.getLogger("edgeformer")

DATA_ERRORS = (
    CloudFormatError,
    FeatureFileError,
    InsufficientNeighborsError,
    UndefinedNormalError,
    FileNotFoundError,
    IsADirectoryError,
    PermissionError,
    ValueError,
    RuntimeError,
    yaml.YAMLError,
)


class _Stages:
    def __init__(self):
        self.timings = {}

    def run(self, name, fn, *args, **kwargs):
        t0 = time.perf_counter()
        out = fn(*args, **kwargs)
        self.timings[name] = time.perf_counter() - t0
        return out


def _manifest_path(out) -> Path:
    p = Path(out)
    return p.with_name(p.name + ".manifest.json")


def write_manifest(out, args, inputs, outputs, timings, extra=None) -> Path:
    """JSON record of a run, written beside its main output."""
    argv = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    manifest = {
        "command": args.command,
        "arguments": argv,
        "seed": getattr(args, "seed", None),
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "tool_version": __version__,
        "timings_s": {k: max(0.0, float(v)) for k, v in timings.items()},
    }
    if extra:
        manifest.update(extra)
    path = _manifest_path(out)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return path


def read_input_cloud(path, labels=None, k: int = 20, estimate: str = "auto"):
    """Load a cloud for the pipeline, supplying normals when the file has none.

    OBJ meshes get angle-weighted vertex normals; other files without normals
    (or with ``estimate='pca'``) get PCA normals over k neighbours.
    """
    path = Path(path)
    if path.suffix.lower() == ".obj":
        cloud = mesh_vertex_normals(path, k)
        if labels is not None:
            cloud = cloud.with_labels(EdgeLabelSet.load(labels, cloud.n).to_mask())
    else:
        cloud = load_cloud(path, labels_path=labels)
    if estimate == "pca" or cloud.normals is None:
        cloud = estimate_normals_pca(cloud, k)
    return cloud


def _labels_for(path: Path) -> Path | None:
    side = sidecar_path(path)
    return side if side.exists() else None


# ---------------------------------------------------------------- commands


def cmd_gt_extract(args) -> int:
    st = _Stages()
    cloud = st.run("mesh_normals", mesh_vertex_normals, args.obj, args.k)
    labels = st.run("parse_features", parse_abc_features, args.yaml, cloud.n)
    if len(labels) == 0:
        log.warning("%s: no sharp curves; writing an empty label set", args.yaml)
    out = Path(args.out)
    save_cloud(cloud.with_labels(labels.to_mask()), out, "xyz")
    if len(labels) == 0:
        labels.save(sidecar_path(out))
    write_manifest(out, args, [args.yaml, args.obj], [out, sidecar_path(out)], st.timings,
                   {"n_vertices": cloud.n, "n_edge": len(labels)})
    print(f"{out}: {cloud.n} points, {len(labels)} edge points")
    return 0


def cmd_synth(args) -> int:
    if args.n is not None:
        cloud = synth_shape_n(args.kind, args.n, args.seed, args.angle)
    else:
        cloud = synth_shape(args.kind, args.density, args.seed, args.angle)
    out = Path(args.out)
    save_cloud(cloud, out)
    write_manifest(out, args, [], [out, sidecar_path(out)], {}, {"n_points": cloud.n,
                                                                "n_edge": int(cloud.labels.sum())})
    print(f"{out}: {cloud.n} points, {int(cloud.labels.sum())} edge points")
    return 0


def cmd_descriptors(args) -> int:
    st = _Stages()
    cloud = st.run("load", read_input_cloud, args.cloud, None, args.k, args.normals)
    desc = st.run("local_patch_encoding", patch_descriptors, cloud, args.k, not args.no_normalize)
    save_descriptors(desc, args.out)
    write_manifest(args.out, args, [args.cloud], [args.out], st.timings, {"n": desc.n, "k": desc.k})
    print(f"{args.out}: {desc.n} x {desc.k} descriptors in {st.timings['local_patch_encoding']:.3f} s")
    return 0


_OVERRIDES = {
    "epochs": "epochs", "batch_size": "batch_size", "lr": "lr", "ablation": "ablation", "k": "k",
    "d_model": "d_model", "heads": "heads", "layers": "encoder_layers", "ffn": "ffn_width", "seed": "seed",
}


def _train_config(args) -> TrainConfig:
    cfg = load_train_config(args.config) if args.config else TrainConfig()
    updates = {field: getattr(args, flag) for flag, field in _OVERRIDES.items() if getattr(args, flag) is not None}
    if args.no_balance:
        updates["balance"] = False
    return TrainConfig(**{**cfg.__dict__, **updates})


def _patch_sets(paths, k):
    sets = []
    for p in paths:
        p = Path(p)
        labels = _labels_for(p)
        if labels is None:
            raise ValueError(f"{p}: training clouds need a {sidecar_path(p).name} sidecar")
        sets.append(patches_from_cloud(read_input_cloud(p, labels, k), k, source=p.stem))
    return sets


def cmd_train(args) -> int:
    from .plotting import plot_training_history
    from .training import LabeledPatchSet

    cfg = _train_config(args)
    st = _Stages()
    sets = st.run("local_patch_encoding", _patch_sets, args.data, cfg.k)
    val = None
    if args.val:
        val = LabeledPatchSet.concat(st.run("validation_encoding", _patch_sets, args.val, cfg.k))
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_name(out.stem + ".log.jsonl")
    result = st.run("network", train, sets, cfg, val, out, log_path)
    outputs = [out, log_path]
    fig = Path(args.figure) if args.figure else out.with_name(out.stem + ".history.png")
    plot_training_history(result.history, fig)
    outputs.append(fig)
    write_manifest(out, args, list(args.data) + list(args.val or []), outputs, st.timings,
                   {"train_config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in cfg.__dict__.items()},
                    "final": result.history[-1]})
    last = result.history[-1]
    print(f"{out}: {cfg.epochs} epochs, final loss {last['train_loss']:.4f}, acc {last['train_acc']:.3f}")
    return 0


def cmd_predict(args) -> int:
    params = load_checkpoint(args.checkpoint)
    k = params.config.k
    st = _Stages()
    cloud = st.run("load", read_input_cloud, args.cloud, None, k, args.normals)
    pred = predict(cloud, params, args.batch_size, args.threshold)
    out = Path(args.out)
    pred.labels.save(out)
    outputs = [out]
    probs_path = Path(args.probs) if args.probs else out.with_name(out.stem + ".probs.txt")
    np.savetxt(probs_path, pred.probabilities, fmt="%.9g")
    outputs.append(probs_path)
    if args.figure:
        from .plotting import plot_probability_histogram

        plot_probability_histogram(pred.probabilities, args.figure, args.threshold)
        outputs.append(Path(args.figure))
    timings = {**st.timings, **pred.timings}
    log.info("local patch encoding %.3f s, network %.3f s", pred.timings["local_patch_encoding_s"],
             pred.timings["network_s"])
    write_manifest(out, args, [args.cloud, args.checkpoint], outputs, timings,
                   {"n_points": cloud.n, "n_edge": len(pred.labels)})
    print(f"{out}: {len(pred.labels)} of {cloud.n} points labelled edge "
          f"(local patch encoding {pred.timings['local_patch_encoding_s']:.3f} s, "
          f"network {pred.timings['network_s']:.3f} s)")
    return 0


def cmd_eval(args) -> int:
    cloud = load_cloud(args.cloud)
    if args.gt is None:
        args.gt = _labels_for(args.cloud)
        if args.gt is None:
            raise ValueError(f"{args.cloud}: no --gt given and no {sidecar_path(args.cloud).name} sidecar")
    gt = EdgeLabelSet.load(args.gt, cloud.n)
    protocol = {"label": "label_direct", "icp": "icp_matched"}[args.protocol]
    pred_cloud = load_cloud(args.pred_cloud) if args.pred_cloud else None
    pred = EdgeLabelSet.load(args.pred, (pred_cloud or cloud).n)
    st = _Stages()
    report = st.run("evaluate", evaluate, pred, gt, cloud, protocol, pred_cloud, args.tau)
    out = Path(args.out)
    out.write_text(report.to_json() + "\n", encoding="utf-8")
    outputs = [out]
    if args.figure:
        from .plotting import plot_edge_comparison

        if protocol == "label_direct":
            plot_edge_comparison(cloud.points, pred.to_mask(), gt.to_mask(), args.figure,
                                 f"IoU {report.iou:.3f}  MCC {report.mcc:.3f}")
            outputs.append(Path(args.figure))
        else:
            log.warning("--figure is only drawn for the label protocol")
    write_manifest(out, args, [args.pred, args.gt, args.cloud], outputs, st.timings)
    print(f"{out}: IoU {report.iou:.3f} MCC {report.mcc:.3f} P {report.precision:.3f} R {report.recall:.3f}")
    return 0


def cmd_perturb(args) -> int:
    cloud = load_cloud(args.cloud, labels_path=args.labels or _labels_for(args.cloud))
    meta = {"seed": args.seed}
    out = Path(args.out)
    outputs = [out]
    if args.noise is not None:
        dens = sampling_density(cloud, args.seed)
        cloud = add_gaussian_noise(cloud, args.noise, dens, args.seed)
        meta.update(scale=args.noise, s_density=dens.s_density, sigma=args.noise * dens.s_density)
        if not args.keep_normals and args.noise > 0:
            cloud = estimate_normals_pca(cloud, args.k)
            meta["normals"] = f"re-estimated (PCA, k={args.k})"
        else:
            meta["normals"] = "carried over"
    else:
        cloud, keep = random_downsample(cloud, args.ratio, args.seed)
        meta.update(ratio=args.ratio, n_kept=cloud.n)
        index_path = out.with_suffix(".index")
        np.savetxt(index_path, keep, fmt="%d")
        outputs.append(index_path)
    save_cloud(cloud, out, "xyz")
    if cloud.labels is not None:
        outputs.append(sidecar_path(out))
    sidecar = out.with_suffix(".json")
    sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    outputs.append(sidecar)
    write_manifest(out, args, [args.cloud], outputs, {})
    print(f"{out}: {cloud.n} points")
    return 0


def cmd_gradcheck(args) -> int:
    results = gradient_suite(args.seed)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{r.name:<{width}}  {r.error:.3e}  < {r.tol:.0e}  {'ok' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="edgeformer", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def cmd(name, func, help):
        sp = sub.add_parser(name, help=help)
        sp.set_defaults(func=func)
        sp.add_argument("--seed", type=int, default=0)
        return sp

    sp = cmd("gt-extract", cmd_gt_extract, "edge labels from an ABC feature YAML + OBJ mesh")
    sp.add_argument("--yaml", required=True, type=Path)
    sp.add_argument("--obj", required=True, type=Path)
    sp.add_argument("--out", required=True, type=Path, help="output .xyz (labels written beside it)")
    sp.add_argument("--k", type=int, default=20, help="neighbours for the PCA fallback normal")

    sp = cmd("synth", cmd_synth, "sample a labelled synthetic shape")
    sp.add_argument("--kind", required=True, choices=SHAPE_KINDS)
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument("--n", type=int, help="number of points")
    g.add_argument("--density", type=float, help="points per unit area")
    sp.add_argument("--angle", type=float, default=90.0, help="wedge dihedral angle in degrees")
    sp.add_argument("--out", required=True, type=Path)

    sp = cmd("descriptors", cmd_descriptors, "compute D1/D2 patch descriptors")
    sp.add_argument("--cloud", required=True, type=Path)
    sp.add_argument("--k", type=int, default=20)
    sp.add_argument("--normals", choices=("auto", "pca"), default="auto")
    sp.add_argument("--no-normalize", action="store_true")
    sp.add_argument("--out", required=True, type=Path)

    sp = cmd("train", cmd_train, "train a model on labelled clouds")
    sp.add_argument("--data", required=True, nargs="+", type=Path, help="clouds with .labels sidecars")
    sp.add_argument("--val", nargs="*", type=Path)
    sp.add_argument("--config", type=Path, help="key = value training config")
    sp.set_defaults(seed=None)
    for flag, typ in (("epochs", int), ("batch-size", int), ("lr", float), ("k", int), ("d-model", int),
                      ("heads", int), ("layers", int), ("ffn", int)):
        sp.add_argument(f"--{flag}", type=typ)
    sp.add_argument("--ablation", choices=("full", "mlp_only", "encoder_only", "drop_d1", "drop_d2"))
    sp.add_argument("--no-balance", action="store_true")
    sp.add_argument("--out", required=True, type=Path, help="checkpoint path")
    sp.add_argument("--log", type=Path)
    sp.add_argument("--figure", type=Path)

    sp = cmd("predict", cmd_predict, "label the edge points of a cloud")
    sp.add_argument("--cloud", required=True, type=Path)
    sp.add_argument("--checkpoint", required=True, type=Path)
    sp.add_argument("--batch-size", type=int, default=256)
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.add_argument("--normals", choices=("auto", "pca"), default="auto")
    sp.add_argument("--out", required=True, type=Path, help="output .labels")
    sp.add_argument("--probs", type=Path)
    sp.add_argument("--figure", type=Path)

    sp = cmd("eval", cmd_eval, "score predicted edge labels")
    sp.add_argument("--pred", required=True, type=Path)
    sp.add_argument("--gt", type=Path, help="ground-truth .labels (default: the cloud's sidecar)")
    sp.add_argument("--cloud", required=True, type=Path)
    sp.add_argument("--pred-cloud", type=Path, help="point set the prediction indexes (icp protocol)")
    sp.add_argument("--protocol", choices=("label", "icp"), default="label")
    sp.add_argument("--tau", type=float, default=0.02)
    sp.add_argument("--out", required=True, type=Path, help="report .json")
    sp.add_argument("--figure", type=Path)

    sp = cmd("perturb", cmd_perturb, "add density-scaled noise or downsample")
    sp.add_argument("--cloud", required=True, type=Path)
    sp.add_argument("--labels", type=Path, help="edge labels (default: the cloud's sidecar, if present)")
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument("--noise", type=float, help="noise scale in units of S_density")
    g.add_argument("--ratio", type=float, help="fraction of points to keep")
    sp.add_argument("--keep-normals", action="store_true")
    sp.add_argument("--k", type=int, default=20)
    sp.add_argument("--out", required=True, type=Path)

    cmd("gradcheck", cmd_gradcheck, "finite-difference check of every primitive")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except DATA_ERRORS as exc:
        print(f"edgeformer: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
