"""Command-line entry point.

Exit codes: 0 success, 1 bad input data, 2 usage error. Data goes to stdout,
diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import bench_harness as bench
from . import dataset_builder as ds
from .errors import SplatForensicsError
from .ply_io import parse_ply, read_ply, save_ply, write_ply
from .splat_model import FeatureGroupMask, activate, deactivate, scene_stats

log = logging.getLogger("splatforensics")


def _protocol(text: str) -> str:
    try:
        bench.SplitProtocol.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc
    return text


def _groups(text: str) -> list[str]:
    groups = [g.strip() for g in text.split(",") if g.strip()]
    bad = [g for g in groups if g not in bench.ABLATION_GROUPS]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown groups {bad}; choose from {', '.join(bench.ABLATION_GROUPS)}")
    return groups


def _threads_default() -> int:
    env = os.environ.get("F3DGS_THREADS")
    return int(env) if env else (os.cpu_count() or 1)


def _emit(args, rows: list[dict]) -> None:
    """Print records as JSON lines, CSV or an aligned table."""
    if args.format == "json-lines":
        for r in rows:
            print(json.dumps(r, sort_keys=True))
        return
    if not rows:
        return
    keys = list(rows[0])
    if args.format == "csv":
        import csv

        w = csv.DictWriter(sys.stdout, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        return
    cells = [[str(r[k]) for k in keys] for r in rows]
    widths = [max(len(k), *(len(c[i]) for c in cells)) for i, k in enumerate(keys)]
    print("  ".join(k.ljust(w) for k, w in zip(keys, widths)))
    for c in cells:
        print("  ".join(v.ljust(w) for v, w in zip(c, widths)))


# splat -------------------------------------------------------------------------

def cmd_splat_inspect(args):
    raw = read_ply(args.file)
    stats = scene_stats(activate(raw)).to_dict()
    if args.format == "json-lines":
        print(json.dumps({"file": str(args.file), "sh_degree": raw.sh_degree, **stats}, sort_keys=True))
        return
    rows = [{"group": "bbox", "channel": i, "mean": "", "std": "", "min": lo, "max": hi}
            for i, (lo, hi) in enumerate(zip(stats["bbox_min"], stats["bbox_max"]))]
    for name, g in stats["groups"].items():
        for i in range(len(g["mean"])):
            rows.append({"group": name, "channel": i, **{k: f"{g[k][i]:.6g}" for k in ("mean", "std", "min", "max")}})
    if args.format == "table":
        print(f"{args.file}: {stats['count']} Gaussians, SH degree {raw.sh_degree}")
    _emit(args, rows)


def cmd_splat_convert(args):
    data = Path(args.input).read_bytes()
    Path(args.output).write_bytes(write_ply(parse_ply(data)))


def cmd_splat_encode(args):
    from .sogs_codec import encode_scene, save_package

    raw = read_ply(args.ply)
    pkg = encode_scene(raw, bits=args.bits, refine_passes=args.passes, store_permutation=args.store_perm)
    size = save_package(pkg, args.output, threads=args.threads)
    log.info("wrote %s (%d bytes, grid %dx%d)", args.output, size, *pkg.grid_dims)


def cmd_splat_decode(args):
    from .sogs_codec import decode_scene, load_package

    save_ply(args.output, decode_scene(load_package(args.package)))


def cmd_splat_report(args):
    from .sogs_codec import compression_report

    raw = read_ply(args.ply)
    d = Path(args.package)
    if not (d / "meta.json").exists():
        raise FileNotFoundError(f"not a package directory: {d}")
    per = {p.name: p.stat().st_size for p in sorted(d.iterdir()) if p.is_file()}
    rep = compression_report(raw, sum(per.values()), per)
    if args.format == "json-lines":
        print(json.dumps(rep, sort_keys=True))
    else:
        _emit(args, [{k: rep[k] for k in ("raw_bytes", "packed_bytes", "ratio", "code_ratio")}])


# dataset / caption ---------------------------------------------------------------

def cmd_dataset_balance(args):
    m = ds.read_manifest(args.manifest)
    ds.write_manifest(ds.Manifest(ds.balance_categories(m.records, args.seed), args.seed), args.output)


def cmd_dataset_assign(args):
    m = ds.read_manifest(args.manifest)
    ids = [r.id for r in m.records if not r.is_fake]
    if args.mode == "balanced":
        assignment = ds.assign_edit_types(ids, args.seed)
    else:
        assignment = ds.sample_templates(ids, args.seed)
    by_id = m.by_id()
    rows = []
    for sid in ids:
        fam = assignment[sid]
        template = ds.FAMILY_TEMPLATE[fam]
        rows.append({"id": sid, "edit_family": fam, "template": template,
                     "prompt": ds.build_edit_prompt(by_id[sid].caption, template)})
    if args.format == "json-lines" or args.format == "table":
        for r in rows:
            print(json.dumps(r, ensure_ascii=False, sort_keys=True))
    else:
        _emit(args, rows)


_FAMILY_FLAG = {"color": "color", "material": "material_type", "background": "background_surface"}


def cmd_dataset_synth_edit(args):
    scene = activate(read_ply(args.input))
    edited = ds.synth_edit(scene, _FAMILY_FLAG[args.family], args.magnitude, args.seed)
    save_ply(args.output, deactivate(_clamp(edited)))


def _clamp(scene, eps=1e-6):
    return scene.with_(opacity=np.clip(scene.opacity, eps, 1.0 - eps))


def cmd_dataset_synth_corpus(args):
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    family = args.family if args.family == "opacity" else _FAMILY_FLAG[args.family]
    samples = ds.synth_corpus(args.scenes, args.gaussians, args.seed, family, args.magnitude, args.sh_degree)
    for s in samples:
        save_ply(out / s.record.asset_path, deactivate(_clamp(s.scene)))
    ds.write_manifest(ds.Manifest([s.record for s in samples], args.seed), out / "manifest.jsonl")
    log.info("wrote %d scenes to %s", len(samples), out)


def cmd_caption_prompt(args):
    caption = args.caption if args.caption is not None else sys.stdin.read().strip()
    sys.stdout.write(ds.build_edit_prompt(caption, args.template) + "\n")


# detect --------------------------------------------------------------------------

def _config_from(args, **extra):
    from .detector import DetectorConfig

    mask = FeatureGroupMask()
    if getattr(args, "drop", None):
        mask = mask.without(*args.drop)
    return DetectorConfig(
        width=args.width,
        heads=args.heads,
        window=args.window,
        epochs=args.epochs,
        batch_scenes=args.batch_scenes,
        lr=args.lr,
        sh_degree=args.sh_degree,
        pool_prefix_bits=args.pool_prefix_bits,
        mask=mask,
        seed=args.seed,
        domain=args.domain,
        **extra,
    )


def _records_for(args, manifest, default_partition):
    protocol = bench.SplitProtocol.parse(args.protocol, seed=args.seed)
    partition = args.partition or default_partition
    if partition == "all":
        return manifest.records, protocol
    split = bench.make_split(manifest.records, protocol)
    return (split.train if partition == "train" else split.test), protocol


def cmd_detect_train(args):
    from .detector import train

    manifest = ds.read_manifest(args.manifest)
    records, _ = _records_for(args, manifest, "train")
    load = bench.scene_loader(Path(args.manifest).parent)
    config = _config_from(args)
    scenes = [load(r) for r in records]
    labels = [int(r.is_fake) for r in records]

    def report(row):
        if not args.quiet:
            print(f"epoch {row['epoch']:3d}  loss {row['loss']:.4f}  acc {row['accuracy']:.1f}", file=sys.stderr)

    ckpt = train(scenes, labels, config, on_epoch=report)
    ckpt.save(args.out)


def cmd_detect_predict(args):
    from .detector import Checkpoint, predict

    ckpt = Checkpoint.load(args.checkpoint)
    rows = []
    for path in args.scenes:
        res = predict(ckpt, bench.load_scene(path))
        rows.append({"scene": str(path), "score": res["score"], "label": res["label"]})
    _emit(args, rows)


def cmd_detect_gradcheck(args):
    from .detector import grad_check, init_params
    from .detector.training import pack_scenes
    from .splat_model import NormalizationSpec

    config = _config_from(args)
    rng = np.random.default_rng(args.seed)
    scenes = [ds.synth_scene(args.gaussians, rng, config.sh_degree) for _ in range(args.scenes)]
    labels = [i % 2 for i in range(args.scenes)]
    batch = pack_scenes(scenes, config, NormalizationSpec.fit(scenes), labels)
    err = grad_check(init_params(config), batch, config, args.probes, args.eps, seed=args.seed)
    _emit(args, [{"probes": args.probes, "eps": args.eps, "max_relative_error": float(err), "pass": bool(err < 1e-3)}])
    if err >= 1e-3:
        raise SplatForensicsError(f"gradient check failed: max relative error {err:.3g}")


# bench -----------------------------------------------------------------------------

def cmd_bench_split(args):
    manifest = ds.read_manifest(args.manifest)
    protocol = bench.SplitProtocol.parse(args.protocol, seed=args.seed)
    split = bench.make_split(manifest.records, protocol)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        ds.write_manifest(ds.Manifest(split.train, args.seed), out / "train.jsonl")
        ds.write_manifest(ds.Manifest(split.test, args.seed), out / "test.jsonl")
    rows = []
    for name, part in (("train", split.train), ("test", split.test)):
        fakes = sum(r.is_fake for r in part)
        rows.append({"partition": name, "records": len(part), "real": len(part) - fakes, "fake": fakes})
    _emit(args, rows)
    if split.dropped:
        print(f"dropped {split.dropped} fake records from other editors", file=sys.stderr)


def cmd_bench_eval(args):
    from .detector import Checkpoint
    from .detector.training import predict_logits

    ckpt = Checkpoint.load(args.checkpoint)
    manifest = ds.read_manifest(args.manifest)
    records, protocol = _records_for(args, manifest, "test")
    load = bench.scene_loader(Path(args.manifest).parent)
    logits = predict_logits(ckpt, [load(r) for r in records])
    preds = {r.id: int(z > 0) for r, z in zip(records, logits)}
    metrics = bench.evaluate(preds, records)
    train_name, test_name = protocol.describe()
    row = bench.ReportRow(train_name, test_name, metrics)
    text = bench.render_report([row], args.format)
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(bench.render_report([row], "csv"))


def cmd_bench_ablate(args):
    manifest = ds.read_manifest(args.manifest)
    protocol = bench.SplitProtocol.parse(args.protocol, seed=args.seed)
    split = bench.make_split(manifest.records, protocol)
    load = bench.scene_loader(Path(args.manifest).parent)
    result = bench.run_ablation(split, load, _config_from(args), args.groups, protocol)
    text = result.to_csv()
    if args.out:
        Path(args.out).write_text(text)
    if args.format == "json-lines":
        for r in result.rows:
            print(json.dumps({"removed": r.removed, "width": r.width, **r.metrics.to_dict(),
                              "delta_overall": r.delta_overall, "delta_fake": r.delta_fake,
                              "delta_real": r.delta_real}, sort_keys=True))
    else:
        sys.stdout.write(text)


# parser ------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--quiet", action="store_true")
    common.add_argument("--format", choices=("table", "csv", "json-lines"), default="table")
    common.add_argument("--threads", type=int, default=_threads_default())

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--width", type=int, default=64)
    model.add_argument("--heads", type=int, default=4)
    model.add_argument("--window", type=int, default=64)
    model.add_argument("--epochs", type=int, default=30)
    model.add_argument("--batch-scenes", type=int, default=8)
    model.add_argument("--lr", type=float, default=1e-3)
    model.add_argument("--sh-degree", type=int, default=3)
    model.add_argument("--pool-prefix-bits", type=int, default=6)
    model.add_argument("--domain", choices=("activated", "stored"), default="activated")
    model.add_argument("--drop", type=_groups, default=[], help="comma-separated feature groups to leave out")

    split = argparse.ArgumentParser(add_help=False)
    split.add_argument("--protocol", type=_protocol, default="mixed")
    split.add_argument("--partition", choices=("train", "test", "all"))

    parser = argparse.ArgumentParser(prog="splatforensics", description=__doc__.splitlines()[0])
    groups = parser.add_subparsers(dest="group", required=True)

    def leaf(sub, name, func, parents=(), **kw):
        p = sub.add_parser(name, parents=[common, *parents], **kw)
        p.set_defaults(func=func)
        return p

    splat = groups.add_parser("splat", help="PLY assets and grid packages").add_subparsers(dest="verb", required=True)
    p = leaf(splat, "inspect", cmd_splat_inspect, help="print per-channel statistics")
    p.add_argument("file", type=Path)
    p = leaf(splat, "convert", cmd_splat_convert, help="rewrite a PLY in canonical property order")
    p.add_argument("input", type=Path)
    p.add_argument("-o", "--output", type=Path, required=True)
    p = leaf(splat, "encode", cmd_splat_encode, help="quantise, sort and pack a PLY into PNG grids")
    p.add_argument("ply", type=Path)
    p.add_argument("-o", "--output", type=Path, required=True)
    p.add_argument("--bits", type=int, default=8, choices=range(1, 9))
    p.add_argument("--passes", type=int, default=2)
    p.add_argument("--store-perm", action="store_true")
    p = leaf(splat, "decode", cmd_splat_decode, help="unpack a grid package back to PLY")
    p.add_argument("package", type=Path)
    p.add_argument("-o", "--output", type=Path, required=True)
    p = leaf(splat, "report", cmd_splat_report, help="compare PLY and package sizes")
    p.add_argument("ply", type=Path)
    p.add_argument("package", type=Path)

    dataset = groups.add_parser("dataset", help="manifests and synthetic data").add_subparsers(dest="verb", required=True)
    p = leaf(dataset, "balance", cmd_dataset_balance, help="keep min-count records per category")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("-o", "--output", type=Path, required=True)
    p = leaf(dataset, "assign-edits", cmd_dataset_assign, help="assign edit families and emit prompts")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--mode", choices=("balanced", "sample"), default="balanced")
    p = leaf(dataset, "synth-edit", cmd_dataset_synth_edit, help="apply a synthetic edit to a PLY")
    p.add_argument("input", type=Path)
    p.add_argument("-o", "--output", type=Path, required=True)
    p.add_argument("--family", choices=tuple(_FAMILY_FLAG), required=True)
    p.add_argument("--magnitude", type=float, default=0.5)
    p = leaf(dataset, "synth-corpus", cmd_dataset_synth_corpus, help="write a paired real/fake toy corpus")
    p.add_argument("-o", "--output", type=Path, required=True)
    p.add_argument("--scenes", type=int, default=100)
    p.add_argument("--gaussians", type=int, default=64)
    p.add_argument("--family", choices=("opacity", *_FAMILY_FLAG), default="opacity")
    p.add_argument("--magnitude", type=float, default=0.4)
    p.add_argument("--sh-degree", type=int, default=3)

    caption = groups.add_parser("caption", help="edit-caption prompts").add_subparsers(dest="verb", required=True)
    p = leaf(caption, "prompt", cmd_caption_prompt, help="print the full prompt for a caption")
    p.add_argument("--template", type=int, choices=(1, 2, 3), required=True)
    p.add_argument("--caption", help="caption text (read from stdin when omitted)")

    detect = groups.add_parser("detect", help="train and run the detector").add_subparsers(dest="verb", required=True)
    p = leaf(detect, "train", cmd_detect_train, parents=(model, split), help="train on a manifest split")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p = leaf(detect, "predict", cmd_detect_predict, help="score scenes")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("scenes", type=Path, nargs="+")
    p = leaf(detect, "gradcheck", cmd_detect_gradcheck, parents=(model,), help="finite-difference gradient check")
    p.add_argument("--scenes", type=int, default=3)
    p.add_argument("--gaussians", type=int, default=50)
    p.add_argument("--probes", type=int, default=200)
    p.add_argument("--eps", type=float, default=1e-4)

    bench_p = groups.add_parser("bench", help="splits, evaluation, ablation").add_subparsers(dest="verb", required=True)
    p = leaf(bench_p, "split", cmd_bench_split, help="partition a manifest")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--protocol", type=_protocol, default="mixed")
    p.add_argument("--out", type=Path, help="directory for train.jsonl/test.jsonl")
    p = leaf(bench_p, "eval", cmd_bench_eval, parents=(split,), help="evaluate a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, help="also write the report as CSV")
    p = leaf(bench_p, "ablate", cmd_bench_ablate, parents=(model,), help="feature-group ablation")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--protocol", type=_protocol, default="mixed")
    p.add_argument("--groups", type=_groups, default=list(bench.ABLATION_GROUPS))
    p.add_argument("--out", type=Path)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (SplatForensicsError, OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
