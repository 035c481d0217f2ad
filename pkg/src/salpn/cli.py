"""``salpn`` command line: plan, synth, augment, train, eval, pipeline, sweep-alpha.

Every command reads an optional JSON run config (``--config``), lets the
``SALPN_SEED`` environment variable override its seed, and exits with 0 only
when its outputs were written and all validations passed.  Configuration
problems exit with 2, other failures with 1.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import geometry
from .augment import adjusted_height, simulate_height, simulate_height_labels
from .model import predict, save_checkpoint
from .pipeline import (
    ConfigError,
    RunConfig,
    ViewEncoder,
    descriptors,
    encode_gallery,
    encode_training,
    plot_degradation,
    public,
    run_pipeline,
    sweep_alpha,
    train_bank,
    view_theta,
    write_sweep_csv,
)
from .retrieval import EmbeddingRecord, evaluate, read_embeddings, write_embeddings
from .synth import Manifest, load_view, make_dataset, write_dataset
from .tensor import save_image, save_labels, to_uint8

log = logging.getLogger("salpn")


def _write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    overrides = {}
    for name in ("alpha", "n_parts", "num_classes", "image_size"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if getattr(args, "no_haas", False):
        overrides["haas"] = False
    if getattr(args, "delta_p", None) is not None:
        overrides["delta_p_list"] = list(args.delta_p)
    return replace(cfg, **overrides).validate() if overrides else cfg


def _manifest(args, cfg: RunConfig) -> Manifest:
    """The manifest named on the command line, or an in-memory synthetic one."""
    if getattr(args, "manifest", None):
        return Manifest.read(args.manifest)
    return make_dataset(cfg.seed, cfg.num_classes, cfg.drone_heights, cfg.h_sat,
                        cfg.image_size, cfg.test_fraction)


# -- commands ------------------------------------------------------------------

def cmd_plan(args) -> int:
    cfg = _load_config(args)
    h = cfg.h_sat if args.h_drone is None else args.h_drone
    theta = view_theta(cfg, "drone", h, cfg.alpha if cfg.haas else 0.0)
    drone = geometry.plan_haas(cfg.map_size, cfg.n_parts, theta)
    sat = geometry.plan_sps(cfg.map_size, cfg.n_parts)
    shrink, expand = geometry.alpha_bounds(cfg.h_sat, *reversed(cfg.height_range()),
                                           cfg.n_parts, cfg.map_size)
    out = {
        "h_drone": h,
        "h_sat": cfg.h_sat,
        "alpha": cfg.alpha,
        "alpha_bounds": {"shrink": shrink, "expand": expand},
        "theta": theta,
        "drone": {**drone.to_dict(), "sides": drone.sides},
        "satellite": {**sat.to_dict(), "sides": sat.sides},
    }
    text = json.dumps(out, indent=2, sort_keys=True)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    return 0


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    m = make_dataset(cfg.seed, cfg.num_classes, cfg.drone_heights, cfg.h_sat,
                     cfg.image_size, cfg.test_fraction)
    written = write_dataset(m, args.out)
    log.info("wrote %d views to %s", len(written.records), args.out)
    print(json.dumps({"manifest": str(Path(args.out) / "manifest.jsonl"),
                      "views": len(written.records), "content_hash": written.content_hash()}))
    return 0


def cmd_augment(args) -> int:
    cfg = _load_config(args)
    src = Manifest.read(args.manifest)
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    records = []

    def emit(rec, image, labels):
        stem = f"c{rec.class_id:04d}_{rec.role}_v{rec.view:02d}_dp{rec.delta_p:+d}"
        save_image(out / f"images/{stem}.png", image)
        save_labels(out / f"labels/{stem}.png", labels)
        digest = hashlib.sha256(to_uint8(image).tobytes()).hexdigest()
        records.append(replace(rec, path=f"images/{stem}.png",
                               label_path=f"labels/{stem}.png", sha256=digest))

    for r in src.records:
        view = load_view(r, src.root)
        if r.role != "drone" or r.delta_p != 0:
            emit(r, view.image, view.label_map)
            continue
        for dp in cfg.delta_p_list:
            h = adjusted_height(r.height_m, dp, cfg.lambda_aug)
            image = simulate_height(view.image, dp) if dp else view.image
            labels = simulate_height_labels(view.label_map, dp) if dp else view.label_map
            emit(replace(r, delta_p=int(dp), height_m=h, base_height_m=r.height_m), image, labels)
    m = Manifest(records, out)
    m.write(out / "manifest.jsonl")
    print(json.dumps({"manifest": str(out / "manifest.jsonl"), "views": len(records),
                      "content_hash": m.content_hash()}))
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    m = _manifest(args, cfg)
    alpha = cfg.alpha if cfg.haas else 0.0
    X, X_flip, y, classes = encode_training(cfg, m, [alpha])
    bank, history = train_bank(cfg, X[alpha], X_flip[alpha], y)
    acc = float(np.mean(predict(bank, X[alpha]) == y))
    save_checkpoint(args.out, bank, cfg.train,
                    {"alpha": alpha, "class_ids": classes, "run_config": cfg.to_dict(),
                     "input_hash": m.content_hash(), "train_accuracy": acc})
    summary = {"checkpoint": str(args.out), "alpha": alpha, "train_accuracy": acc,
               "final_loss": history[-1]}
    if args.embed_dir:
        summary.update(_write_test_embeddings(cfg, m, bank, alpha, Path(args.embed_dir)))
    print(json.dumps(summary, sort_keys=True))
    return 0


def _write_test_embeddings(cfg: RunConfig, m: Manifest, bank, alpha: float, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    gX, g_ids, g_classes, _ = encode_gallery(cfg, m)
    gallery = [EmbeddingRecord(i, c, v) for i, c, v in zip(g_ids, g_classes, descriptors(cfg, bank, gX))]
    enc = ViewEncoder(cfg)
    qX, queries = [], []
    for r in m.select(split="test", role="drone"):
        view = load_view(r, m.root)
        theta = view_theta(cfg, "drone", r.height_m, alpha)
        qX.append(enc.encode(view.image, [theta])[theta])
        queries.append((f"drone:c{r.class_id:04d}:v{r.view:02d}:dp{r.delta_p:+d}", r.class_id))
    if not queries:
        raise ValueError("manifest has no test drone views")
    q_desc = descriptors(cfg, bank, np.asarray(qX))
    write_embeddings(out / "gallery.fmap", gallery)
    write_embeddings(out / "queries.fmap", [EmbeddingRecord(i, c, v) for (i, c), v in zip(queries, q_desc)])
    return {"gallery": str(out / "gallery.fmap"), "queries": str(out / "queries.fmap")}


def cmd_eval(args) -> int:
    queries = read_embeddings(args.queries)
    gallery = read_embeddings(args.gallery)
    report = evaluate(queries, gallery, args.k)
    _write_json(args.out, report)
    print(json.dumps({"recall": report["recall"], "map": report["map"]}, sort_keys=True))
    return 0


def cmd_pipeline(args) -> int:
    cfg = _load_config(args)
    m = _manifest(args, cfg)
    alphas = None
    if args.compare:
        alphas = [cfg.alpha, 0.0] if cfg.haas else [0.0]
    report = run_pipeline(cfg, m, alphas)
    if args.checkpoint_dir:
        ckdir = Path(args.checkpoint_dir)
        ckdir.mkdir(parents=True, exist_ok=True)
        for a, bank in report["_banks"].items():
            save_checkpoint(ckdir / f"alpha{a:g}.ckpt", bank, cfg.train, {"alpha": a})
    report = public(report)
    _write_json(args.out, report)
    if args.svg:
        plot_degradation(args.svg, report)
    summary = {name: {"mean_r1": v["mean_r1"], "mean_map": v["mean_map"], "mean_iou": v["mean_iou"]}
               for name, v in report["variants"].items()}
    print(json.dumps({"report": str(args.out), "report_hash": report["report_hash"],
                      "variants": summary}, sort_keys=True))
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    m = _manifest(args, cfg)
    rows = sweep_alpha(cfg, m, [float(a) for a in args.alphas],
                       args.delta_p if args.delta_p is not None else None)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_sweep_csv(args.out, rows)
    print(json.dumps({"csv": str(args.out), "rows": len(rows)}))
    return 0


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="salpn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, manifest=False):
        sp.add_argument("--config", type=Path, help="JSON run config (defaults if omitted)")
        sp.add_argument("--alpha", type=float, help="partition adjustment factor")
        sp.add_argument("--n-parts", dest="n_parts", type=int)
        sp.add_argument("--no-haas", action="store_true", help="force theta = 0 everywhere")
        if manifest:
            sp.add_argument("--manifest", type=Path,
                            help="dataset manifest.jsonl (default: synthesise in memory from the config)")
            sp.add_argument("--num-classes", dest="num_classes", type=int)
            sp.add_argument("--image-size", dest="image_size", type=int)

    sp = sub.add_parser("plan", help="print drone and satellite partition plans")
    common(sp)
    sp.add_argument("--h-drone", type=float, help="drone height in metres (default: H_S)")
    sp.add_argument("--out", type=Path)
    sp.set_defaults(func=cmd_plan)

    sp = sub.add_parser("synth", help="render a synthetic dataset to disk")
    common(sp)
    sp.add_argument("--num-classes", dest="num_classes", type=int)
    sp.add_argument("--image-size", dest="image_size", type=int)
    sp.add_argument("--out", type=Path, required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("augment", help="write height-simulated copies of drone views")
    common(sp)
    sp.add_argument("--manifest", type=Path, required=True)
    sp.add_argument("--delta-p", type=int, nargs="+", help="ΔP values in pixels")
    sp.add_argument("--out", type=Path, required=True)
    sp.set_defaults(func=cmd_augment)

    sp = sub.add_parser("train", help="train the classifier heads and save a checkpoint")
    common(sp, manifest=True)
    sp.add_argument("--out", type=Path, required=True, help="checkpoint path")
    sp.add_argument("--embed-dir", type=Path, help="also write test gallery/query embeddings here")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="score query embeddings against a gallery")
    sp.add_argument("--queries", type=Path, required=True)
    sp.add_argument("--gallery", type=Path, required=True)
    sp.add_argument("--k", type=int, nargs="+", default=[1, 5, 10])
    sp.add_argument("--out", type=Path, required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("pipeline", help="end-to-end train + evaluate over ΔP")
    common(sp, manifest=True)
    sp.add_argument("--delta-p", type=int, nargs="+")
    sp.add_argument("--compare", action="store_true", help="also run the theta = 0 ablation")
    sp.add_argument("--out", type=Path, required=True, help="JSON report")
    sp.add_argument("--svg", type=Path, help="R@1 vs ΔP plot")
    sp.add_argument("--checkpoint-dir", type=Path)
    sp.set_defaults(func=cmd_pipeline)

    sp = sub.add_parser("sweep-alpha", help="mean R@1 over an (alpha, ΔP) grid as CSV")
    common(sp, manifest=True)
    sp.add_argument("--alphas", type=float, nargs="+", required=True)
    sp.add_argument("--delta-p", type=int, nargs="+")
    sp.add_argument("--out", type=Path, required=True)
    sp.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"salpn: config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError) as exc:
        print(f"salpn: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
