"""End-to-end wiring: image -> features -> x4 upsample -> partition plan ->
saliency split -> heads -> descriptors -> retrieval metrics.

Drone views use a per-image theta computed from their recorded height;
satellite views always use the uniform plan.  Several values of alpha can
be run over the same data in one pass (alpha = 0 is the uniform-plan
ablation), sharing the expensive rendering and feature extraction.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import geometry
from .augment import LAMBDA_AUG, adjusted_height, simulate_height, simulate_height_labels
from .model import HeadBank, TrainConfig, assemble_descriptor, predict, train
from .refinement import METRICS, refine_part
from .retrieval import EmbeddingRecord, evaluate
from .synth import Manifest, handcrafted_features, load_view, partition_alignment_iou
from .tensor import upsample4

log = logging.getLogger(__name__)

SEED_ENV = "SALPN_SEED"


class ConfigError(ValueError):
    pass


def desk_train_config(**overrides) -> TrainConfig:
    """Default optimiser settings with a head learning rate suited to tiny data."""
    base = dict(lr_heads=0.02, epochs=60, decay_epoch=40, batch_size=8)
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class RunConfig:
    n_parts: int = 4
    alpha: float = 14.0
    delta: float = 0.5
    cm_metric: str | None = "chebyshev"
    h_sat: float = 189.75
    map_size: int = 128
    image_size: int = 512
    feature_grid: int = 32
    channels: int = 32
    d_mid: int = 16
    dropout_rate: float = 0.0
    l2_normalize: bool = False
    seed: int = 0
    h_drone_min: float = 123.5
    h_drone_max: float = 256.0
    lambda_aug: float = LAMBDA_AUG
    delta_p_list: list = field(default_factory=lambda: [-150, -100, -50, 0, 50, 100, 150])
    k_list: list = field(default_factory=lambda: [1, 5, 10])
    haas: bool = True
    num_classes: int = 20
    test_fraction: float = 0.5
    drone_heights: list = field(default_factory=lambda: [123.5, 156.625, 189.75, 222.875, 256.0])
    query_heights: list | None = None
    train: TrainConfig = field(default_factory=desk_train_config)
    paths: dict = field(default_factory=dict)

    def __post_init__(self):
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)

    # -- validation --------------------------------------------------------

    def query_base_heights(self) -> list[float]:
        return list(self.query_heights) if self.query_heights else list(self.drone_heights)

    def height_range(self) -> tuple[float, float]:
        """Drone height range seen by the pipeline, ΔP-augmented queries included."""
        base = self.query_base_heights() or [self.h_sat]
        dps = list(self.delta_p_list) or [0]
        lo = min(self.h_drone_min, min(base) + self.lambda_aug * min(min(dps), 0))
        hi = max(self.h_drone_max, max(base) + self.lambda_aug * max(max(dps), 0))
        return lo, hi

    def check_alpha(self, alpha: float) -> None:
        lo, hi = self.height_range()
        shrink, expand = geometry.alpha_bounds(self.h_sat, hi, lo, self.n_parts, self.map_size)
        if alpha < 0 or alpha > min(shrink, expand):
            raise ConfigError(
                f"alpha={alpha} is not admissible for drone heights [{lo:.2f}, {hi:.2f}] m "
                f"(H_S={self.h_sat}, N={self.n_parts}, map {self.map_size}): shrink bound "
                f"{shrink:.4g}, expand bound {expand:.4g}; choose alpha <= {min(shrink, expand):.4g} "
                f"or narrow the height range / delta_p_list")

    def validate(self) -> "RunConfig":
        if self.map_size != 4 * self.feature_grid:
            raise ConfigError(f"map_size ({self.map_size}) must be 4 x feature_grid ({self.feature_grid})")
        if self.image_size % self.feature_grid or self.image_size % self.map_size:
            raise ConfigError(f"image_size {self.image_size} must be a multiple of feature_grid "
                              f"{self.feature_grid} and map_size {self.map_size}")
        if not 1 <= self.n_parts <= self.map_size // 2:
            raise ConfigError(f"n_parts must be in [1, {self.map_size // 2}]")
        if not 0 <= self.delta <= 1:
            raise ConfigError(f"delta must be in [0, 1], got {self.delta}")
        if self.cm_metric is not None and self.cm_metric not in METRICS:
            raise ConfigError(f"cm_metric must be one of {METRICS} or null")
        if self.h_sat <= 0:
            raise ConfigError("h_sat must be positive")
        lo, _ = self.height_range()
        if lo <= 0:
            raise ConfigError(f"delta_p_list drives the lowest drone height to {lo:.2f} m; "
                              f"reduce the most negative delta_p")
        for dp in self.delta_p_list:
            if dp < 0 and 2 * -dp >= self.image_size:
                raise ConfigError(f"delta_p={dp} crops away the whole {self.image_size}px image")
        self.check_alpha(self.alpha)
        return self

    # -- io ------------------------------------------------------------------

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = asdict(self.train)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path=None, env=None) -> "RunConfig":
        """Read a JSON config (defaults when ``path`` is None); SALPN_SEED overrides the seed."""
        d = json.loads(Path(path).read_text()) if path else {}
        cfg = cls.from_dict(d)
        env = os.environ if env is None else env
        if env.get(SEED_ENV):
            try:
                cfg.seed = int(env[SEED_ENV])
            except ValueError:
                raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}")
        return cfg.validate()


# -- view encoding --------------------------------------------------------

class ViewEncoder:
    """Turns images into per-part (global, salient, background) vectors."""

    def __init__(self, config: RunConfig):
        self.config = config

    def feature_map(self, image) -> np.ndarray:
        c = self.config
        return upsample4(handcrafted_features(image, c.feature_grid, c.channels, seed=c.seed))

    def inputs(self, fmap: np.ndarray, theta: int) -> np.ndarray:
        """``(N, 3, C)`` stream vectors for the drone plan with this ``theta``."""
        c = self.config
        plan = geometry.plan_haas(c.map_size, c.n_parts, theta)
        parts = geometry.extract_partitions(fmap, plan)
        return np.stack([refine_part(p, c.delta, c.cm_metric).stacked() for p in parts])

    def encode(self, image, thetas) -> dict[int, np.ndarray]:
        fmap = self.feature_map(image)
        return {t: self.inputs(fmap, t) for t in set(thetas)}

    def encode_flipped(self, image, thetas) -> tuple[dict, dict]:
        fmap = self.feature_map(image)
        flipped = np.ascontiguousarray(fmap[:, :, ::-1])
        ts = set(thetas)
        return ({t: self.inputs(fmap, t) for t in ts}, {t: self.inputs(flipped, t) for t in ts})


def view_theta(config: RunConfig, role: str, height: float, alpha: float) -> int:
    if role == "satellite" or alpha == 0:
        return 0
    return geometry.scale_factor(height, config.h_sat, alpha)


# -- data preparation --------------------------------------------------------

@dataclass
class Prepared:
    alphas: list[float]
    train_X: dict            # alpha -> (M, N, 3, C)
    train_X_flip: dict
    train_y: np.ndarray      # 1-based, contiguous
    gallery_X: np.ndarray    # (G, N, 3, C), uniform plan
    gallery_ids: list[str]
    gallery_classes: list[int]
    query_X: dict            # alpha -> (Q, N, 3, C)
    query_ids: list[str]
    query_classes: list[int]
    query_dp: list[int]
    query_heights: list[float]
    query_iou: dict          # alpha -> (Q,) mean partition alignment IoU
    input_hash: str


def encode_training(config: RunConfig, manifest: Manifest, alphas):
    """Training inputs per alpha, their flipped twins, and contiguous 1-based labels.

    Returns ``(X, X_flip, y, class_ids)`` where ``class_ids[i]`` is the
    manifest class of label ``i + 1``.
    """
    enc = ViewEncoder(config)
    train_recs = [r for r in manifest.select(split="train") if r.delta_p == 0]
    if not train_recs:
        raise ValueError("manifest has no training views")
    classes = sorted({r.class_id for r in train_recs})
    remap = {c: i + 1 for i, c in enumerate(classes)}
    tx = {a: [] for a in alphas}
    txf = {a: [] for a in alphas}
    ty = []
    for r in train_recs:
        view = load_view(r, manifest.root)
        thetas = {a: view_theta(config, r.role, r.height_m, a) for a in alphas}
        plain, flipped = enc.encode_flipped(view.image, thetas.values())
        for a in alphas:
            tx[a].append(plain[thetas[a]])
            txf[a].append(flipped[thetas[a]])
        ty.append(remap[r.class_id])
    log.info("encoded %d training views over %d classes", len(ty), len(classes))
    return ({a: np.asarray(v) for a, v in tx.items()},
            {a: np.asarray(v) for a, v in txf.items()},
            np.asarray(ty, dtype=np.int64), classes)


def encode_gallery(config: RunConfig, manifest: Manifest):
    """Test-split satellite views under the uniform plan: ``(X, ids, classes, views)``."""
    enc = ViewEncoder(config)
    X, ids, classes, views = [], [], [], {}
    for r in manifest.select(split="test", role="satellite"):
        view = load_view(r, manifest.root)
        X.append(enc.encode(view.image, [0])[0])
        ids.append(f"sat:c{r.class_id:04d}")
        classes.append(r.class_id)
        views[r.class_id] = view
    if not ids:
        raise ValueError("manifest has no test satellite views")
    return np.asarray(X), ids, classes, views


def prepare(config: RunConfig, manifest: Manifest, alphas) -> Prepared:
    """Render/load every view once and encode it for all requested alphas."""
    alphas = [float(a) for a in alphas]
    for a in alphas:
        config.check_alpha(a)
    enc = ViewEncoder(config)
    train_X, train_X_flip, train_y, _ = encode_training(config, manifest, alphas)
    gallery_X, gallery_ids, gallery_classes, sat_views = encode_gallery(config, manifest)
    sps = geometry.plan_sps(config.map_size, config.n_parts)

    base_heights = {round(h, 6) for h in config.query_base_heights()}
    q_recs = [r for r in manifest.select(split="test", role="drone")
              if r.delta_p == 0 and round(r.height_m, 6) in base_heights]
    qx = {a: [] for a in alphas}
    qiou = {a: [] for a in alphas}
    q_ids, q_classes, q_dp, q_h = [], [], [], []
    for r in q_recs:
        base = load_view(r, manifest.root)
        for dp in config.delta_p_list:
            image = simulate_height(base.image, dp) if dp else base.image
            labels = simulate_height_labels(base.label_map, dp) if dp else base.label_map
            h = adjusted_height(r.height_m, dp, config.lambda_aug)
            thetas = {a: view_theta(config, "drone", h, a) for a in alphas}
            encoded = enc.encode(image, thetas.values())
            aug = type(base)(image, labels, h, base.class_id, "drone")
            for a in alphas:
                qx[a].append(encoded[thetas[a]])
                plan = geometry.plan_haas(config.map_size, config.n_parts, thetas[a])
                _, iou = partition_alignment_iou(plan, aug, sps, sat_views[r.class_id])
                qiou[a].append(iou)
            q_ids.append(f"drone:c{r.class_id:04d}:v{r.view:02d}:dp{dp:+d}")
            q_classes.append(r.class_id)
            q_dp.append(int(dp))
            q_h.append(h)
    if not q_ids:
        raise ValueError("no test drone views at the configured query heights")
    log.info("encoded %d gallery views and %d queries", len(gallery_ids), len(q_ids))

    return Prepared(
        alphas=alphas,
        train_X=train_X,
        train_X_flip=train_X_flip,
        train_y=train_y,
        gallery_X=gallery_X,
        gallery_ids=gallery_ids,
        gallery_classes=gallery_classes,
        query_X={a: np.asarray(v) for a, v in qx.items()},
        query_ids=q_ids,
        query_classes=q_classes,
        query_dp=q_dp,
        query_heights=q_h,
        query_iou={a: np.asarray(v) for a, v in qiou.items()},
        input_hash=manifest.content_hash(),
    )


# -- training + evaluation ------------------------------------------------------

def train_bank(config: RunConfig, X, X_flip, y) -> tuple[HeadBank, list[float]]:
    bank = HeadBank.init(config.n_parts, X.shape[-1], config.d_mid, int(y.max()),
                         seed=config.seed, dropout_rate=config.dropout_rate)
    history = train(bank, X, y, config.train, seed=config.seed, X_flipped=X_flip)
    return bank, history


def descriptors(config: RunConfig, bank: HeadBank, X) -> np.ndarray:
    """Inference descriptors, optionally scaled to unit length."""
    d = assemble_descriptor(bank, X)
    if config.l2_normalize:
        d = d / np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-12)
    return d


def evaluate_variant(config: RunConfig, prep: Prepared, alpha: float) -> dict:
    """Train a bank with this alpha and score every ΔP query set."""
    bank, history = train_bank(config, prep.train_X[alpha], prep.train_X_flip[alpha], prep.train_y)
    train_acc = float(np.mean(predict(bank, prep.train_X[alpha]) == prep.train_y))
    g_desc = descriptors(config, bank, prep.gallery_X)
    q_desc = descriptors(config, bank, prep.query_X[alpha])
    gallery = [EmbeddingRecord(i, c, v) for i, c, v in zip(prep.gallery_ids, prep.gallery_classes, g_desc)]
    dp_arr = np.asarray(prep.query_dp)
    rows = []
    for dp in sorted(set(prep.query_dp)):
        sel = np.flatnonzero(dp_arr == dp)
        queries = [EmbeddingRecord(prep.query_ids[i], prep.query_classes[i], q_desc[i]) for i in sel]
        metrics = evaluate(queries, gallery, config.k_list)
        rows.append({
            "delta_p": int(dp),
            "height_m": float(np.mean([prep.query_heights[i] for i in sel])),
            "theta": view_theta(config, "drone", float(np.mean([prep.query_heights[i] for i in sel])), alpha),
            "recall": metrics["recall"],
            "map": metrics["map"],
            "iou": float(prep.query_iou[alpha][sel].mean()),
            "per_query": metrics["per_query"],
        })
    r1 = [row["recall"]["1"] if "1" in row["recall"] else next(iter(row["recall"].values()))
          for row in rows]
    abs_dp = [abs(row["delta_p"]) for row in rows]
    return {
        "alpha": alpha,
        "train_accuracy": train_acc,
        "final_loss": history[-1] if history else None,
        "per_delta_p": rows,
        "mean_r1": float(np.mean(r1)),
        "mean_map": float(np.mean([row["map"] for row in rows])),
        "mean_iou": float(prep.query_iou[alpha].mean()),
        "spearman_r1_vs_abs_dp": _spearman(abs_dp, r1),
        "_bank": bank,
    }


def _spearman(x, y) -> float | None:
    if len(set(x)) < 2:
        return None
    if len(set(y)) < 2:
        return 0.0
    return float(spearmanr(x, y).statistic)


def report_hash(report: dict) -> str:
    body = {k: v for k, v in report.items() if k != "report_hash"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


def run_pipeline(config: RunConfig, manifest: Manifest, alphas=None) -> dict:
    """Train and evaluate each alpha (default: the config's, or 0 with HAAS off)."""
    if alphas is None:
        alphas = [config.alpha if config.haas else 0.0]
    prep = prepare(config, manifest, alphas)
    variants = {}
    banks = {}
    for a in prep.alphas:
        result = evaluate_variant(config, prep, a)
        banks[a] = result.pop("_bank")
        variants[f"alpha={a:g}"] = result
    report = {
        "config": config.to_dict(),
        "seed": config.seed,
        "input_hash": prep.input_hash,
        "variants": variants,
    }
    report["report_hash"] = report_hash(report)
    report["_banks"] = banks
    return report


def public(report: dict) -> dict:
    return {k: v for k, v in report.items() if not k.startswith("_")}


def sweep_alpha(config: RunConfig, manifest: Manifest, alpha_list, delta_p_list=None) -> list[dict]:
    """Mean R@1 for every (alpha, ΔP) pair."""
    if delta_p_list is not None:
        config = replace(config, delta_p_list=list(delta_p_list))
    for a in alpha_list:
        config.check_alpha(float(a))
    prep = prepare(config, manifest, alpha_list)
    rows = []
    for a in prep.alphas:
        res = evaluate_variant(config, prep, a)
        for row in res["per_delta_p"]:
            rows.append({"alpha": a, "delta_p": row["delta_p"],
                         "r1": row["recall"].get("1", next(iter(row["recall"].values()))),
                         "map": row["map"], "iou": row["iou"]})
    return rows


def write_sweep_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["alpha", "delta_p", "r1", "map", "iou"])
        w.writeheader()
        w.writerows(rows)


def plot_degradation(path, report: dict) -> None:
    """R@1 against ΔP for each variant, as SVG."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for name, v in report["variants"].items():
        xs = [row["delta_p"] for row in v["per_delta_p"]]
        ys = [100 * row["recall"].get("1", next(iter(row["recall"].values()))) for row in v["per_delta_p"]]
        ax.plot(xs, ys, marker="o", label=name)
    ax.set_xlabel("ΔP (pixels)")
    ax.set_ylabel("R@1 (%)")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
