"""Synthetic cross-view scenes and a handcrafted feature extractor.

Scenes are flat worlds of axis-aligned colored rectangles over a procedural
ground texture, with one distinguished target at the world origin.  Views are
orthographic nadir renders whose ground footprint is ``camera_k * height``
meters, so apparent object size is inversely proportional to height.

Drone and satellite renders differ photometrically (gain, noise, blur), by a
small drone-side position jitter and by transient clutter (cars) that only
drones see, so that cross-view matching is not trivial.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

from .tensor import as_image, load_image, load_labels, save_image, save_labels, to_uint8

BACKGROUND = 0
TARGET_ID = 1
TRANSIENT_BASE = 1000
CAMERA_K = 1.0
N_STATS = 10

# Shared palette so that classes are told apart by layout, not by a unique hue.
PALETTE = np.array([
    [0.78, 0.30, 0.25], [0.85, 0.82, 0.75], [0.35, 0.38, 0.42], [0.62, 0.52, 0.40],
    [0.30, 0.45, 0.70], [0.90, 0.65, 0.30], [0.55, 0.60, 0.58], [0.70, 0.70, 0.76],
    [0.45, 0.28, 0.22], [0.25, 0.55, 0.45],
])


@dataclass(frozen=True)
class SceneObject:
    obj_id: int
    x0: float
    y0: float
    x1: float
    y1: float
    color: tuple[float, float, float]

    @property
    def width(self) -> float:
        return self.x1 - self.x0


@dataclass(frozen=True)
class GroundTexture:
    base: tuple[float, float, float]
    # (kx, ky, phase, amplitude) per wave; amplitude shared across channels
    # and weighted per channel by ``tint``.
    waves: tuple[tuple[float, float, float, float], ...]
    tint: tuple[float, float, float]


@dataclass(frozen=True)
class WorldScene:
    seed: int
    class_id: int
    ground: GroundTexture
    objects: tuple[SceneObject, ...]
    extent_m: float = 400.0
    n_transients: int = 14

    @property
    def target(self) -> SceneObject | None:
        for o in self.objects:
            if o.obj_id == TARGET_ID:
                return o
        return None


@dataclass
class RenderedView:
    image: np.ndarray
    label_map: np.ndarray
    height: float
    class_id: int
    role: str = "satellite"


def _overlaps(a, b, margin):
    return not (a[2] + margin <= b[0] or b[2] + margin <= a[0]
                or a[3] + margin <= b[1] or b[3] + margin <= a[1])


def make_scene(seed: int, class_id: int, extent_m: float = 400.0,
               n_buildings: int = 40, n_transients: int = 14) -> WorldScene:
    """Deterministic scene for ``(seed, class_id)``."""
    rng = np.random.default_rng([seed, class_id, 7])
    base = tuple(float(v) for v in rng.uniform([0.25, 0.35, 0.20], [0.45, 0.55, 0.35]))
    waves = []
    for _ in range(3):
        wavelength = rng.uniform(25.0, 140.0)
        ang = rng.uniform(0, np.pi)
        k = 2 * np.pi / wavelength
        waves.append((float(k * np.cos(ang)), float(k * np.sin(ang)),
                      float(rng.uniform(0, 2 * np.pi)), float(rng.uniform(0.03, 0.08))))
    tint = tuple(float(v) for v in rng.uniform(0.5, 1.0, 3))
    ground = GroundTexture(base, tuple(waves), tint)

    half = extent_m / 2
    tw, th = rng.uniform(24.0, 42.0, 2)
    target_color = PALETTE[rng.integers(len(PALETTE))] + rng.normal(0, 0.04, 3)
    target = SceneObject(TARGET_ID, -tw / 2, -th / 2, tw / 2, th / 2,
                         tuple(float(v) for v in np.clip(target_color, 0, 1)))

    objects = []
    next_id = TARGET_ID + 1
    for _ in range(rng.integers(1, 3)):
        width = rng.uniform(6.0, 10.0)
        off = rng.uniform(-0.8 * half, 0.8 * half)
        gray = rng.uniform(0.45, 0.6)
        if rng.random() < 0.5:
            box = (-half, off, half, off + width)
        else:
            box = (off, -half, off + width, half)
        objects.append(SceneObject(next_id, *box, (gray, gray, gray * 0.97)))
        next_id += 1

    tbox = (target.x0, target.y0, target.x1, target.y1)
    placed = []
    attempts = 0
    while len(placed) < n_buildings and attempts < 40 * n_buildings:
        attempts += 1
        w, h = rng.uniform(6.0, 26.0, 2)
        # denser near the center, like a campus around its landmark
        r = half * np.sqrt(rng.uniform(0.0, 1.0)) * 0.95
        phi = rng.uniform(0, 2 * np.pi)
        cx, cy = r * np.cos(phi), r * np.sin(phi)
        box = (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
        if box[0] < -half or box[1] < -half or box[2] > half or box[3] > half:
            continue
        if _overlaps(box, tbox, 4.0) or any(_overlaps(box, p, 1.5) for p in placed):
            continue
        placed.append(box)
        color = np.clip(PALETTE[rng.integers(len(PALETTE))] + rng.normal(0, 0.05, 3), 0, 1)
        objects.append(SceneObject(next_id, *(float(v) for v in box),
                                   tuple(float(v) for v in color)))
        next_id += 1
    objects.append(target)
    return WorldScene(seed, class_id, ground, tuple(objects), extent_m, n_transients)


def _transients(scene: WorldScene, view: int, center: tuple[float, float], footprint: float):
    rng = np.random.default_rng([scene.seed, scene.class_id, view, 11])
    out = []
    half = footprint / 2
    for i in range(scene.n_transients):
        long_, short = rng.uniform(4.0, 5.0), rng.uniform(1.8, 2.2)
        w, h = (long_, short) if rng.random() < 0.5 else (short, long_)
        cx = center[0] + rng.uniform(-half, half)
        cy = center[1] + rng.uniform(-half, half)
        color = tuple(float(v) for v in rng.uniform(0.05, 0.95, 3))
        out.append(SceneObject(TRANSIENT_BASE + i, cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2, color))
    return out


def _paint(image, labels, xs, ys, obj: SceneObject):
    c0, c1 = np.searchsorted(xs, [obj.x0, obj.x1], side="left")
    r0, r1 = np.searchsorted(ys, [obj.y0, obj.y1], side="left")
    if c1 > c0 and r1 > r0:
        image[r0:r1, c0:c1] = obj.color
        labels[r0:r1, c0:c1] = obj.obj_id


def render_view(scene: WorldScene, height: float, resolution: int,
                role: str = "satellite", view: int = 0,
                camera_k: float = CAMERA_K) -> RenderedView:
    """Orthographic top-down render of a ``camera_k * height`` m footprint."""
    if height <= 0:
        raise ValueError("height must be positive")
    if role not in ("drone", "satellite"):
        raise ValueError(f"unknown role {role!r}")
    footprint = camera_k * height
    rng = np.random.default_rng([scene.seed, scene.class_id, view, int(round(height * 1000)),
                                 resolution, 0 if role == "satellite" else 1])
    if role == "drone":
        center = tuple(rng.uniform(-2.5, 2.5, 2))
    else:
        center = (0.0, 0.0)
    px = footprint / resolution
    coords = (np.arange(resolution) + 0.5) * px - footprint / 2
    xs = coords + center[0]
    ys = coords + center[1]

    g = scene.ground
    image = np.empty((resolution, resolution, 3))
    tex = np.zeros((resolution, resolution))
    for kx, ky, phase, amp in g.waves:
        # sin(a + b) expanded into two outer products
        a, b = ys * ky + phase, xs * kx
        tex += amp * (np.outer(np.sin(a), np.cos(b)) + np.outer(np.cos(a), np.sin(b)))
    image[:] = np.asarray(g.base) + tex[..., None] * np.asarray(g.tint)
    labels = np.zeros((resolution, resolution), dtype=np.int32)

    objects = list(scene.objects)
    if role == "drone" and scene.n_transients:
        objects = objects[:-1] + _transients(scene, view, center, footprint) + objects[-1:]
    for obj in objects:
        _paint(image, labels, xs, ys, obj)

    if role == "drone":
        gain = 1.0 + rng.uniform(-0.08, 0.08, 3)
        image = image * gain + 0.02 * rng.standard_normal(image.shape, dtype=np.float32)
    else:
        image = uniform_filter(image * np.array([0.93, 0.96, 1.02]), size=(3, 3, 1), mode="reflect")
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return RenderedView(image, labels, float(height), scene.class_id, role)


def target_pixel_width(view: RenderedView) -> int:
    """Widest run of target pixels along a row of the label map."""
    cols = np.any(view.label_map == TARGET_ID, axis=0)
    return int(cols.sum())


# -- handcrafted features ------------------------------------------------------

def _cell_sum(x: np.ndarray) -> np.ndarray:
    # x: (grid, ch, grid, cw, ...) -> (grid, grid, ...)
    return x.sum(axis=3, dtype=np.float64).sum(axis=1)


def cell_statistics(img, grid: int) -> np.ndarray:
    """Per-cell statistics, shape ``(10, grid, grid)``.

    Channels: RGB means, RGB standard deviations, mean absolute horizontal
    and vertical luminance gradient, and a two-bin hue histogram (hue in
    [0, 180] degrees, i.e. green >= blue, versus the rest).  Gradients only
    difference pixels within a cell, so the statistics of a mirrored image
    are the mirrored statistics.
    """
    img = as_image(img)
    h, w, _ = img.shape
    if h % grid or w % grid:
        raise ValueError(f"grid {grid} does not divide image size {h}x{w}")
    ch, cw = h // grid, w // grid
    n = ch * cw
    cells = img.reshape(grid, ch, grid, cw, 3)
    mean = _cell_sum(cells) / n
    dev = cells - mean[:, None, :, None, :]
    var = _cell_sum(dev * dev) / n
    lum = cells.mean(axis=-1)
    gx = _cell_sum(np.abs(np.diff(lum, axis=3))) / max(ch * (cw - 1), 1)
    gy = _cell_sum(np.abs(np.diff(lum, axis=1))) / max((ch - 1) * cw, 1)
    warm = _cell_sum(cells[..., 1] >= cells[..., 2]) / n
    return np.concatenate([
        mean.transpose(2, 0, 1), np.sqrt(var).transpose(2, 0, 1),
        gx[None], gy[None], warm[None], (1.0 - warm)[None],
    ])


# Rough per-statistic scales bringing every statistic to order one.
_STAT_SCALE = np.array([1.0, 1.0, 1.0, 4.0, 4.0, 4.0, 8.0, 8.0, 0.5, 0.5])


def projection_matrix(channels: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng([seed, channels, 3])
    return rng.uniform(0.0, 1.0, (channels, N_STATS)) * _STAT_SCALE


def handcrafted_features(img, grid: int, channels: int, seed: int = 0) -> np.ndarray:
    """Stand-in backbone: ``(channels, grid, grid)`` float32 feature map."""
    stats = cell_statistics(img, grid)
    proj = projection_matrix(channels, seed)
    out = np.einsum("ck,kij->cij", proj, stats)
    return out.astype(np.float32)


# -- alignment metric -----------------------------------------------------------

def _ids_covering(labels: np.ndarray, tau: float) -> frozenset:
    ids, counts = np.unique(labels, return_counts=True)
    keep = counts >= tau * labels.size
    return frozenset(int(i) for i in ids[keep])


def partition_alignment_iou(plan_d, view_d: RenderedView, plan_s, view_s: RenderedView,
                            tau: float = 0.01) -> tuple[list[float], float]:
    """Jaccard similarity of the object ids seen by each drone/satellite part pair.

    Plans live in feature-map pixels and are scaled up to the label maps.
    Returns ``(per_part, mean)``.
    """
    if plan_d.n_parts != plan_s.n_parts:
        raise ValueError("plans have different part counts")
    scores = []
    for pd, ps in zip(plan_d.parts, plan_s.parts):
        sets = []
        for plan, region, view in ((plan_d, pd, view_d), (plan_s, ps, view_s)):
            res = view.label_map.shape[0]
            if view.label_map.shape[1] != res or res % plan.map_size:
                raise ValueError(f"label map {view.label_map.shape} incompatible with "
                                 f"map size {plan.map_size}")
            r = region.scaled(res // plan.map_size)
            patch = view.label_map[r.row:r.row + r.side, r.col:r.col + r.side]
            sets.append(_ids_covering(patch, tau))
        a, b = sets
        scores.append(len(a & b) / len(a | b))
    return scores, float(np.mean(scores))


# -- datasets ---------------------------------------------------------------

@dataclass
class ViewRecord:
    class_id: int
    role: str
    height_m: float
    split: str
    seed: int
    view: int = 0
    resolution: int = 512
    delta_p: int = 0
    base_height_m: float | None = None
    path: str | None = None
    label_path: str | None = None
    sha256: str | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class Manifest:
    records: list[ViewRecord] = field(default_factory=list)
    root: Path | None = None

    def select(self, **kw) -> list[ViewRecord]:
        return [r for r in self.records if all(getattr(r, k) == v for k, v in kw.items())]

    def class_ids(self, split: str | None = None) -> list[int]:
        recs = self.records if split is None else self.select(split=split)
        return sorted({r.class_id for r in recs})

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for r in self.records:
            h.update(r.to_json().encode())
            h.update(b"\n")
        return h.hexdigest()

    def write(self, path) -> None:
        Path(path).write_text("".join(r.to_json() + "\n" for r in self.records))

    @classmethod
    def read(cls, path) -> "Manifest":
        path = Path(path)
        records = [ViewRecord(**json.loads(line)) for line in path.read_text().splitlines() if line.strip()]
        return cls(records, path.parent)


def split_classes(seed: int, num_classes: int, test_fraction: float = 0.5) -> tuple[list[int], list[int]]:
    ids = np.arange(1, num_classes + 1)
    perm = np.random.default_rng([seed, num_classes, 5]).permutation(ids)
    n_test = max(1, int(round(num_classes * test_fraction)))
    n_test = min(n_test, num_classes - 1)
    return sorted(int(i) for i in perm[n_test:]), sorted(int(i) for i in perm[:n_test])


def make_dataset(seed: int, num_classes: int, drone_heights, sat_height: float,
                 resolution: int, test_fraction: float = 0.5) -> Manifest:
    """Manifest of one satellite view and one drone view per height, per class.

    Images are rendered lazily by :func:`load_view`; :func:`write_dataset`
    materialises them as PNG files.
    """
    if num_classes < 2:
        raise ValueError("need at least two classes")
    train, test = split_classes(seed, num_classes, test_fraction)
    split_of = {c: "train" for c in train} | {c: "test" for c in test}
    records = []
    for c in range(1, num_classes + 1):
        records.append(ViewRecord(c, "satellite", float(sat_height), split_of[c], seed,
                                  resolution=resolution))
        for i, h in enumerate(drone_heights):
            records.append(ViewRecord(c, "drone", float(h), split_of[c], seed, view=i + 1,
                                      resolution=resolution, base_height_m=float(h)))
    return Manifest(records)


def load_view(record: ViewRecord, root: Path | None = None) -> RenderedView:
    """Read a recorded view from disk, or render it from its scene seed."""
    if record.path is not None:
        base = Path(root) if root is not None else Path(".")
        image = load_image(base / record.path)
        labels = load_labels(base / record.label_path)
        return RenderedView(image, labels, record.height_m, record.class_id, record.role)
    from .augment import simulate_height, simulate_height_labels
    scene = make_scene(record.seed, record.class_id)
    base_h = record.base_height_m if record.base_height_m is not None else record.height_m
    view = render_view(scene, base_h, record.resolution, record.role, record.view)
    if record.delta_p:
        view = RenderedView(simulate_height(view.image, record.delta_p),
                            simulate_height_labels(view.label_map, record.delta_p),
                            record.height_m, view.class_id, view.role)
    return view


def write_dataset(manifest: Manifest, out_dir) -> Manifest:
    """Render every record to ``out_dir`` and write ``manifest.jsonl`` there."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    written = []
    for r in manifest.records:
        view = load_view(r, manifest.root)
        stem = f"c{r.class_id:04d}_{r.role}_v{r.view:02d}_dp{r.delta_p:+d}"
        img_rel = f"images/{stem}.png"
        lab_rel = f"labels/{stem}.png"
        save_image(out / img_rel, view.image)
        save_labels(out / lab_rel, view.label_map)
        digest = hashlib.sha256(to_uint8(view.image).tobytes()).hexdigest()
        written.append(replace(r, path=img_rel, label_path=lab_rel, sha256=digest))
    m = Manifest(written, out)
    m.write(out / "manifest.jsonl")
    return m
