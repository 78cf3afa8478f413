"""Synthetic scene generators and on-disk dataset registries.

Syn scenes are ray-traced primitive scenes (spheres and boxes on a ground
plane). Misc scenes are built directly as range images (depth ramps,
Gaussian depth noise, constant-depth patches). The Real category is filled
by a *pseudo-real* generator: a primitive scene with sensor-like nuisances
(missing returns, range-dependent noise, poles, stacked boxes, uneven
ground). It is a stand-in, not a model of any real sensor.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geom import PointCloud, ProjectionModel, RangeImage, backproject, read_kitti_bin, write_kitti_bin
from .metric import SceneSample

KINDS = ("GeoSet", "Misc1", "Misc2", "Misc3", "Misc4", "PseudoReal")
CATEGORY_OF_KIND = {
    "GeoSet": "Syn",
    "Misc1": "Misc",
    "Misc2": "Misc",
    "Misc3": "Misc",
    "Misc4": "Misc",
    "PseudoReal": "Real",
}

GEOSET_DEFAULTS = {
    "sensor_height": 1.73,
    "max_range": 80.0,
    "n_spheres": (5, 15),
    "n_boxes": (5, 15),
    "sphere_radius": (0.5, 2.5),
    "box_size": (0.5, 4.0),
    "box_height": (0.5, 3.0),
    "place_distance": (4.0, 40.0),
    # per-scene radial noise sigma drawn from this range (0, 0) = clean
    "augment_sigma": (0.0, 0.0),
}

PSEUDOREAL_DEFAULTS = {
    **GEOSET_DEFAULTS,
    "dropout": 0.05,
    "noise_base": 0.02,
    "noise_per_meter": 0.001,
    "n_cylinders": (4, 12),
    "cylinder_radius": (0.1, 0.5),
    "cylinder_height": (2.0, 6.0),
    "n_composites": (2, 6),
    "undulation_amplitude": 0.15,
    "undulation_wavelength": (15.0, 40.0),
    "enrich": True,
}

MISC_DEFAULTS = {
    "ramp": (2.0, 80.0),
    # Misc1/2/4: per-scene radial noise sigma, kept above the pseudo-real noise levels
    "noise_sigma": (0.3, 2.0),
    # Misc3
    "mean_depth": (5.0, 40.0),
    "sigma": (0.3, 5.0),
    # Misc4
    "n_patches": (5, 30),
    "patch_rows": (2, 16),
    "patch_cols": (4, 64),
    "patch_depth": (3.0, 60.0),
    "min_depth": 0.5,
}

DEFAULTS = {
    "GeoSet": GEOSET_DEFAULTS,
    "PseudoReal": PSEUDOREAL_DEFAULTS,
    "Misc1": MISC_DEFAULTS,
    "Misc2": MISC_DEFAULTS,
    "Misc3": MISC_DEFAULTS,
    "Misc4": {**MISC_DEFAULTS, "base": dict(GEOSET_DEFAULTS)},
}


@dataclass(frozen=True)
class GeneratorConfig:
    kind: str
    seed: int = 0
    projection: ProjectionModel = field(default_factory=ProjectionModel)
    params: dict = field(default_factory=dict)
    dataset_id: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown generator kind {self.kind!r}")
        unknown = set(self.params) - set(DEFAULTS[self.kind])
        if unknown:
            raise ValueError(f"unknown parameters for {self.kind}: {sorted(unknown)}")
        merged = {**DEFAULTS[self.kind], **self.params}
        for key, val in merged.items():
            if ("sigma" in key or "noise" in key) and np.any(np.asarray(val, dtype=float) < 0):
                raise ValueError(f"{key} must be non-negative")
            if key.startswith("n_") and np.any(np.asarray(val) < 0):
                raise ValueError(f"{key} must be non-negative")

    @property
    def p(self) -> dict:
        return {**DEFAULTS[self.kind], **self.params}

    def with_seed(self, seed: int) -> "GeneratorConfig":
        return GeneratorConfig(self.kind, seed, self.projection, dict(self.params), self.dataset_id)


# --- scene description and ray tracing ------------------------------------------------


@dataclass
class Scene:
    sensor_height: float
    spheres: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))  # cx, cy, cz, r
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 6)))  # min xyz, max xyz
    cylinders: np.ndarray = field(default_factory=lambda: np.zeros((0, 5)))  # cx, cy, r, zmin, zmax
    undulation: tuple | None = None  # amplitude, kx, ky, phase_x, phase_y


def _int_range(rng, lo_hi):
    lo, hi = lo_hi
    return int(rng.integers(lo, hi + 1))


def _uniform(rng, lo_hi, size=None):
    lo, hi = lo_hi
    return rng.uniform(lo, hi, size)


def _place(rng, n, dist_range):
    d = _uniform(rng, dist_range, n)
    az = rng.uniform(-math.pi, math.pi, n)
    return d * np.cos(az), d * np.sin(az)


def sample_primitives(rng, p) -> Scene:
    ground = -p["sensor_height"]
    ns = _int_range(rng, p["n_spheres"])
    nb = _int_range(rng, p["n_boxes"])
    sx, sy = _place(rng, ns, p["place_distance"])
    sr = _uniform(rng, p["sphere_radius"], ns)
    spheres = np.stack([sx, sy, ground + sr, sr], axis=1) if ns else np.zeros((0, 4))
    bx, by = _place(rng, nb, p["place_distance"])
    half = 0.5 * _uniform(rng, p["box_size"], (nb, 2))
    bh = _uniform(rng, p["box_height"], nb)
    boxes = (
        np.stack([bx - half[:, 0], by - half[:, 1], np.full(nb, ground), bx + half[:, 0], by + half[:, 1], ground + bh], axis=1)
        if nb
        else np.zeros((0, 6))
    )
    return Scene(p["sensor_height"], spheres, boxes)


def _ray_spheres(d, spheres):
    t_best = np.full(d.shape[0], np.inf)
    for cx, cy, cz, r in spheres:
        c = np.array([cx, cy, cz])
        b = d @ c
        disc = b * b - (c @ c - r * r)
        hit = disc >= 0
        t = b - np.sqrt(np.where(hit, disc, 0.0))
        t = np.where(hit & (t > 0), t, np.inf)
        np.minimum(t_best, t, out=t_best)
    return t_best


def _ray_boxes(d, boxes):
    t_best = np.full(d.shape[0], np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        for box in boxes:
            t1 = box[:3] * inv
            t2 = box[3:] * inv
            tmin = np.nanmax(np.minimum(t1, t2), axis=1)
            tmax = np.nanmin(np.maximum(t1, t2), axis=1)
            hit = (tmax >= tmin) & (tmin > 0)
            np.minimum(t_best, np.where(hit, tmin, np.inf), out=t_best)
    return t_best


def _ray_cylinders(d, cylinders):
    t_best = np.full(d.shape[0], np.inf)
    dxy = d[:, :2]
    a = np.sum(dxy * dxy, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        for cx, cy, r, zmin, zmax in cylinders:
            c = np.array([cx, cy])
            b = dxy @ c
            disc = b * b - a * (c @ c - r * r)
            ok = (disc >= 0) & (a > 0)
            t = (b - np.sqrt(np.where(ok, disc, 0.0))) / np.where(a > 0, a, 1.0)
            z = t * d[:, 2]
            side = ok & (t > 0) & (z >= zmin) & (z <= zmax)
            t_side = np.where(side, t, np.inf)
            t_top = zmax / d[:, 2]
            p_top = dxy * t_top[:, None] - c
            top = (t_top > 0) & (np.sum(p_top * p_top, axis=1) <= r * r)
            t_cap = np.where(top, t_top, np.inf)
            np.minimum(t_best, np.minimum(t_side, t_cap), out=t_best)
    return t_best


def _ground_height(x, y, scene):
    h = -scene.sensor_height
    if scene.undulation is None:
        return h
    amp, kx, ky, px, py = scene.undulation
    return h + amp * np.sin(kx * x + px) * np.sin(ky * y + py)


def _ray_ground(d, scene, max_range, step=0.25):
    if scene.undulation is None:
        with np.errstate(divide="ignore"):
            t = -scene.sensor_height / d[:, 2]
        return np.where((d[:, 2] < 0) & (t > 0), t, np.inf)
    # march to the first sign change of (ray height - ground height), then bisect
    def f(t):
        p = d * t[:, None]
        return p[:, 2] - _ground_height(p[:, 0], p[:, 1], scene)

    n = d.shape[0]
    t_lo = np.zeros(n)
    t_hit = np.full(n, np.inf)
    found = np.zeros(n, dtype=bool)
    prev = f(t_lo)
    t = 0.0
    while t < max_range and not found.all():
        t += step
        cur = f(np.full(n, t))
        cross = ~found & (prev > 0) & (cur <= 0)
        t_lo[cross] = t - step
        t_hit[cross] = t
        found |= cross
        prev = cur
    lo, hi = t_lo[found], t_hit[found]
    dd = d[found]
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        p = dd * mid[:, None]
        above = p[:, 2] - _ground_height(p[:, 0], p[:, 1], scene) > 0
        lo = np.where(above, mid, lo)
        hi = np.where(above, hi, mid)
    t_hit[found] = 0.5 * (lo + hi)
    return t_hit


def trace(scene: Scene, model: ProjectionModel, max_range: float) -> RangeImage:
    """Nearest hit along every cell-center ray; misses and far hits are invalid."""
    d = model.ray_directions().reshape(-1, 3)
    t = _ray_ground(d, scene, max_range)
    np.minimum(t, _ray_spheres(d, scene.spheres), out=t)
    np.minimum(t, _ray_boxes(d, scene.boxes), out=t)
    np.minimum(t, _ray_cylinders(d, scene.cylinders), out=t)
    valid = np.isfinite(t) & (t <= max_range)
    depth = np.where(valid, t, model.invalid_depth).reshape(model.H, model.W)
    return RangeImage(depth, valid.reshape(model.H, model.W), model)


# --- generators ---------------------------------------------------------------------


def _rng(seed, stream):
    return np.random.default_rng([int(seed), stream])


def radial_noise(image: RangeImage, sigma, rng) -> RangeImage:
    """Add zero-mean Gaussian noise to the valid ranges; ``sigma`` may be per cell."""
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), image.shape)
    noise = rng.standard_normal(image.shape) * sigma
    depth = np.where(image.valid, np.maximum(image.depth + noise, 1e-3), image.depth)
    return RangeImage(depth, image.valid, image.model)


def geoset_image(config: GeneratorConfig) -> RangeImage:
    p = config.p
    scene = sample_primitives(_rng(config.seed, 0), p)
    return trace(scene, config.projection, p["max_range"])


def gen_geoset(config: GeneratorConfig) -> SceneSample:
    """Ray-traced spheres and boxes on a flat ground plane (category Syn)."""
    if config.kind != "GeoSet":
        raise ValueError("gen_geoset needs a GeoSet config")
    cloud = backproject(geoset_image(config))
    sig = config.p["augment_sigma"]
    if sig[1] > 0:
        cloud = augment_syn(cloud, sig, _rng(config.seed, 3))
    return SceneSample(cloud, "Syn", config.dataset_id)


def augment_syn(cloud: PointCloud, sigma_range, seed) -> PointCloud:
    """Radial Gaussian jitter with a per-scene sigma drawn from ``sigma_range``."""
    lo, hi = sigma_range
    if lo < 0 or hi < lo:
        raise ValueError("sigma range must satisfy 0 <= lo <= hi")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    sigma = rng.uniform(lo, hi) if hi > lo else lo
    if sigma == 0 or len(cloud) == 0:
        return cloud
    pts = cloud.points
    r = np.linalg.norm(pts, axis=1)
    new_r = np.maximum(r + rng.standard_normal(r.shape) * sigma, 1e-3)
    return PointCloud(pts * (new_r / r)[:, None])


def add_radial_noise(cloud: PointCloud, sigma: float, seed) -> PointCloud:
    """Fixed-sigma radial corruption of every point."""
    return augment_syn(cloud, (sigma, sigma), seed)


def pseudoreal_image(config: GeneratorConfig) -> RangeImage:
    p = config.p
    scene = sample_primitives(_rng(config.seed, 0), p)
    if not p["enrich"]:
        return trace(scene, config.projection, p["max_range"])
    rng = _rng(config.seed, 1)
    ground = -p["sensor_height"]
    nc = _int_range(rng, p["n_cylinders"])
    cx, cy = _place(rng, nc, p["place_distance"])
    cr = _uniform(rng, p["cylinder_radius"], nc)
    ch = _uniform(rng, p["cylinder_height"], nc)
    cyl = np.stack([cx, cy, cr, np.full(nc, ground - 1.0), ground + ch], axis=1) if nc else np.zeros((0, 5))
    comps = []
    for _ in range(_int_range(rng, p["n_composites"])):
        x, y = _place(rng, 1, p["place_distance"])
        base = 0.5 * _uniform(rng, (2.0, 6.0), 2)
        z0 = ground
        for level in range(int(rng.integers(2, 4))):
            shrink = 1.0 - 0.25 * level
            h = rng.uniform(1.0, 3.0)
            comps.append([x[0] - base[0] * shrink, y[0] - base[1] * shrink, z0,
                          x[0] + base[0] * shrink, y[0] + base[1] * shrink, z0 + h])
            z0 += h
    boxes = np.concatenate([scene.boxes, np.array(comps).reshape(-1, 6)])
    amp = p["undulation_amplitude"]
    und = None
    if amp > 0:
        lam = _uniform(rng, p["undulation_wavelength"], 2)
        und = (amp, 2 * math.pi / lam[0], 2 * math.pi / lam[1], *rng.uniform(0, 2 * math.pi, 2))
    full = Scene(scene.sensor_height, scene.spheres, boxes, cyl, und)
    image = trace(full, config.projection, p["max_range"])
    sigma = p["noise_base"] + p["noise_per_meter"] * image.depth
    image = radial_noise(image, sigma, rng)
    keep = rng.random(image.shape) >= p["dropout"]
    return RangeImage(image.depth, image.valid & keep, image.model)


def gen_pseudoreal(config: GeneratorConfig) -> SceneSample:
    """Primitive scene with sensor-like nuisances (category Real)."""
    if config.kind != "PseudoReal":
        raise ValueError("gen_pseudoreal needs a PseudoReal config")
    return SceneSample(backproject(pseudoreal_image(config)), "Real", config.dataset_id)


def misc_image(config: GeneratorConfig, return_patches=False):
    """Range image for Misc1-4; all cells valid except Misc4's untouched sky."""
    p = config.p
    model = config.projection
    H, W = model.H, model.W
    rng = _rng(config.seed, 2)
    labels = None
    if config.kind == "Misc1":
        depth = np.repeat(np.linspace(*p["ramp"], H)[:, None], W, axis=1)
        valid = np.ones((H, W), dtype=bool)
    elif config.kind == "Misc2":
        depth = np.repeat(np.linspace(*p["ramp"], W)[None, :], H, axis=0)
        valid = np.ones((H, W), dtype=bool)
    elif config.kind == "Misc3":
        mean = _uniform(rng, p["mean_depth"])
        sigma = _uniform(rng, p["sigma"])
        depth = np.maximum(mean + sigma * rng.standard_normal((H, W)), p["min_depth"])
        valid = np.ones((H, W), dtype=bool)
    elif config.kind == "Misc4":
        base_cfg = GeneratorConfig("GeoSet", config.seed, model, p["base"])
        base = geoset_image(base_cfg)
        depth = np.array(base.depth)
        valid = np.array(base.valid)
        labels = np.full((H, W), -1)
        for k in range(_int_range(rng, p["n_patches"])):
            ph = min(_int_range(rng, p["patch_rows"]), H)
            pw = min(_int_range(rng, p["patch_cols"]), W)
            r0 = int(rng.integers(0, H - ph + 1))
            c0 = int(rng.integers(0, W))
            cols = (c0 + np.arange(pw)) % W
            depth[r0 : r0 + ph, cols] = _uniform(rng, p["patch_depth"])
            valid[r0 : r0 + ph, cols] = True
            labels[r0 : r0 + ph, cols] = k
    else:
        raise ValueError(f"{config.kind} is not a Misc kind")
    image = RangeImage(depth, valid, model)
    if config.kind != "Misc3":
        sigma = _uniform(rng, p["noise_sigma"])
        if sigma > 0:
            image = radial_noise(image, sigma, rng)
    return (image, labels) if return_patches else image


def gen_misc(kind: int, config: GeneratorConfig) -> SceneSample:
    name = f"Misc{int(kind)}"
    if config.kind != name:
        config = GeneratorConfig(name, config.seed, config.projection, dict(config.params), config.dataset_id)
    return SceneSample(backproject(misc_image(config)), "Misc", config.dataset_id)


def generate(config: GeneratorConfig) -> SceneSample:
    if config.kind == "GeoSet":
        return gen_geoset(config)
    if config.kind == "PseudoReal":
        return gen_pseudoreal(config)
    return gen_misc(int(config.kind[-1]), config)


# --- registries ---------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetEntry:
    name: str
    category: str
    dataset_id: int
    kind: str
    params: dict = field(default_factory=dict)
    train: bool = True  # False: held out, evaluation split only

    def __post_init__(self):
        if CATEGORY_OF_KIND[self.kind] != self.category:
            raise ValueError(f"{self.kind} scenes belong to {CATEGORY_OF_KIND[self.kind]}, not {self.category}")


SYN_AUGMENT = (0.0, 0.02)

# Parameter regimes of the stand-in datasets.
REAL_A = {"dropout": 0.10, "noise_base": 0.08, "noise_per_meter": 0.003, "undulation_amplitude": 0.25,
          "n_cylinders": (8, 16)}
REAL_B = {"dropout": 0.03, "noise_base": 0.10, "noise_per_meter": 0.004, "undulation_amplitude": 0.3,
          "n_cylinders": (0, 4)}
REAL_HELDOUT = {"dropout": 0.06, "noise_base": 0.09, "noise_per_meter": 0.0035, "undulation_amplitude": 0.25,
                "n_cylinders": (4, 10)}
GEOSET_A = {"augment_sigma": SYN_AUGMENT}
GEOSET_B = {"augment_sigma": SYN_AUGMENT, "n_spheres": (0, 4), "n_boxes": (15, 30), "box_size": (1.0, 6.0),
            "sensor_height": 2.0}


def default_registry() -> list[DatasetEntry]:
    return [
        DatasetEntry("pseudoreal_a", "Real", 0, "PseudoReal", REAL_A),
        DatasetEntry("pseudoreal_b", "Real", 1, "PseudoReal", REAL_B),
        DatasetEntry("pseudoreal_heldout", "Real", 2, "PseudoReal", REAL_HELDOUT, train=False),
        DatasetEntry("geoset_a", "Syn", 0, "GeoSet", GEOSET_A),
        DatasetEntry("geoset_b", "Syn", 1, "GeoSet", GEOSET_B),
        DatasetEntry("misc1", "Misc", 0, "Misc1"),
        DatasetEntry("misc2", "Misc", 1, "Misc2"),
        DatasetEntry("misc3", "Misc", 2, "Misc3"),
        DatasetEntry("misc4", "Misc", 3, "Misc4", train=False),
    ]


def registry_to_json(registry) -> list[dict]:
    return [
        {"name": e.name, "category": e.category, "dataset_id": e.dataset_id, "kind": e.kind,
         "params": {k: list(v) if isinstance(v, tuple) else v for k, v in e.params.items()}, "train": e.train}
        for e in registry
    ]


def registry_from_json(items) -> list[DatasetEntry]:
    out = []
    for d in items:
        params = {k: tuple(v) if isinstance(v, list) else v for k, v in d.get("params", {}).items()}
        out.append(DatasetEntry(d["name"], d["category"], int(d["dataset_id"]), d["kind"], params,
                                bool(d.get("train", True))))
    names = [e.name for e in out]
    if len(set(names)) != len(names):
        raise ValueError("dataset names must be unique")
    return out


SPLITS = ("train", "val", "test")


def sample_seed(seed: int, entry_index: int, split: str, i: int) -> int:
    ss = np.random.SeedSequence([int(seed), entry_index, SPLITS.index(split), i])
    return int(ss.generate_state(1)[0])


def materialize_registry(registry, counts: dict, seed: int, out_dir, projection: ProjectionModel | None = None,
                         progress=None) -> Path:
    """Generate every split of every dataset into ``out_dir``.

    ``counts`` maps split name to samples per dataset. Held-out datasets only
    get a test split. Returns the manifest path.
    """
    projection = projection or ProjectionModel()
    ids = [(e.category, e.dataset_id) for e in registry]
    if len(set(ids)) != len(ids) or len({e.name for e in registry}) != len(registry):
        raise ValueError("dataset ids and names must be unique within a category")
    if any(v < 1 for v in counts.values()):
        raise ValueError("counts must be >= 1")
    train_cats = {e.category for e in registry if e.train}
    if "train" in counts and train_cats != {"Real", "Syn", "Misc"}:
        raise ValueError("a training registry needs at least one dataset per category")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for ei, entry in enumerate(registry):
        for split in SPLITS:
            if split not in counts or (not entry.train and split != "test"):
                continue
            folder = out_dir / entry.name / split
            folder.mkdir(parents=True, exist_ok=True)
            for i in range(counts[split]):
                s = sample_seed(seed, ei, split, i)
                cfg = GeneratorConfig(entry.kind, s, projection, dict(entry.params), entry.dataset_id)
                sample = generate(cfg)
                rel = Path(entry.name) / split / f"{i:06d}.bin"
                write_kitti_bin(sample.cloud, out_dir / rel)
                records.append({"relative_path": rel.as_posix(), "category": entry.category,
                                "dataset_id": entry.dataset_id, "split": split, "seed": s, "dataset": entry.name})
                if progress:
                    progress(len(records))
    manifest = out_dir / "manifest.jsonl"
    tmp = manifest.with_name(manifest.name + ".tmp")
    tmp.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
    tmp.replace(manifest)
    (out_dir / "registry.json").write_text(json.dumps(
        {"seed": seed, "counts": counts, "projection": projection.to_dict(), "datasets": registry_to_json(registry)},
        indent=2, sort_keys=True))
    return manifest


def read_manifest(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_split(manifest_path, split: str, datasets=None) -> list[SceneSample]:
    """Load the samples of one split, optionally restricted to dataset names."""
    root = Path(manifest_path).parent
    out = []
    for rec in read_manifest(manifest_path):
        if rec["split"] != split or (datasets is not None and rec["dataset"] not in datasets):
            continue
        cloud = read_kitti_bin(root / rec["relative_path"])
        out.append(SceneSample(cloud, rec["category"], int(rec["dataset_id"]), rec["relative_path"]))
    return out
