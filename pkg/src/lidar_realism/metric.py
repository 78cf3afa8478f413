"""Learned LiDAR realism metric.

A two-level set-abstraction feature extractor turns a point cloud into
per-query features ``z``. A classifier head maps each query's features to
Real/Syn/Misc probabilities. During training, one adversary head per
category tries to recover the source dataset within that category from
``z``. Its gradient reaches the extractor through a reversal node, which
pushes the extractor toward dataset-agnostic features.
"""

from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geom import PointCloud, normalize_neighborhood
from .nn import ops
from .nn.checkpoint import config_digest, load_checkpoint, save_checkpoint
from .nn.optim import OptimizerState, adam_update
from .spatial import farthest_point_sample, group, knn

log = logging.getLogger(__name__)

CATEGORIES = ("Real", "Syn", "Misc")
CATEGORY_INDEX = {c: i for i, c in enumerate(CATEGORIES)}
# RGB used for colored exports, one per category
CATEGORY_COLORS = np.array([[0, 158, 115], [0, 114, 178], [213, 94, 0]], dtype=np.float64)


@dataclass(frozen=True)
class MetricArchConfig:
    q1: int = 2048
    k1: int = 20
    q2: int = 256
    k2: int = 10
    mlp1: tuple = (64, 64, 128)
    mlp2: tuple = (128, 128, 256)
    head_hidden: int = 128
    dropout: float = 0.5
    leak: float = 0.2
    n_categories: int = 3
    adversary_units: tuple = (2, 2, 3)

    def __post_init__(self):
        object.__setattr__(self, "mlp1", tuple(int(v) for v in self.mlp1))
        object.__setattr__(self, "mlp2", tuple(int(v) for v in self.mlp2))
        object.__setattr__(self, "adversary_units", tuple(int(v) for v in self.adversary_units))
        if self.q2 > self.q1:
            raise ValueError("q2 must not exceed q1")
        if min(self.mlp1 + self.mlp2 + (self.head_hidden, self.q1, self.q2, self.k1, self.k2)) < 1:
            raise ValueError("counts and widths must be positive")
        if self.n_categories != len(CATEGORIES) or len(self.adversary_units) != len(CATEGORIES):
            raise ValueError("the metric has exactly three categories")

    @classmethod
    def desk(cls, **overrides) -> "MetricArchConfig":
        """Reduced sampling preset with the full layer widths."""
        return cls(**{"q1": 256, "k1": 16, "q2": 64, "k2": 8, **overrides})

    @property
    def feature_width(self) -> int:
        return self.mlp2[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricArchConfig":
        return cls(**d)

    def digest(self) -> str:
        return config_digest(self.to_dict()).hex()


@dataclass(frozen=True)
class SceneSample:
    cloud: PointCloud
    category: str
    dataset_id: int = 0
    name: str = ""

    def __post_init__(self):
        if self.category not in CATEGORY_INDEX:
            raise ValueError(f"unknown category {self.category!r}")
        if self.dataset_id < 0:
            raise ValueError("dataset_id must be >= 0")


@dataclass
class FeatureMatrix:
    z: np.ndarray
    query_points: np.ndarray


@dataclass
class MetricScores:
    per_query: np.ndarray
    scene: np.ndarray
    query_points: np.ndarray

    @property
    def argmax(self) -> str:
        return CATEGORIES[int(np.argmax(self.scene))]


# --- parameters ---------------------------------------------------------------


def _head_shapes(prefix, width, hidden, units):
    return {
        f"{prefix}.h.W": (width, hidden),
        f"{prefix}.h.b": (hidden,),
        f"{prefix}.o.W": (hidden, units),
        f"{prefix}.o.b": (units,),
    }


def param_shapes(config: MetricArchConfig) -> dict:
    shapes = {}
    cin = 3
    for i, w in enumerate(config.mlp1):
        shapes[f"F.sa1.{i}.W"] = (cin, w)
        shapes[f"F.sa1.{i}.b"] = (w,)
        cin = w
    cin = 3 + config.mlp1[-1]
    for i, w in enumerate(config.mlp2):
        shapes[f"F.sa2.{i}.W"] = (cin, w)
        shapes[f"F.sa2.{i}.b"] = (w,)
        cin = w
    shapes.update(_head_shapes("C", config.feature_width, config.head_hidden, config.n_categories))
    for cat, units in zip(CATEGORIES, config.adversary_units):
        shapes.update(_head_shapes(f"A.{cat}", config.feature_width, config.head_hidden, units))
    return shapes


def init_params(config: MetricArchConfig, seed: int = 0, dtype=np.float32) -> dict:
    """He-initialized weights (leaky-ReLU gain), zero biases."""
    rng = np.random.default_rng(seed)
    gain = np.sqrt(2.0 / (1.0 + config.leak**2))
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".W"):
            params[name] = (rng.standard_normal(shape) * gain / np.sqrt(shape[0])).astype(dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    return params


def zero_params(config: MetricArchConfig, dtype=np.float32) -> dict:
    return {k: np.zeros(s, dtype=dtype) for k, s in param_shapes(config).items()}


def check_params(params: dict, config: MetricArchConfig) -> None:
    for name, shape in param_shapes(config).items():
        if name not in params:
            raise ValueError(f"missing parameter {name!r}")
        if tuple(params[name].shape) != shape:
            raise ValueError(f"parameter {name!r} has shape {params[name].shape}, expected {shape}")


# --- neighborhoods --------------------------------------------------------------


@dataclass
class Neighborhoods:
    """Coordinate-only part of the extractor; independent of the weights."""

    g1: np.ndarray  # (Q1, K1, 3) neighbors relative to their level-1 query
    idx2: np.ndarray  # (Q2, K2) indices into the level-1 queries
    g2: np.ndarray  # (Q2, K2, 3) level-1 queries relative to their level-2 query
    q1_points: np.ndarray
    q2_points: np.ndarray


def build_neighborhoods(cloud: PointCloud, config: MetricArchConfig) -> Neighborhoods:
    pts = cloud.points
    if pts.shape[0] < config.k1:
        raise ValueError(f"cloud has {pts.shape[0]} points, need at least K1={config.k1}")
    i1 = farthest_point_sample(pts, config.q1)
    q1 = pts[i1]
    nb1 = knn(pts, q1, config.k1)
    g1 = normalize_neighborhood(group(pts, nb1), q1)
    i2 = farthest_point_sample(q1, config.q2)
    q2 = q1[i2]
    nb2 = knn(q1, q2, config.k2)
    g2 = normalize_neighborhood(group(q1, nb2), q2)
    return Neighborhoods(g1, nb2, g2, q1, q2)


# --- forward / backward -------------------------------------------------------


def _mlp(params, prefix, n):
    return [(params[f"{prefix}.{i}.W"], params[f"{prefix}.{i}.b"]) for i in range(n)]


def extractor_forward(params, config, hoods):
    """Batched extractor over a list of neighborhoods; z is (B, Q2, U_F)."""
    dtype = params["F.sa1.0.W"].dtype
    g1 = np.stack([h.g1 for h in hoods]).astype(dtype)
    h1, c_mlp1 = ops.shared_mlp_forward(g1, _mlp(params, "F.sa1", len(config.mlp1)), config.leak)
    f1, c_max1 = ops.reduce_max_forward(h1)  # (B, Q1, C1)
    B, Q1, C1 = f1.shape
    idx2 = np.stack([h.idx2 for h in hoods])
    flat = (idx2 + (np.arange(B) * Q1)[:, None, None]).reshape(-1)
    grouped = f1.reshape(B * Q1, C1)[flat].reshape(idx2.shape + (C1,))
    g2 = np.stack([h.g2 for h in hoods]).astype(dtype)
    x2 = np.concatenate([g2, grouped], axis=-1)
    h2, c_mlp2 = ops.shared_mlp_forward(x2, _mlp(params, "F.sa2", len(config.mlp2)), config.leak)
    z, c_max2 = ops.reduce_max_forward(h2)
    return z, (c_mlp1, c_max1, flat, (B, Q1, C1), c_mlp2, c_max2)


def extractor_backward(dz, cache, config):
    c_mlp1, c_max1, flat, (B, Q1, C1), c_mlp2, c_max2 = cache
    grads = {}
    dh2 = ops.reduce_max_backward(dz, c_max2)
    dx2, g_mlp2 = ops.shared_mlp_backward(dh2, c_mlp2, config.leak)
    for i, (dW, db) in enumerate(g_mlp2):
        grads[f"F.sa2.{i}.W"], grads[f"F.sa2.{i}.b"] = dW, db
    dgrouped = dx2[..., 3:].reshape(-1, C1)
    df1 = np.zeros((B * Q1, C1), dtype=dz.dtype)
    np.add.at(df1, flat, dgrouped)
    dh1 = ops.reduce_max_backward(df1.reshape(B, Q1, C1), c_max1)
    _, g_mlp1 = ops.shared_mlp_backward(dh1, c_mlp1, config.leak)
    for i, (dW, db) in enumerate(g_mlp1):
        grads[f"F.sa1.{i}.W"], grads[f"F.sa1.{i}.b"] = dW, db
    return grads


def head_forward(params, prefix, z, config, train=False, rng=None):
    a, c1 = ops.dense_forward(z, params[f"{prefix}.h.W"], params[f"{prefix}.h.b"])
    h, c2 = ops.leaky_relu_forward(a, config.leak)
    d, c3 = ops.dropout_forward(h, config.dropout, train, rng)
    logits, c4 = ops.dense_forward(d, params[f"{prefix}.o.W"], params[f"{prefix}.o.b"])
    return logits, (c1, c2, c3, c4)


def head_backward(dlogits, cache, prefix, config):
    c1, c2, c3, c4 = cache
    dd, dWo, dbo = ops.dense_backward(dlogits, c4)
    dh = ops.dropout_backward(dd, c3)
    da = ops.leaky_relu_backward(dh, c2, config.leak)
    dz, dWh, dbh = ops.dense_backward(da, c1)
    grads = {f"{prefix}.h.W": dWh, f"{prefix}.h.b": dbh, f"{prefix}.o.W": dWo, f"{prefix}.o.b": dbo}
    return dz, grads


# --- public single-scene surface ---------------------------------------------------


def extract_features(cloud: PointCloud, params: dict, config: MetricArchConfig, hoods=None) -> FeatureMatrix:
    hoods = hoods or build_neighborhoods(cloud, config)
    z, _ = extractor_forward(params, config, [hoods])
    return FeatureMatrix(z[0], hoods.q2_points)


def classify(features: FeatureMatrix, params: dict, config: MetricArchConfig, train=False, rng=None) -> MetricScores:
    logits, _ = head_forward(params, "C", features.z, config, train, rng)
    p = ops.softmax(logits.astype(np.float64))
    return MetricScores(p, p.mean(axis=0), features.query_points)


def adversary_predict(features: FeatureMatrix, params: dict, config: MetricArchConfig, category: str,
                      train=False, rng=None) -> np.ndarray:
    if category not in CATEGORY_INDEX:
        raise ValueError(f"unknown category {category!r}")
    logits, _ = head_forward(params, f"A.{category}", features.z, config, train, rng)
    return ops.softmax(logits.astype(np.float64))


def score_scene(cloud: PointCloud, params: dict, config: MetricArchConfig) -> MetricScores:
    """Eval-mode scores for one scene."""
    return classify(extract_features(cloud, params, config), params, config)


def score_many(hoods_list, params, config, batch=16) -> list[MetricScores]:
    out = []
    for start in range(0, len(hoods_list), batch):
        chunk = hoods_list[start : start + batch]
        z, _ = extractor_forward(params, config, chunk)
        logits, _ = head_forward(params, "C", z, config)
        p = ops.softmax(logits.astype(np.float64))
        out.extend(MetricScores(p[i], p[i].mean(axis=0), h.q2_points) for i, h in enumerate(chunk))
    return out


# --- loss ---------------------------------------------------------------------------


@dataclass
class LossResult:
    loss: float
    grads: dict
    parts: dict = field(default_factory=dict)


def metric_loss(samples, params, config, lam, train=False, rng=None, hoods=None) -> LossResult:
    """Classifier loss plus the summed per-category adversary losses.

    Each adversary sees ``z`` through a gradient-reversal node with factor
    ``lam``. Rows from other categories get weight 0 in an adversary's loss.
    """
    if hoods is None:
        hoods = [build_neighborhoods(s.cloud, config) for s in samples]
    z, cache = extractor_forward(params, config, hoods)
    B, Q2, U = z.shape
    zf = z.reshape(B * Q2, U)
    cats = np.repeat([CATEGORY_INDEX[s.category] for s in samples], Q2)
    dsets = np.repeat([s.dataset_id for s in samples], Q2)

    logits, c_head = head_forward(params, "C", zf, config, train, rng)
    loss_c, dlog = ops.softmax_cross_entropy(logits, cats)
    dz_c, grads = head_backward(dlog, c_head, "C", config)
    parts = {"C": float(loss_c)}
    total = float(loss_c)

    zr, lam_r = ops.grad_reverse_forward(zf, lam)
    dzr = np.zeros_like(zf)
    for ci, (cat, units) in enumerate(zip(CATEGORIES, config.adversary_units)):
        mask = cats == ci
        if np.any(dsets[mask] >= units):
            raise ValueError(f"dataset_id out of range for the {cat} adversary")
        targets = np.where(mask, dsets, 0)
        logits_a, c_a = head_forward(params, f"A.{cat}", zr, config, train, rng)
        loss_a, dlog_a = ops.softmax_cross_entropy(logits_a, targets, mask.astype(zf.dtype))
        dz_a, g_a = head_backward(dlog_a, c_a, f"A.{cat}", config)
        grads.update(g_a)
        dzr += dz_a
        parts[f"A.{cat}"] = float(loss_a)
        total += float(loss_a)
    if not np.isfinite(total):
        raise ops.NonFiniteError("non-finite metric loss")

    dz = dz_c + ops.grad_reverse_backward(dzr, lam_r)
    grads.update(extractor_backward(dz.reshape(B, Q2, U), cache, config))
    return LossResult(total, grads, parts)


# --- training -----------------------------------------------------------------------


@dataclass
class TrainSettings:
    steps: int = 2000
    batch_size: int = 12
    log_every: int = 100
    base_lr: float = 1e-3
    warmup_steps: int = 200
    decay_rate: float = 0.9
    decay_steps: int = 1000
    val_limit: int | None = None


@dataclass
class TrainResult:
    params: dict
    history: list
    meta: dict


def _accuracies(hoods, samples, params, config, batch=16):
    """Per-query accuracy of the classifier and each adversary (eval mode)."""
    hits = {"C": 0, **{c: 0 for c in CATEGORIES}}
    rows = {"C": 0, **{c: 0 for c in CATEGORIES}}
    scene_hits = 0
    for start in range(0, len(samples), batch):
        hs = hoods[start : start + batch]
        ss = samples[start : start + batch]
        z, _ = extractor_forward(params, config, hs)
        logits, _ = head_forward(params, "C", z, config)
        pred = logits.argmax(axis=-1)
        probs = ops.softmax(logits.astype(np.float64)).mean(axis=1)
        for i, s in enumerate(ss):
            ci = CATEGORY_INDEX[s.category]
            hits["C"] += int(np.count_nonzero(pred[i] == ci))
            rows["C"] += pred.shape[1]
            scene_hits += int(np.argmax(probs[i]) == ci)
        for cat in CATEGORIES:
            idx = [i for i, s in enumerate(ss) if s.category == cat]
            if not idx:
                continue
            la, _ = head_forward(params, f"A.{cat}", z[idx], config)
            pa = la.argmax(axis=-1)
            for j, i in enumerate(idx):
                hits[cat] += int(np.count_nonzero(pa[j] == ss[i].dataset_id))
                rows[cat] += pa.shape[1]
    out = {"classifier_acc": hits["C"] / max(rows["C"], 1), "scene_acc": scene_hits / max(len(samples), 1)}
    adv_rows = sum(rows[c] for c in CATEGORIES)
    for cat in CATEGORIES:
        out[f"adv_{cat.lower()}_acc"] = hits[cat] / rows[cat] if rows[cat] else float("nan")
    out["adv_weighted_acc"] = sum(hits[c] for c in CATEGORIES) / max(adv_rows, 1)
    return out


def evaluate_accuracy(samples, params, config, hoods=None) -> dict:
    """Eval-mode classifier/adversary accuracies, as logged during training."""
    if hoods is None:
        hoods = [build_neighborhoods(s.cloud, config) for s in samples]
    return _accuracies(hoods, samples, params, config)


def adversary_chance(samples, config) -> dict:
    counts = {c: sum(1 for s in samples if s.category == c) for c in CATEGORIES}
    total = sum(counts.values())
    out = {c: 1.0 / u for c, u in zip(CATEGORIES, config.adversary_units)}
    out["weighted"] = sum(counts[c] * out[c] for c in CATEGORIES) / max(total, 1)
    return out


def _stratified_batch(rng, by_cat, batch_size):
    # equal expected count per category; remainder slots go to random categories
    per = batch_size // len(CATEGORIES)
    cats = [c for c in CATEGORIES for _ in range(per)]
    cats += list(rng.choice(CATEGORIES, size=batch_size - len(cats)))
    return [int(by_cat[c][rng.integers(len(by_cat[c]))]) for c in cats]


def train_metric(train_set, val_set, config: MetricArchConfig, lam: float = 0.3, steps: int | None = None,
                 seed: int = 0, settings: TrainSettings | None = None, train_hoods=None, val_hoods=None,
                 progress=None) -> TrainResult:
    """Seeded Adam training of all heads and the extractor.

    ``train_hoods``/``val_hoods`` may carry precomputed neighborhoods aligned
    with the sample lists. The history holds eval-mode accuracies on
    ``val_set`` every ``log_every`` steps and after the last step.
    """
    settings = settings or TrainSettings()
    steps = settings.steps if steps is None else steps
    by_cat = {c: [i for i, s in enumerate(train_set) if s.category == c] for c in CATEGORIES}
    missing = [c for c, v in by_cat.items() if not v]
    if missing:
        raise ValueError(f"training set has no samples for {missing}")
    if train_hoods is None:
        train_hoods = [build_neighborhoods(s.cloud, config) for s in train_set]
    if val_hoods is None:
        val_hoods = [build_neighborhoods(s.cloud, config) for s in val_set]
    if settings.val_limit is not None:
        val_set, val_hoods = val_set[: settings.val_limit], val_hoods[: settings.val_limit]

    params = init_params(config, seed)
    opt = OptimizerState(base_lr=settings.base_lr, warmup_steps=settings.warmup_steps,
                         decay_rate=settings.decay_rate, decay_steps=settings.decay_steps)
    batch_rng = np.random.default_rng([seed, 1])
    drop_rng = np.random.default_rng([seed, 2])
    history = []
    for step in range(1, steps + 1):
        idx = _stratified_batch(batch_rng, by_cat, settings.batch_size)
        try:
            res = metric_loss([train_set[i] for i in idx], params, config, lam, train=True, rng=drop_rng,
                              hoods=[train_hoods[i] for i in idx])
            adam_update(params, res.grads, opt)
        except ops.NonFiniteError as exc:
            raise ops.NonFiniteError(f"training diverged at step {step}: {exc}") from exc
        if step % settings.log_every == 0 or step == steps:
            row = {"step": step, "loss": res.loss, **_accuracies(val_hoods, val_set, params, config)}
            history.append(row)
            log.info("step %d loss %.4f cls %.3f adv %.3f", step, res.loss, row["classifier_acc"],
                     row["adv_weighted_acc"])
            if progress:
                progress(row)
    meta = {"lambda": lam, "seed": seed, "steps": steps, "batch_size": settings.batch_size,
            "chance": adversary_chance(val_set, config), "arch_digest": config.digest()}
    return TrainResult(params, history, meta)


# --- persistence / exports ------------------------------------------------------------


def save_metric(path, params, config: MetricArchConfig, extra=None) -> None:
    save_checkpoint(path, params, config.to_dict(), {"kind": "metric", **(extra or {})})


def load_metric(path, expected: MetricArchConfig | None = None):
    params, cfg, extra = load_checkpoint(path, expected.to_dict() if expected else None)
    config = MetricArchConfig.from_dict(cfg)
    check_params(params, config)
    return params, config, extra


def params_digest(params: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name]).tobytes())
    return h.hexdigest()


HISTORY_COLUMNS = ["step", "classifier_acc", "adv_real_acc", "adv_syn_acc", "adv_misc_acc", "adv_weighted_acc",
                   "scene_acc", "loss"]


def write_history(path, history) -> None:
    _write_csv(path, HISTORY_COLUMNS, [[row[c] for c in HISTORY_COLUMNS] for row in history])


def read_history(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _write_csv(path, header, rows) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    tmp.replace(path)


SCORE_COLUMNS = ["scene_id", "S_real", "S_syn", "S_misc"]
QUERY_COLUMNS = ["scene_id", "qx", "qy", "qz", "p_real", "p_syn", "p_misc"]


def write_scores(path, scored: list[tuple[str, MetricScores]], per_query_path=None) -> None:
    _write_csv(path, SCORE_COLUMNS, [[sid, *s.scene] for sid, s in scored])
    if per_query_path is not None:
        rows = [[sid, *q, *p] for sid, s in scored for q, p in zip(s.query_points, s.per_query)]
        _write_csv(per_query_path, QUERY_COLUMNS, rows)


def read_scores(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (v if k == "scene_id" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


def score_colors(per_query: np.ndarray) -> np.ndarray:
    """Blend the category colors by each query's probabilities."""
    return per_query @ CATEGORY_COLORS


def export_features(samples, params, config, path, hoods=None) -> int:
    """Write one CSV row per query: category, dataset_id, z_0..z_{U-1}."""
    hoods = hoods or [build_neighborhoods(s.cloud, config) for s in samples]
    header = ["category", "dataset_id"] + [f"z{i}" for i in range(config.feature_width)]
    rows = []
    for start in range(0, len(samples), 16):
        z, _ = extractor_forward(params, config, hoods[start : start + 16])
        for s, zs in zip(samples[start : start + 16], z):
            rows.extend([s.category, s.dataset_id, *row] for row in zs)
    _write_csv(path, header, rows)
    return len(rows)


def read_features(path):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        rows = list(r)
    labels = [(row[0], int(row[1])) for row in rows]
    z = np.array([row[2:] for row in rows], dtype=np.float64)
    return labels, z
