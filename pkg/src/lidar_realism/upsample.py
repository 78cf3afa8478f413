"""Vertical range-image up-sampling.

Traditional baselines (nearest, bilinear), a residual/subpixel generator,
a strided convolutional discriminator, and their training loops. The
networks work on ``log1p(depth)`` and map back with ``expm1``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from .geom import ProjectionModel, RangeImage
from .nn import conv as C
from .nn import ops
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.optim import OptimizerState, adam_update

log = logging.getLogger(__name__)

MAX_LOG_DEPTH = math.log1p(500.0)


@dataclass(frozen=True)
class UpsampleConfig:
    f_up: int = 4
    residual_blocks: int = 4
    alpha: int = 1
    channels: int = 64
    disc_width: float = 1.0
    steps: int = 1000
    batch_size: int = 4
    seed: int = 0
    lr: float = 1e-3
    crop_width: int | None = None

    def __post_init__(self):
        if self.f_up < 1 or self.f_up & (self.f_up - 1):
            raise ValueError("f_up must be a power of two")
        if self.residual_blocks < 1:
            raise ValueError("need at least one residual block")
        if self.alpha not in (1, 2):
            raise ValueError("alpha must be 1 or 2")
        if self.crop_width is not None and self.crop_width < 1:
            raise ValueError("crop_width must be positive")

    @classmethod
    def desk(cls, **overrides) -> "UpsampleConfig":
        return cls(**{"residual_blocks": 4, "channels": 32, "disc_width": 0.25, **overrides})

    @property
    def stages(self) -> int:
        return int(round(math.log2(self.f_up)))

    def to_dict(self) -> dict:
        return asdict(self)

    def arch_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("f_up", "residual_blocks", "channels", "disc_width")}


# --- geometry of low/high resolution grids -------------------------------------------


def subsampled_model(model: ProjectionModel, f: int) -> ProjectionModel:
    """Grid whose row centers are rows 0, f, 2f, ... of ``model``."""
    if model.H % f:
        raise ValueError(f"H={model.H} not divisible by {f}")
    d = model.d_elevation
    top = model.elevation_max - 0.5 * d + 0.5 * f * d
    return ProjectionModel(model.H // f, model.W, top - model.H * d, top, model.invalid_depth)


def upsampled_model(model: ProjectionModel, f: int) -> ProjectionModel:
    """Inverse of :func:`subsampled_model`."""
    d = model.d_elevation / f
    top = model.elevation_max + 0.5 * d - 0.5 * f * d
    return ProjectionModel(model.H * f, model.W, top - model.H * f * d, top, model.invalid_depth)


def make_lr(hr: RangeImage, f_up: int) -> RangeImage:
    """Keep every ``f_up``-th row starting at row 0."""
    model = subsampled_model(hr.model, f_up)
    return RangeImage(hr.depth[::f_up], hr.valid[::f_up], model)


def upsample_nearest(image: RangeImage, f_up: int) -> RangeImage:
    if f_up < 1:
        raise ValueError("f_up must be >= 1")
    model = upsampled_model(image.model, f_up)
    return RangeImage(np.repeat(image.depth, f_up, axis=0), np.repeat(image.valid, f_up, axis=0), model)


def upsample_bilinear(image: RangeImage, f_up: int) -> RangeImage:
    """Vertical linear interpolation with half-pixel centers.

    Output row ``y`` samples source coordinate ``(y + 0.5) / f - 0.5``,
    clamped to the image. A cell is invalid if any source row it draws on
    with non-zero weight is invalid.
    """
    if f_up < 1:
        raise ValueError("f_up must be >= 1")
    H = image.model.H
    y = np.arange(H * f_up)
    s = np.clip((y + 0.5) / f_up - 0.5, 0, H - 1)
    i0 = np.floor(s).astype(int)
    i1 = np.minimum(i0 + 1, H - 1)
    w = (s - i0)[:, None]
    depth = (1 - w) * image.depth[i0] + w * image.depth[i1]
    valid = image.valid[i0] & (image.valid[i1] | (w == 0))
    return RangeImage(np.where(valid, depth, image.model.invalid_depth), valid, upsampled_model(image.model, f_up))


# --- losses -----------------------------------------------------------------------------


def sr_l_alpha_loss(pred, target, alpha, valid=None):
    """``mean_{gamma} |target - pred|^alpha / alpha`` over target-valid cells.

    ``pred``/``target`` are RangeImages or depth arrays (then ``valid`` is
    the target mask). Returns ``(loss, d_loss/d_pred)``.
    """
    if isinstance(target, RangeImage):
        valid = target.valid
        target = target.depth
    if isinstance(pred, RangeImage):
        pred = pred.depth
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError("prediction and target shapes differ")
    valid = np.asarray(valid, dtype=bool)
    n = int(np.count_nonzero(valid))
    if n == 0:
        raise ValueError("no measured cells in the target")
    e = np.where(valid, pred - target, 0)
    if alpha == 1:
        loss = np.abs(e).sum() / n
        grad = np.sign(e) / n
    elif alpha == 2:
        loss = 0.5 * (e * e).sum() / n
        grad = e / n
    else:
        raise ValueError("alpha must be 1 or 2")
    return float(loss), grad.astype(pred.dtype)


# --- generator ----------------------------------------------------------------------------


def generator_shapes(cfg: UpsampleConfig) -> dict:
    c = cfg.channels
    s = {"G.head.W": (9, 9, 1, c), "G.head.b": (c,), "G.head.a": (c,)}
    for i in range(cfg.residual_blocks):
        p = f"G.res{i}"
        s.update({f"{p}.c1.W": (3, 3, c, c), f"{p}.c1.b": (c,), f"{p}.bn1.g": (c,), f"{p}.bn1.b": (c,),
                  f"{p}.a": (c,), f"{p}.c2.W": (3, 3, c, c), f"{p}.c2.b": (c,), f"{p}.bn2.g": (c,),
                  f"{p}.bn2.b": (c,)})
    s.update({"G.post.W": (3, 3, c, c), "G.post.b": (c,), "G.post.bn.g": (c,), "G.post.bn.b": (c,)})
    cin = c
    for j in range(cfg.stages):
        s.update({f"G.up{j}.W": (3, 3, cin, 4 * c), f"G.up{j}.b": (4 * c,), f"G.up{j}.a": (2 * c,)})
        cin = 2 * c
    s.update({"G.tail.W": (9, 9, cin, 1), "G.tail.b": (1,)})
    return s


def _bn_names(shapes):
    return [k[: -len(".g")] for k in shapes if k.endswith(".g")]


TAIL_GAIN = 0.1  # small initial correction on top of the interpolated input


def init_generator(cfg: UpsampleConfig, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in generator_shapes(cfg).items():
        if name.endswith(".W"):
            fan_in = int(np.prod(shape[:-1]))
            scale = np.sqrt(2.0 / fan_in) * (TAIL_GAIN if name == "G.tail.W" else 1.0)
            params[name] = (rng.standard_normal(shape) * scale).astype(dtype)
        elif name.endswith(".a"):
            params[name] = np.full(shape, 0.2, dtype=dtype)
        elif name.endswith(".g"):
            params[name] = np.ones(shape, dtype=dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    return params


def init_bn_state(params: dict) -> dict:
    return {n: {"mean": np.zeros_like(params[n + ".g"]), "var": np.ones_like(params[n + ".g"])}
            for n in _bn_names(params)}


def _cbn(x, params, conv, bn, bn_state, train, stride=(1, 1)):
    y, c1 = C.conv2d_forward(x, params[conv + ".W"], params[conv + ".b"], stride)
    y, c2 = C.batchnorm_forward(y, params[bn + ".g"], params[bn + ".b"], bn_state.get(bn) if bn_state else None, train)
    return y, (c1, c2)


def _cbn_back(dy, cache, grads, conv, bn):
    c1, c2 = cache
    dy, grads[bn + ".g"], grads[bn + ".b"] = C.batchnorm_backward(dy, c2)
    dx, grads[conv + ".W"], grads[conv + ".b"] = C.conv2d_backward(dy, c1)
    return dx


def _row_interp(x, f):
    """Half-pixel linear interpolation along axis 1 of a (B, H, W, C) array."""
    H = x.shape[1]
    s = np.clip((np.arange(H * f) + 0.5) / f - 0.5, 0, H - 1)
    i0 = np.floor(s).astype(int)
    i1 = np.minimum(i0 + 1, H - 1)
    w = (s - i0).astype(x.dtype)[None, :, None, None]
    return (1 - w) * x[:, i0] + w * x[:, i1]


def generator_forward(params, cfg, x, bn_state=None, train=False):
    """x: (B, H, W, 1) log-depth -> (B, f_up*H, W, 1) log-depth.

    The network predicts a correction on top of the row-interpolated input,
    so an untrained generator already sits close to bilinear up-sampling.
    """
    caches = {}
    h, c = C.conv2d_forward(x, params["G.head.W"], params["G.head.b"])
    head, ca = ops.prelu_forward(h, params["G.head.a"])
    caches["head"] = (c, ca)
    r = head
    for i in range(cfg.residual_blocks):
        p = f"G.res{i}"
        y, c1 = _cbn(r, params, p + ".c1", p + ".bn1", bn_state, train)
        y, ca = ops.prelu_forward(y, params[p + ".a"])
        y, c2 = _cbn(y, params, p + ".c2", p + ".bn2", bn_state, train)
        caches[p] = (c1, ca, c2)
        r = r + y
    y, cp = _cbn(r, params, "G.post", "G.post.bn", bn_state, train)
    caches["post"] = cp
    u = head + y
    for j in range(cfg.stages):
        p = f"G.up{j}"
        y, cc = C.conv2d_forward(u, params[p + ".W"], params[p + ".b"])
        y = C.subpixel_shuffle(y, 2)
        u, ca = ops.prelu_forward(y, params[p + ".a"])
        caches[p] = (cc, ca)
    out, ct = C.conv2d_forward(u, params["G.tail.W"], params["G.tail.b"])
    caches["tail"] = ct
    return out + _row_interp(x, cfg.f_up), caches


def generator_backward(dout, caches, params, cfg):
    grads = {}
    du, grads["G.tail.W"], grads["G.tail.b"] = C.conv2d_backward(dout, caches["tail"])
    for j in reversed(range(cfg.stages)):
        p = f"G.up{j}"
        cc, ca = caches[p]
        dy, grads[p + ".a"] = ops.prelu_backward(du, ca)
        dy = C.subpixel_unshuffle(dy, 2)
        du, grads[p + ".W"], grads[p + ".b"] = C.conv2d_backward(dy, cc)
    dhead = du.copy()
    dr = _cbn_back(du, caches["post"], grads, "G.post", "G.post.bn")
    for i in reversed(range(cfg.residual_blocks)):
        p = f"G.res{i}"
        c1, ca, c2 = caches[p]
        dy = _cbn_back(dr, c2, grads, p + ".c2", p + ".bn2")
        dy, grads[p + ".a"] = ops.prelu_backward(dy, ca)
        dr = dr + _cbn_back(dy, c1, grads, p + ".c1", p + ".bn1")
    dh = dhead + dr
    c, ca = caches["head"]
    dh, grads["G.head.a"] = ops.prelu_backward(dh, ca)
    _, grads["G.head.W"], grads["G.head.b"] = C.conv2d_backward(dh, c, need_dx=False)
    return grads


def to_log(depth, valid, dtype=np.float32):
    return np.where(valid, np.log1p(np.maximum(depth, 0)), 0).astype(dtype)[..., None]


def sr_generator_forward(image_lr: RangeImage, params: dict, cfg: UpsampleConfig, bn_state=None) -> RangeImage:
    """Eval-mode up-sampling of one range image.

    The output validity mask is the nearest-up-sampled input mask.
    """
    dtype = params["G.head.W"].dtype
    x = to_log(image_lr.depth, image_lr.valid, dtype)[None]
    y, _ = generator_forward(params, cfg, x, bn_state, train=bn_state is None)
    depth = np.expm1(np.clip(y[0, ..., 0].astype(np.float64), 0, MAX_LOG_DEPTH))
    valid = np.repeat(image_lr.valid, cfg.f_up, axis=0) & (depth > 0)
    return RangeImage(np.where(valid, depth, image_lr.model.invalid_depth), valid,
                      upsampled_model(image_lr.model, cfg.f_up))


# --- discriminator ------------------------------------------------------------------------

DISC_LAYERS = [  # (kernel, stride, width)
    (3, (1, 1), 64),
    (5, (2, 4), 64),
    (3, (1, 1), 128),
    (3, (2, 2), 128),
    (3, (1, 1), 256),
    (3, (1, 2), 256),
    (3, (1, 1), 512),
    (3, (2, 2), 512),
]


def disc_out_shape(cfg: UpsampleConfig, H: int, W: int):
    h, w = H, W
    for _, (sh, sw), _ in DISC_LAYERS:
        h, w = math.ceil(h / sh), math.ceil(w / sw)
    return h, w, max(1, int(round(DISC_LAYERS[-1][2] * cfg.disc_width)))


def discriminator_shapes(cfg: UpsampleConfig, H: int, W: int) -> dict:
    s = {}
    cin = 1
    for i, (k, _, width) in enumerate(DISC_LAYERS):
        cout = max(1, int(round(width * cfg.disc_width)))
        s[f"D.c{i}.W"] = (k, k, cin, cout)
        s[f"D.c{i}.b"] = (cout,)
        if i > 0:
            s[f"D.c{i}.bn.g"] = (cout,)
            s[f"D.c{i}.bn.b"] = (cout,)
        cin = cout
    h, w, c = disc_out_shape(cfg, H, W)
    hidden = max(1, int(round(1024 * cfg.disc_width)))
    s.update({"D.fc1.W": (h * w * c, hidden), "D.fc1.b": (hidden,), "D.fc2.W": (hidden, 1), "D.fc2.b": (1,)})
    return s


def init_discriminator(cfg: UpsampleConfig, H: int, W: int, seed=0, dtype=np.float32):
    rng = np.random.default_rng([seed, 7])
    params = {}
    for name, shape in discriminator_shapes(cfg, H, W).items():
        if name.endswith(".W"):
            fan_in = int(np.prod(shape[:-1]))
            params[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
        elif name.endswith(".g"):
            params[name] = np.ones(shape, dtype=dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    return params


def discriminator_forward(params, x, bn_state=None, train=False, leak=0.2):
    """x: (B, H, W, 1) log-depth -> (B,) logits."""
    caches = []
    h = x
    for i, (_, stride, _) in enumerate(DISC_LAYERS):
        name = f"D.c{i}"
        if name + ".W" not in params:
            raise ValueError("parameter set is not a discriminator")
        if i == 0:
            h, cc = C.conv2d_forward(h, params[name + ".W"], params[name + ".b"], stride)
            cb = None
        else:
            h, (cc, cb) = _cbn(h, params, name, name + ".bn", bn_state, train, stride)
        h, ca = ops.leaky_relu_forward(h, leak)
        caches.append((cc, cb, ca))
    B = h.shape[0]
    flat_shape = h.shape
    flat = h.reshape(B, -1)
    if flat.shape[1] != params["D.fc1.W"].shape[0]:
        raise ValueError(f"flattened size {flat.shape[1]} does not match dense input {params['D.fc1.W'].shape[0]}")
    a, c1 = ops.dense_forward(flat, params["D.fc1.W"], params["D.fc1.b"])
    a2, ca1 = ops.leaky_relu_forward(a, leak)
    logit, c2 = ops.dense_forward(a2, params["D.fc2.W"], params["D.fc2.b"])
    return logit[:, 0], (caches, flat_shape, c1, ca1, c2, leak)


def discriminator_backward(dlogit, cache):
    caches, flat_shape, c1, ca1, c2, leak = cache
    grads = {}
    d, grads["D.fc2.W"], grads["D.fc2.b"] = ops.dense_backward(dlogit[:, None], c2)
    d = ops.leaky_relu_backward(d, ca1, leak)
    d, grads["D.fc1.W"], grads["D.fc1.b"] = ops.dense_backward(d, c1)
    d = d.reshape(flat_shape)
    for i in reversed(range(len(caches))):
        cc, cb, ca = caches[i]
        name = f"D.c{i}"
        d = ops.leaky_relu_backward(d, ca, leak)
        if cb is not None:
            d, grads[name + ".bn.g"], grads[name + ".bn.b"] = C.batchnorm_backward(d, cb)
        d, grads[name + ".W"], grads[name + ".b"] = C.conv2d_backward(d, cc)
    return d, grads


def sr_discriminator_forward(image_hr: RangeImage, params: dict, bn_state=None) -> float:
    dtype = params["D.c0.W"].dtype
    x = to_log(image_hr.depth, image_hr.valid, dtype)[None]
    logit, _ = discriminator_forward(params, x, bn_state, train=bn_state is None)
    return float(logit[0])


# --- training -------------------------------------------------------------------------------


@dataclass
class SRParams:
    generator: dict
    discriminator: dict | None
    gen_bn: dict
    disc_bn: dict | None
    config: UpsampleConfig
    history: list


def _pair_arrays(pairs, dtype=np.float32, crop=None, rng=None):
    x = np.stack([to_log(lr.depth, lr.valid, dtype) for lr, _ in pairs])
    t = np.stack([hr.depth for _, hr in pairs]).astype(dtype)
    m = np.stack([hr.valid for _, hr in pairs])
    W = x.shape[2]
    if crop is not None and crop < W:
        # azimuth wraps around, so crops may straddle the seam
        cols = (rng.integers(W, size=(len(pairs), 1)) + np.arange(crop)) % W
        take = np.arange(len(pairs))[:, None, None]
        x = x[take, np.arange(x.shape[1])[None, :, None], cols[:, None, :]]
        t = t[take, np.arange(t.shape[1])[None, :, None], cols[:, None, :]]
        m = m[take, np.arange(m.shape[1])[None, :, None], cols[:, None, :]]
    return x, t, m


def _generator_loss_grad(params, cfg, x, t, m, alpha, bn_state, train=True):
    y, caches = generator_forward(params, cfg, x, bn_state, train)
    yc = np.clip(y[..., 0], 0, MAX_LOG_DEPTH)
    pred = np.expm1(yc)
    loss, dpred = sr_l_alpha_loss(pred, t, alpha, m)
    inside = (y[..., 0] > 0) & (y[..., 0] < MAX_LOG_DEPTH)
    dy = (dpred * np.exp(yc) * inside)[..., None].astype(y.dtype)
    return loss, y, dy, caches


def train_upsampler(pairs, cfg: UpsampleConfig, mode: str = "l1", progress=None, log_every=50) -> SRParams:
    """Train on aligned (lr, hr) RangeImage pairs.

    ``l1``/``l2`` minimize the masked L-alpha loss with alpha 1/2. ``gan``
    alternates a discriminator step on the real/fake cross-entropy and a
    generator step on ``-log D(G(lr))``.
    """
    if mode not in ("l1", "l2", "gan"):
        raise ValueError(f"unknown mode {mode!r}")
    for lr, hr in pairs:
        if lr.shape[0] * cfg.f_up != hr.shape[0] or lr.shape[1] != hr.shape[1]:
            raise ValueError("lr/hr pair shapes do not match f_up")
    alpha = {"l1": 1, "l2": 2, "gan": cfg.alpha}[mode]
    gparams = init_generator(cfg, cfg.seed)
    gbn = init_bn_state(gparams)
    gopt = OptimizerState(base_lr=cfg.lr)
    H, W = pairs[0][1].shape
    if cfg.crop_width is not None:
        W = min(W, cfg.crop_width)
    dparams = dbn = dopt = None
    if mode == "gan":
        dparams = init_discriminator(cfg, H, W, cfg.seed)
        dbn = init_bn_state(dparams)
        dopt = OptimizerState(base_lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 11])
    history = []
    for step in range(1, cfg.steps + 1):
        idx = rng.integers(len(pairs), size=cfg.batch_size)
        x, t, m = _pair_arrays([pairs[i] for i in idx], crop=cfg.crop_width, rng=rng)
        row = {"step": step}
        try:
            if mode == "gan":
                y, _ = generator_forward(gparams, cfg, x, gbn, train=True)
                xr = to_log(t, m, x.dtype)
                lr_real, c_real = discriminator_forward(dparams, xr, dbn, train=True)
                lr_fake, c_fake = discriminator_forward(dparams, y, dbn, train=True)
                d_loss = float(np.mean(ops.softplus(-lr_real) + ops.softplus(lr_fake)))
                _, g_real = discriminator_backward((-ops.sigmoid(-lr_real) / len(idx)).astype(x.dtype), c_real)
                _, g_fake = discriminator_backward((ops.sigmoid(lr_fake) / len(idx)).astype(x.dtype), c_fake)
                adam_update(dparams, {k: g_real[k] + g_fake[k] for k in g_real}, dopt)
                y, caches = generator_forward(gparams, cfg, x, gbn, train=True)
                lf, c_f = discriminator_forward(dparams, y, dbn, train=True)
                g_loss = float(np.mean(ops.softplus(-lf)))
                dy, _ = discriminator_backward((-ops.sigmoid(-lf) / len(idx)).astype(x.dtype), c_f)
                adam_update(gparams, generator_backward(dy, caches, gparams, cfg), gopt)
                row.update(d_loss=d_loss, g_loss=g_loss)
                if not (np.isfinite(d_loss) and np.isfinite(g_loss)):
                    raise ops.NonFiniteError("non-finite adversarial loss")
            else:
                loss, _, dy, caches = _generator_loss_grad(gparams, cfg, x, t, m, alpha, gbn)
                if not np.isfinite(loss):
                    raise ops.NonFiniteError("non-finite reconstruction loss")
                adam_update(gparams, generator_backward(dy, caches, gparams, cfg), gopt)
                row.update(loss=loss)
        except ops.NonFiniteError as exc:
            raise ops.NonFiniteError(f"up-sampler training diverged at step {step}: {exc}") from exc
        if step % log_every == 0 or step == cfg.steps:
            history.append(row)
            log.info("upsampler %s step %d %s", mode, step, row)
            if progress:
                progress(row)
    return SRParams(gparams, dparams, gbn, dbn, cfg, history)


def _flatten_bn(bn, prefix):
    return {f"{prefix}{name}.{k}": v for name, st in (bn or {}).items() for k, v in st.items()}


def _unflatten_bn(params, prefix):
    out = {}
    for key, v in params.items():
        if key.startswith(prefix):
            name, stat = key[len(prefix) :].rsplit(".", 1)
            out.setdefault(name, {})[stat] = v
    return out


def save_upsampler(path, sr: SRParams) -> None:
    blocks = dict(sr.generator)
    blocks.update(_flatten_bn(sr.gen_bn, "stat."))
    if sr.discriminator is not None:
        blocks.update(sr.discriminator)
        blocks.update(_flatten_bn(sr.disc_bn, "dstat."))
    arch = {"kind": "upsampler", **sr.config.arch_dict(), "log_depth": True}
    save_checkpoint(path, blocks, arch, {"config": sr.config.to_dict(), "history": sr.history})


def load_upsampler(path) -> SRParams:
    blocks, arch, extra = load_checkpoint(path)
    if arch.get("kind") != "upsampler":
        raise ValueError(f"{path} is not an up-sampler checkpoint")
    cfg = UpsampleConfig(**extra["config"])
    gen = {k: v for k, v in blocks.items() if k.startswith("G.")}
    disc = {k: v for k, v in blocks.items() if k.startswith("D.")} or None
    return SRParams(gen, disc, _unflatten_bn(blocks, "stat."), _unflatten_bn(blocks, "dstat.") or None, cfg,
                    extra.get("history", []))
