"""Deep-supervised U-Net (2D or 3D) in numpy with exact backpropagation.

Encoder stages are two conv-instance-norm-leaky-ReLU blocks, the first of
which carries the stage stride. The decoder upsamples with a transposed
convolution whose kernel equals the stride, concatenates the skip connection,
and applies two more blocks. Segmentation heads (1x1 convolutions with bias)
sit on the finest decoder level and on each deep-supervision level.
"""

from __future__ import annotations

import copy
import itertools
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from .errors import DataError, NumericalError
from .volume import LabelVolume

NUM_CLASSES = 4
LEAKY_SLOPE = 0.01
DICE_SMOOTH = 1e-5


@dataclass(frozen=True)
class UNetConfig:
    dimensionality: int = 2
    base_features: int = 8
    stage_count: int = 3
    strides: tuple[tuple[int, ...], ...] | None = None
    kernels: tuple[tuple[int, ...], ...] | None = None
    patch_size: tuple[int, ...] = (32, 32)
    batch_size: int = 8
    deep_supervision_levels: int = 1
    num_classes: int = NUM_CLASSES
    in_channels: int = 4
    max_features: int = 320
    seed: int = 0

    def __post_init__(self):
        nd = self.dimensionality
        if nd not in (2, 3):
            raise DataError("dimensionality must be 2 or 3")
        if self.stage_count < 1:
            raise DataError("stage_count must be >= 1")
        strides = self.strides
        if strides is None:
            strides = ((1,) * nd,) + ((2,) * nd,) * (self.stage_count - 1)
        kernels = self.kernels if self.kernels is not None else ((3,) * nd,) * self.stage_count
        strides = tuple(tuple(int(v) for v in s) for s in strides)
        kernels = tuple(tuple(int(v) for v in k) for k in kernels)
        if len(strides) != self.stage_count or len(kernels) != self.stage_count:
            raise DataError("need one stride and one kernel entry per stage")
        if any(len(s) != nd for s in strides) or any(len(k) != nd for k in kernels):
            raise DataError(f"stride/kernel entries must have {nd} components")
        if any(k % 2 == 0 for kern in kernels for k in kern):
            raise DataError("convolution kernels must be odd")
        patch = tuple(int(p) for p in self.patch_size)
        if len(patch) != nd:
            raise DataError(f"patch_size must have {nd} components")
        total = np.prod(np.array(strides), axis=0)
        if any(p % t for p, t in zip(patch, total)):
            raise DataError(f"patch {patch} is not divisible by the stride product {tuple(total)}")
        if not 0 <= self.deep_supervision_levels <= self.stage_count - 1:
            raise DataError("deep_supervision_levels must lie in [0, stage_count - 1]")
        object.__setattr__(self, "strides", strides)
        object.__setattr__(self, "kernels", kernels)
        object.__setattr__(self, "patch_size", patch)

    @property
    def features(self) -> tuple[int, ...]:
        return tuple(min(self.base_features * 2 ** s, self.max_features) for s in range(self.stage_count))

    def level_shape(self, level: int) -> tuple[int, ...]:
        total = np.prod(np.array(self.strides[:level + 1]), axis=0)
        return tuple(int(p // t) for p, t in zip(self.patch_size, total))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> UNetConfig:
        doc = dict(doc)
        for key in ("strides", "kernels"):
            if doc.get(key) is not None:
                doc[key] = tuple(tuple(v) for v in doc[key])
        doc["patch_size"] = tuple(doc["patch_size"])
        return cls(**doc)


PRESETS: dict[str, UNetConfig] = {
    "desk2d": UNetConfig(2, 8, 3, patch_size=(32, 32), batch_size=8, deep_supervision_levels=1),
    "desk3d": UNetConfig(3, 8, 3, patch_size=(32, 32, 32), batch_size=2, deep_supervision_levels=1),
    "full3d": UNetConfig(3, 32, 6, patch_size=(128, 128, 128), batch_size=2, deep_supervision_levels=4),
    "full2d": UNetConfig(2, 32, 6, patch_size=(192, 160), batch_size=105, deep_supervision_levels=4),
}


def preset(name: str, **overrides) -> UNetConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise DataError(f"unknown U-Net config id {name!r}; choose from {sorted(PRESETS)}") from None
    doc = base.to_dict()
    doc.update(overrides)
    return UNetConfig.from_dict(doc)


# ---------------------------------------------------------------------------
# Model state
# ---------------------------------------------------------------------------


@dataclass
class ModelState:
    config: UNetConfig
    params: dict[str, np.ndarray]
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    epoch: int = 0
    rng: np.random.Generator = field(default_factory=np.random.default_rng, repr=False)
    # JSON-serializable training bookkeeping carried through checkpoints
    meta: dict = field(default_factory=dict)

    def copy(self) -> ModelState:
        return ModelState(self.config, {k: p.copy() for k, p in self.params.items()},
                          {k: a.copy() for k, a in self.m.items()},
                          {k: a.copy() for k, a in self.v.items()},
                          self.step, self.epoch, copy.deepcopy(self.rng), copy.deepcopy(self.meta))

    def astype(self, dtype) -> ModelState:
        state = self.copy()
        for d in (state.params, state.m, state.v):
            for k in d:
                d[k] = d[k].astype(dtype)
        return state

    def reset_optimizer(self) -> None:
        self.m = {k: np.zeros_like(p) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p) for k, p in self.params.items()}
        self.step = 0

    @property
    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))


def build_model(config: UNetConfig) -> ModelState:
    """He-initialized weights drawn from ``config.seed``; norms start at identity."""
    rng = np.random.default_rng(config.seed)
    feats = config.features
    params: dict[str, np.ndarray] = {}

    def conv(name, cin, cout, kernel):
        fan_in = cin * int(np.prod(kernel))
        params[name] = ops.he_normal(rng, (cout, cin, *kernel), fan_in).astype(np.float32)

    def norm(name, c):
        params[name + ".g"] = np.ones(c, np.float32)
        params[name + ".b"] = np.zeros(c, np.float32)

    cin = config.in_channels
    for s in range(config.stage_count):
        conv(f"enc{s}.conv0.w", cin, feats[s], config.kernels[s])
        norm(f"enc{s}.norm0", feats[s])
        conv(f"enc{s}.conv1.w", feats[s], feats[s], config.kernels[s])
        norm(f"enc{s}.norm1", feats[s])
        cin = feats[s]
    for s in range(config.stage_count - 2, -1, -1):
        stride = config.strides[s + 1]
        fan_in = feats[s + 1]
        params[f"dec{s}.up.w"] = ops.he_normal(rng, (feats[s + 1], feats[s], *stride), fan_in).astype(np.float32)
        conv(f"dec{s}.conv0.w", 2 * feats[s], feats[s], config.kernels[s])
        norm(f"dec{s}.norm0", feats[s])
        conv(f"dec{s}.conv1.w", feats[s], feats[s], config.kernels[s])
        norm(f"dec{s}.norm1", feats[s])
    for k in _head_levels(config):
        params[f"head{k}.w"] = ops.he_normal(rng, (config.num_classes, feats[k]), feats[k]).astype(np.float32)
        params[f"head{k}.b"] = np.zeros(config.num_classes, np.float32)
    zeros = {k: np.zeros_like(p) for k, p in params.items()}
    return ModelState(config, params, zeros, {k: z.copy() for k, z in zeros.items()},
                      rng=np.random.default_rng([config.seed, 1]))


def _head_levels(config: UNetConfig) -> list[int]:
    # the decoder ends at stage 0; a single-stage net has its head on the encoder output
    return list(range(config.deep_supervision_levels + 1))


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def _block_forward(x, params, prefix, stride):
    w = params[prefix.replace("norm", "conv") + ".w"]
    y, c_conv = ops.conv_forward(x, w, stride)
    y, c_norm = ops.instance_norm_forward(y, params[prefix + ".g"], params[prefix + ".b"])
    y, c_act = ops.leaky_relu_forward(y, LEAKY_SLOPE)
    return y, (prefix, c_conv, c_norm, c_act)


def _block_backward(dy, cache, grads):
    prefix, c_conv, c_norm, c_act = cache
    dy = ops.leaky_relu_backward(dy, c_act)
    dy, grads[prefix + ".g"], grads[prefix + ".b"] = ops.instance_norm_backward(dy, c_norm)
    dx, grads[prefix.replace("norm", "conv") + ".w"] = ops.conv_backward(dy, c_conv)
    return dx


def _check_input(model: ModelState, x: np.ndarray):
    cfg = model.config
    expected = (cfg.in_channels, *cfg.patch_size)
    if x.ndim != cfg.dimensionality + 2 or tuple(x.shape[1:]) != expected:
        raise DataError(f"input shape {x.shape} does not match (B, {', '.join(map(str, expected))})")


def forward(model: ModelState, x: np.ndarray, keep_cache: bool = False):
    """Logits per supervision level, finest first: level k is at 1/2^k resolution."""
    _check_input(model, x)
    cfg, p = model.config, model.params
    dtype = p["enc0.conv0.w"].dtype
    h = np.asarray(x, dtype=dtype)
    caches: dict = {"enc": [], "dec": {}, "head": {}}
    skips = []
    for s in range(cfg.stage_count):
        h, c0 = _block_forward(h, p, f"enc{s}.norm0", cfg.strides[s])
        h, c1 = _block_forward(h, p, f"enc{s}.norm1", None)
        caches["enc"].append((c0, c1))
        skips.append(h)
    heads = set(_head_levels(cfg))
    logits: dict[int, np.ndarray] = {}
    if cfg.stage_count == 1:
        logits[0], caches["head"][0] = ops.conv1x1_forward(h, p["head0.w"], p["head0.b"])
    for s in range(cfg.stage_count - 2, -1, -1):
        up, c_up = ops.upconv_forward(h, p[f"dec{s}.up.w"])
        cat = np.concatenate([up, skips[s]], axis=1)
        h, c0 = _block_forward(cat, p, f"dec{s}.norm0", None)
        h, c1 = _block_forward(h, p, f"dec{s}.norm1", None)
        caches["dec"][s] = (c_up, up.shape[1], c0, c1)
        if s in heads:
            logits[s], caches["head"][s] = ops.conv1x1_forward(h, p[f"head{s}.w"], p[f"head{s}.b"])
    out = [logits[k] for k in sorted(logits)]
    return (out, caches) if keep_cache else out


def backward(model: ModelState, caches, dlogits) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every parameter, given d loss / d logits."""
    cfg, p = model.config, model.params
    grads: dict[str, np.ndarray] = {}
    dskips: list = [None] * cfg.stage_count
    dh = None
    if cfg.stage_count == 1:
        dh, grads["head0.w"], grads["head0.b"] = ops.conv1x1_backward(dlogits[0], caches["head"][0], p["head0.w"])
    # decoder runs coarse -> fine in forward, so backprop fine -> coarse
    for s in range(0, cfg.stage_count - 1):
        c_up, n_up, c0, c1 = caches["dec"][s]
        g = None
        if s in caches["head"]:
            g, grads[f"head{s}.w"], grads[f"head{s}.b"] = ops.conv1x1_backward(
                dlogits[s], caches["head"][s], p[f"head{s}.w"])
        if s > 0 and dh is not None:
            g = dh if g is None else g + dh
        if g is None:
            raise DataError("decoder level receives no gradient")
        g = _block_backward(g, c1, grads)
        g = _block_backward(g, c0, grads)
        dup, dskips[s] = g[:, :n_up], g[:, n_up:]
        dh, grads[f"dec{s}.up.w"] = ops.upconv_backward(np.ascontiguousarray(dup), c_up)
    # dh is now the gradient w.r.t. the bottleneck output
    for s in range(cfg.stage_count - 1, -1, -1):
        g = dh if s == cfg.stage_count - 1 else dh + dskips[s]
        c0, c1 = caches["enc"][s]
        g = _block_backward(g, c1, grads)
        dh = _block_backward(g, c0, grads)
    return {k: grads[k] for k in p}


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def supervision_weights(levels: int) -> np.ndarray:
    w = 0.5 ** np.arange(levels)
    return w / w.sum()


def downsample_target(target: np.ndarray, factors) -> np.ndarray:
    return target[(slice(None), *[slice(None, None, int(f)) for f in factors])]


def _level_loss(logits: np.ndarray, target: np.ndarray):
    c = logits.shape[1]
    prob = ops.softmax(logits, axis=1)
    onehot = np.stack([target == k for k in range(c)], axis=1).astype(logits.dtype)
    n_vox = target.size
    logp = np.log(np.maximum(np.take_along_axis(prob, target[:, None].astype(np.intp), axis=1), 1e-300))
    ce = -float(logp.sum()) / n_vox
    axes = (0, *range(2, logits.ndim))
    inter = (prob * onehot).sum(axis=axes)
    psum = prob.sum(axis=axes)
    gsum = onehot.sum(axis=axes)
    denom = psum + gsum + DICE_SMOOTH
    dsc = (2 * inter + DICE_SMOOTH) / denom
    fg = slice(1, c)
    nfg = c - 1
    dice = 1.0 - float(dsc[fg].mean())
    bshape = (1, -1) + (1,) * (logits.ndim - 2)
    scale = np.zeros(c, logits.dtype)
    scale[fg] = -1.0 / nfg
    # d dsc_c / d p = (2 g (P + G + s) - (2 I + s)) / (P + G + s)^2
    dp = scale.reshape(bshape) * (2 * onehot * denom.reshape(bshape) - (2 * inter + DICE_SMOOTH).reshape(bshape)) \
        / (denom ** 2).reshape(bshape)
    dz_dice = prob * (dp - (prob * dp).sum(axis=1, keepdims=True))
    dz_ce = (prob - onehot) / n_vox
    return dice, ce, dz_dice + dz_ce


@dataclass
class LossResult:
    total: float
    levels: list[float]
    dice: list[float]
    ce: list[float]
    grads: list[np.ndarray]


def dice_ce_loss(logits, target, weights: np.ndarray | None = None) -> LossResult:
    """Deep-supervised soft-Dice + cross-entropy.

    ``target`` holds label codes (B, *spatial) at full resolution; each coarser
    level compares against a strided (nearest) subsample.
    """
    target = np.asarray(target)
    if target.size and (target.min() < 0 or target.max() >= logits[0].shape[1]):
        raise DataError("target contains invalid label codes")
    weights = supervision_weights(len(logits)) if weights is None else np.asarray(weights)
    total, levels, dices, ces, grads = 0.0, [], [], [], []
    for w, lg in zip(weights, logits):
        factors = [t // l for t, l in zip(target.shape[1:], lg.shape[2:])]
        tgt = downsample_target(target, factors)
        if tgt.shape[1:] != lg.shape[2:]:
            raise DataError(f"target {target.shape[1:]} incompatible with logits {lg.shape[2:]}")
        d, c, g = _level_loss(lg, tgt)
        levels.append(d + c)
        dices.append(d)
        ces.append(c)
        total += float(w) * (d + c)
        grads.append((w * g).astype(lg.dtype, copy=False))
    return LossResult(total, levels, dices, ces, grads)


# ---------------------------------------------------------------------------
# Optimizer and schedule
# ---------------------------------------------------------------------------

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def adam_step(model: ModelState, grads: dict[str, np.ndarray], lr: float) -> ModelState:
    """Bias-corrected Adam update, applied in place; returns ``model``."""
    for name, g in grads.items():
        if name not in model.params or g.shape != model.params[name].shape:
            raise DataError(f"gradient for {name} has shape {g.shape}, parameter does not match")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in layer {name}")
    model.step += 1
    t = model.step
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    for name, g in grads.items():
        p = model.params[name]
        dt = p.dtype.type
        m = model.m[name]
        v = model.v[name]
        m *= dt(ADAM_BETA1)
        m += dt(1 - ADAM_BETA1) * g
        v *= dt(ADAM_BETA2)
        v += dt(1 - ADAM_BETA2) * (g * g)
        if lr != 0:
            p -= dt(lr) * (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(ADAM_EPS))
    return model


@dataclass(frozen=True)
class LRSchedule:
    initial_lr: float = 1e-2
    poly_exponent: float = 0.9
    max_epochs: int = 30

    def __post_init__(self):
        if self.initial_lr <= 0 or not 0 < self.poly_exponent <= 1 or self.max_epochs < 1:
            raise DataError(f"invalid learning-rate schedule {self}")


def poly_lr(schedule: LRSchedule, epoch: int) -> float:
    if not 0 <= epoch <= schedule.max_epochs:
        raise DataError(f"epoch {epoch} outside [0, {schedule.max_epochs}]")
    return schedule.initial_lr * (1.0 - epoch / schedule.max_epochs) ** schedule.poly_exponent


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


def _tile_starts(n: int, p: int) -> list[int]:
    if n <= p:
        return [0]
    starts = list(range(0, n - p + 1, max(1, p // 2)))
    if starts[-1] != n - p:
        starts.append(n - p)
    return starts


def predict_probabilities(model: ModelState, image: np.ndarray, tile_batch: int = 16) -> np.ndarray:
    """Softmax probabilities (C, D, H, W) for a (channels, D, H, W) volume.

    Tiles overlap by half a patch and are averaged uniformly. 2D models are
    applied to every axial slice.
    """
    cfg = model.config
    image = np.asarray(image, dtype=model.params["enc0.conv0.w"].dtype)
    dims = image.shape[1:]
    nd = cfg.dimensionality
    tile_dims = dims[-nd:]
    pad = [max(0, p - n) for n, p in zip(tile_dims, cfg.patch_size)]
    padded = np.pad(image, [(0, 0)] * (image.ndim - nd) + [(0, q) for q in pad])
    pdims = padded.shape[-nd:]
    lead = padded.shape[1:1 + 3 - nd]  # axial slices for 2D models
    probs = np.zeros((cfg.num_classes, *padded.shape[1:]), dtype=np.float64)
    counts = np.zeros(pdims, dtype=np.float64)
    starts = list(itertools.product(*[_tile_starts(n, p) for n, p in zip(pdims, cfg.patch_size)]))
    for st in starts:
        counts[tuple(slice(a, a + p) for a, p in zip(st, cfg.patch_size))] += 1
    jobs = [(lead_idx, st) for lead_idx in itertools.product(*[range(n) for n in lead]) for st in starts]
    for i in range(0, len(jobs), tile_batch):
        chunk = jobs[i:i + tile_batch]
        sl = [tuple(slice(a, a + p) for a, p in zip(st, cfg.patch_size)) for _, st in chunk]
        batch = np.stack([padded[(slice(None), *li, *s)] for (li, _), s in zip(chunk, sl)])
        out = ops.softmax(forward(model, batch)[0], axis=1)
        for j, ((li, _), s) in enumerate(zip(chunk, sl)):
            probs[(slice(None), *li, *s)] += out[j]
    probs /= counts
    return probs[(slice(None), *[slice(0, n) for n in dims])]


def sliding_window_predict(model: ModelState, case_or_image, spacing=None) -> LabelVolume:
    if hasattr(case_or_image, "images"):
        image = case_or_image.images.stack()
        spacing = case_or_image.images.spacing
    else:
        image = np.asarray(case_or_image)
    probs = predict_probabilities(model, image)
    return LabelVolume(np.argmax(probs, axis=0).astype(np.uint8), spacing or (1.0, 1.0, 1.0))


def config_json(config: UNetConfig) -> str:
    return json.dumps(config.to_dict(), sort_keys=True)
