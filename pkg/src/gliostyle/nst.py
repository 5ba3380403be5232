"""Neural style transfer used as data augmentation.

Each content slice is optimized pixel-wise with Adam against
``alpha * content_loss + beta * style_loss``. Slices are processed as a batch:
the objective is a sum of independent per-slice terms and Adam is elementwise,
so every slice follows exactly the trajectory it would follow on its own.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass

import numpy as np

from .errors import DataError, DegenerateInputError, NumericalError
from .features import FeatureExtractor, backprop_to_input, extract_features, gram_matrix
from .preprocess import normalize_nonzero
from .volume import MODALITIES, Case, MultiModalVolume

log = logging.getLogger(__name__)


class Init(str, enum.Enum):
    CONTENT_COPY = "CONTENT_COPY"
    NOISE = "NOISE"


@dataclass(frozen=True)
class StyleTransferConfig:
    alpha: float = 1.0
    beta: float = 1e3
    iterations: int = 200
    step_size: float = 0.02
    seed: int = 0
    init: Init = Init.CONTENT_COPY
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "init", Init(self.init))
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise DataError("alpha and beta must be non-negative and not both zero")
        if self.step_size <= 0:
            raise DataError("step_size must be positive")
        if self.iterations < 1:
            raise DataError("iterations must be >= 1")


@dataclass(frozen=True)
class StylePair:
    content_case_id: str
    style_case_id: str
    channel: str | None = None
    slice_index: int | None = None

    def __post_init__(self):
        if self.content_case_id == self.style_case_id:
            raise DataError(f"content and style case are the same: {self.content_case_id}")


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _content_terms(f: np.ndarray, p: np.ndarray):
    diff = f - p
    axes = tuple(range(1, f.ndim))
    return 0.5 * (diff * diff).sum(axis=axes), diff


def _style_terms(f: np.ndarray, a: np.ndarray):
    """Per-sample Gatys layer error and its gradient w.r.t. ``f`` (B, N, H, W)."""
    b, n = f.shape[:2]
    m = int(np.prod(f.shape[2:]))
    flat = f.reshape(b, n, m)
    g = flat @ np.swapaxes(flat, 1, 2)
    diff = g - a
    scale = 1.0 / (4.0 * n * n * m * m)
    e = scale * (diff * diff).sum(axis=(1, 2))
    # dE/dG = 2 scale (G - A); dG -> dF = (dG + dG^T) F = 2 dG F since G - A is symmetric
    grad = (4.0 * scale) * (diff @ flat)
    return e, grad.reshape(f.shape)


def content_loss(generated: np.ndarray, target: np.ndarray):
    """Half squared error between feature maps; returns (loss, d loss / d generated)."""
    f = np.asarray(generated)
    p = np.asarray(target)
    if f.shape != p.shape:
        raise DataError(f"content feature shapes differ: {f.shape} vs {p.shape}")
    loss, grad = _content_terms(f[None], p[None])
    return float(loss[0]), grad[0]


def style_loss(generated, targets, weights):
    """Weighted Gatys style loss over layers.

    ``generated`` holds one feature map (N, H, W) per layer, ``targets`` the
    matching style Gram matrices (N, N). Returns (loss, per-layer gradients
    w.r.t. the feature maps).
    """
    if not (len(generated) == len(targets) == len(weights)):
        raise DataError("style loss needs one target and one weight per layer")
    total = 0.0
    grads = []
    for f, a, w in zip(generated, targets, weights):
        f = np.asarray(f)
        a = np.asarray(a)
        n = f.shape[0]
        if a.shape != (n, n):
            raise DataError(f"Gram target shape {a.shape} does not match {n} channels")
        e, g = _style_terms(f[None], a[None])
        total += w * float(e[0])
        grads.append(w * g[0])
    return total, grads


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------


@dataclass
class NSTTargets:
    content: np.ndarray  # (B, N, H, W) at the content layer
    grams: dict[int, np.ndarray]  # per style layer, (B, N, N)


def nst_targets(content: np.ndarray, style: np.ndarray, extractor: FeatureExtractor) -> NSTTargets:
    spec = extractor.spec
    pc = extract_features(content, extractor)
    ps = extract_features(style, extractor)
    return NSTTargets(pc[spec.content_layer], {l: gram_matrix(ps[l]) for l in spec.style_layers})


def nst_objective(x: np.ndarray, targets: NSTTargets, extractor: FeatureExtractor,
                  config: StyleTransferConfig):
    """Per-slice (total, content, style) losses and d total / d x for a batch (B, H, W)."""
    spec = extractor.spec
    pyr = extract_features(x, extractor)
    lc, dc = _content_terms(pyr[spec.content_layer], targets.content)
    ls = np.zeros(x.shape[0], dtype=lc.dtype)
    grads: dict[int, np.ndarray] = {spec.content_layer: config.alpha * dc}
    for layer, w in zip(spec.style_layers, spec.style_weights):
        e, g = _style_terms(pyr[layer], targets.grams[layer])
        ls = ls + w * e
        g = (config.beta * w) * g
        grads[layer] = grads[layer] + g if layer in grads else g
    total = config.alpha * lc + config.beta * ls
    return total, lc, ls, backprop_to_input(pyr, grads)


def match_shape(image: np.ndarray, shape) -> np.ndarray:
    """Center-crop or zero-pad the last two axes of ``image`` to ``shape``."""
    out = image
    for axis, n in zip((-2, -1), shape):
        cur = out.shape[axis]
        if cur > n:
            start = (cur - n) // 2
            out = np.take(out, np.arange(start, start + n), axis=axis)
        elif cur < n:
            before = (n - cur) // 2
            pad = [(0, 0)] * out.ndim
            pad[axis] = (before, n - cur - before)
            out = np.pad(out, pad)
    return out


@dataclass
class NSTResult:
    image: np.ndarray
    trace: np.ndarray  # (iterations + 1, [B,] 3): total, content, style

    @property
    def initial_loss(self):
        return self.trace[0, ..., 0]

    @property
    def final_loss(self):
        return self.trace[-1, ..., 0]


def nst_optimize(content: np.ndarray, style: np.ndarray, extractor: FeatureExtractor,
                 config: StyleTransferConfig | None = None, salt: int = 0,
                 mask: np.ndarray | None = None) -> NSTResult:
    """Stylize a content slice (H, W) or stack (B, H, W) toward ``style``.

    The style input is center-cropped or padded to the content shape first.
    ``salt`` decorrelates noise initialisation between calls sharing a seed.
    With ``mask`` only pixels where it is true are updated.
    """
    config = config or StyleTransferConfig()
    dtype = np.dtype(config.dtype)
    single = np.ndim(content) == 2
    c = np.asarray(content, dtype=dtype)
    s = np.asarray(style, dtype=dtype)
    if single:
        c, s = c[None], s[None]
    if s.ndim != 3 or s.shape[0] != c.shape[0]:
        raise DataError(f"style batch {s.shape} does not match content batch {c.shape}")
    if mask is not None:
        mask = np.asarray(mask, bool).reshape(c.shape)
    s = match_shape(s, c.shape[1:])
    ext = extractor.astype(dtype)
    targets = nst_targets(c, s, ext)

    if config.init is Init.CONTENT_COPY:
        x = c.copy()
    else:
        rng = np.random.default_rng([config.seed, salt])
        scale = float(c.std()) or 1.0
        x = (rng.standard_normal(c.shape) * scale).astype(dtype)

    b1, b2, eps = 0.9, 0.999, 1e-8
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    trace = np.empty((config.iterations + 1, x.shape[0], 3), dtype=np.float64)
    initial = None
    for it in range(config.iterations + 1):
        total, lc, ls, grad = nst_objective(x, targets, ext, config)
        trace[it, :, 0], trace[it, :, 1], trace[it, :, 2] = total, lc, ls
        if not np.all(np.isfinite(total)):
            bad = int(np.flatnonzero(~np.isfinite(total))[0])
            raise NumericalError(f"non-finite style-transfer loss at iteration {it}, slice {bad}")
        if initial is None:
            initial = total.copy()
        diverged = (initial > 0) & (total > 10.0 * initial)
        if diverged.any():
            bad = int(np.flatnonzero(diverged)[0])
            raise NumericalError(f"style transfer diverged at iteration {it}, slice {bad}: "
                                 f"loss {total[bad]:.4g} > 10 x initial {initial[bad]:.4g}")
        if it == config.iterations:
            break
        t = it + 1
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad * grad
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        step = config.step_size * mhat / (np.sqrt(vhat) + eps)
        if mask is not None:
            step = np.where(mask, step, 0)
        x = (x - step).astype(dtype, copy=False)

    if single:
        return NSTResult(x[0], trace[:, 0])
    return NSTResult(x, trace)


# ---------------------------------------------------------------------------
# Dataset-level augmentation
# ---------------------------------------------------------------------------


def pair_randomly(ssa_ids, gli_ids, seed: int) -> list[StylePair]:
    """Give every content id one style partner drawn uniformly with replacement."""
    ssa = sorted(ssa_ids)
    gli = sorted(gli_ids)
    if not ssa or not gli:
        raise DataError("pairing needs at least one content and one style case")
    if len(set(ssa)) != len(ssa):
        raise DataError("duplicate content ids")
    overlap = set(ssa) & set(gli)
    if overlap:
        raise DataError(f"ids present in both content and style sets: {sorted(overlap)}")
    rng = np.random.default_rng(seed)
    picks = rng.integers(0, len(gli), size=len(ssa))
    return [StylePair(c, gli[int(j)]) for c, j in zip(ssa, picks)]


def slice_correspondence(content_depth: int, style_depth: int) -> np.ndarray:
    """Proportional mapping of content slice indices to style slice indices."""
    idx = np.floor((np.arange(content_depth) + 0.5) * style_depth / content_depth)
    return np.minimum(idx.astype(np.intp), style_depth - 1)


def stylize_case(content: Case, style: Case, extractor: FeatureExtractor,
                 config: StyleTransferConfig | None = None) -> tuple[Case, dict[str, np.ndarray]]:
    """Stylize every channel of ``content`` slice-wise along the axial axis.

    Returns the new case (id suffixed ``-nst``, truth passed through) and the
    per-channel loss traces, each (iterations + 1, D, 3).
    """
    config = config or StyleTransferConfig()
    support = np.any(content.images.stack() != 0, axis=0)
    idx = slice_correspondence(content.images.dims[0], style.images.dims[0])
    channels, traces = {}, {}
    for ci, m in enumerate(MODALITIES):
        c = content.images.channels[m].data
        s = style.images.channels[m].data[idx]
        try:
            res = nst_optimize(c, s, extractor, config, salt=ci, mask=support)
        except NumericalError as exc:
            raise NumericalError(f"pair {content.id} <- {style.id}, channel {m}: {exc}") from exc
        out = np.where(support, res.image, 0).astype(np.float32)
        grid = content.images.channels[m].with_data(out)
        try:
            grid = normalize_nonzero(grid)
        except DegenerateInputError:
            pass
        channels[m] = grid
        traces[m] = res.trace
        log.debug("stylized %s/%s: mean loss %.4g -> %.4g", content.id, m,
                  res.trace[0, :, 0].mean(), res.trace[-1, :, 0].mean())
    case = Case(f"{content.id}-nst", MultiModalVolume(channels), content.truth, content.domain)
    return case, traces


def check_common_spacing(cases) -> None:
    spacings = {c.images.spacing for c in cases}
    if len(spacings) > 1:
        raise DataError(f"cases must share one spacing before augmentation, got {sorted(spacings)}")


def augment_dataset(ssa_cases, gli_cases, extractor: FeatureExtractor,
                    config: StyleTransferConfig | None = None,
                    pairs: list[StylePair] | None = None) -> tuple[list[Case], list[StylePair]]:
    """Stylize each content case against a randomly paired style case."""
    config = config or StyleTransferConfig()
    ssa = {c.id: c for c in ssa_cases}
    gli = {c.id: c for c in gli_cases}
    check_common_spacing([*ssa.values(), *gli.values()])
    if pairs is None:
        pairs = pair_randomly(ssa, gli, config.seed)
    out = []
    for pair in pairs:
        case, _ = stylize_case(ssa[pair.content_case_id], gli[pair.style_case_id], extractor, config)
        out.append(case)
    return out, pairs
