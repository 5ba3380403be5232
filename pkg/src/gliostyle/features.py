"""Fixed random convolutional feature extractor for style transfer.

Stands in for a pretrained classification backbone: a short stack of
bias-free 3x3 convolutions with ReLU and optional 2x2 average pooling, with
weights drawn deterministically from a seed. Gradients with respect to the
input image are exact.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from .errors import DataError


@dataclass(frozen=True)
class LayerSpec:
    out_channels: int
    pool: bool = False


def _default_layers() -> tuple[LayerSpec, ...]:
    return (LayerSpec(8, True), LayerSpec(16), LayerSpec(16, True), LayerSpec(32))


@dataclass(frozen=True)
class FeatureExtractorSpec:
    layers: tuple[LayerSpec, ...] = field(default_factory=_default_layers)
    content_layer: int = -1
    style_layers: tuple[int, ...] | None = None
    style_weights: tuple[float, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        n = len(self.layers)
        if n == 0:
            raise DataError("extractor needs at least one layer")
        layers = tuple(l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in self.layers)
        object.__setattr__(self, "layers", layers)
        content = self.content_layer % n if -n <= self.content_layer < n else None
        if content is None:
            raise DataError(f"content layer {self.content_layer} out of range for {n} layers")
        object.__setattr__(self, "content_layer", content)
        style = tuple(range(n)) if self.style_layers is None else tuple(self.style_layers)
        if not style or any(not 0 <= s < n for s in style) or len(set(style)) != len(style):
            raise DataError(f"invalid style layers {style}")
        object.__setattr__(self, "style_layers", style)
        weights = self.style_weights
        if weights is None:
            weights = tuple(1.0 / len(style) for _ in style)
        weights = tuple(float(w) for w in weights)
        if len(weights) != len(style) or any(w <= 0 for w in weights) or abs(sum(weights) - 1.0) > 1e-9:
            raise DataError("style weights must be positive, one per style layer, and sum to 1")
        object.__setattr__(self, "style_weights", weights)

    @property
    def min_size(self) -> int:
        return 2 ** sum(l.pool for l in self.layers)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> FeatureExtractorSpec:
        doc = json.loads(text)
        doc["layers"] = tuple(LayerSpec(**l) for l in doc["layers"])
        for key in ("style_layers", "style_weights"):
            if doc.get(key) is not None:
                doc[key] = tuple(doc[key])
        return cls(**doc)


@dataclass(frozen=True, eq=False)
class FeatureExtractor:
    spec: FeatureExtractorSpec
    weights: tuple[np.ndarray, ...]

    @property
    def selected_layers(self) -> tuple[int, ...]:
        return tuple(sorted({self.spec.content_layer, *self.spec.style_layers}))

    def astype(self, dtype) -> FeatureExtractor:
        return FeatureExtractor(self.spec, tuple(w.astype(dtype) for w in self.weights))


def build_extractor(spec: FeatureExtractorSpec | None = None) -> FeatureExtractor:
    """Materialize orthogonal 3x3 kernels with per-entry RMS sqrt(2 / fan_in)."""
    spec = spec or FeatureExtractorSpec()
    rng = np.random.default_rng(spec.seed)
    weights = []
    in_ch = 1
    for layer in spec.layers:
        fan_in = in_ch * 9
        q = ops.orthogonal(rng, layer.out_channels, fan_in)
        q *= np.sqrt(2.0 / fan_in) / np.sqrt(np.mean(q * q))
        w = q.reshape(layer.out_channels, in_ch, 3, 3).astype(np.float32)
        w.flags.writeable = False
        weights.append(w)
        in_ch = layer.out_channels
    return FeatureExtractor(spec, tuple(weights))


@dataclass
class FeaturePyramid:
    """Post-activation feature maps per selected layer, each (B, N_l, H_l, W_l)."""

    maps: dict[int, np.ndarray]
    # per-layer forward caches for the backward pass
    _caches: list = field(default_factory=list, repr=False)
    _input_shape: tuple = ()

    def __getitem__(self, layer: int) -> np.ndarray:
        return self.maps[layer]


def _as_batch(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim == 2:
        return image[None, None]
    if image.ndim == 3:
        return image[:, None]
    if image.ndim == 4 and image.shape[1] == 1:
        return image
    raise DataError(f"expected a 2D slice or a stack of slices, got shape {image.shape}")


def extract_features(image: np.ndarray, extractor: FeatureExtractor) -> FeaturePyramid:
    """Run the extractor on a slice (H, W) or a stack of slices (B, H, W).

    Feature maps keep a leading batch axis. The computation dtype follows the
    input (float32 weights are upcast when the image is float64).
    """
    x = _as_batch(image)
    h, w = x.shape[2:]
    if min(h, w) < extractor.spec.min_size:
        raise DataError(f"image {h}x{w} smaller than extractor minimum "
                        f"{extractor.spec.min_size}x{extractor.spec.min_size}")
    dtype = np.result_type(x.dtype, np.float32)
    x = x.astype(dtype, copy=False)
    selected = set(extractor.selected_layers)
    last = max(selected)
    maps, caches = {}, []
    for i, (layer, weight) in enumerate(zip(extractor.spec.layers, extractor.weights)):
        if i > last:
            break
        pre, conv_cache = ops.conv_forward(x, weight.astype(dtype, copy=False))
        act, relu_mask = ops.relu_forward(pre)
        if i in selected:
            maps[i] = act
        pool_shape = None
        x = act
        if layer.pool and i < last:
            x, pool_shape = ops.avg_pool2_forward(act)
        caches.append((conv_cache, relu_mask, pool_shape))
    return FeaturePyramid(maps, caches, x.shape)


def backprop_to_input(pyramid: FeaturePyramid, grads: dict[int, np.ndarray]) -> np.ndarray:
    """Gradient w.r.t. the input batch (B, H, W) given gradients w.r.t. feature maps."""
    g = None
    for i in range(len(pyramid._caches) - 1, -1, -1):
        conv_cache, relu_mask, pool_shape = pyramid._caches[i]
        if g is not None and pool_shape is not None:
            g = ops.avg_pool2_backward(g, pool_shape)
        if i in grads:
            g = grads[i] if g is None else g + grads[i]
        if g is None:
            continue
        g = ops.relu_backward(g, relu_mask)
        g, _ = ops.conv_backward(g, conv_cache, weight_grad=False)
    if g is None:
        raise DataError("no gradients supplied for any extracted layer")
    return g[:, 0]


def gram_matrix(features: np.ndarray) -> np.ndarray:
    """Unnormalized Gram matrix F F^T of feature maps flattened to (N, M).

    Accepts (N, H, W) or a batch (B, N, H, W).
    """
    f = np.asarray(features)
    if f.size == 0:
        raise DataError("empty feature map")
    flat = f.reshape(*f.shape[:-2], -1)
    return flat @ np.swapaxes(flat, -1, -2)
