"""Builders for the four networks and the bundle tying them together.

F-Net is a residual feature extractor ending in a linear layer of width
``feature_width``; the classifier is one dense layer plus softmax. R-Net
maps the feature vector back to an image through two FC blocks, a reshape
and a stack of stride-2 deconvolution blocks; D-Net is a patch discriminator
whose trunk feeds a per-patch real/reconstructed head and a class head.

All four share one :class:`ParameterStore`; every parameter belongs to
exactly one owner group in {F, C, R, D, D_disc, D_cls}, which is what the
alternating trainer uses to freeze the right networks during each update.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import Graph, OpSpec, ParameterStore, conv_out_size
from .errors import ShapeError

SUPPORTED_DEPTHS = (12, 18, 34, 44, 50)

# Residual layouts. 18/34/50 follow the standard two-branch designs
# (the stem pool is an average pool: the op vocabulary has no max pool).
# 12 and 44 are small-image three-stage variants documented here:
#   12 = 3x3 stem + 5 basic blocks [(16,1),(32,2),(32,1),(64,2),(64,1)] + FC
#   44 = 3x3 stem + 3 stages of 7 basic blocks, widths 16/32/64 + FC
_IMAGENET_STAGES = {
    18: ("basic", (2, 2, 2, 2)),
    34: ("basic", (3, 4, 6, 3)),
    50: ("bottleneck", (3, 4, 6, 3)),
}
_IMAGENET_WIDTHS = (64, 128, 256, 512)


@dataclass(frozen=True)
class FNetConfig:
    depth: int = 18
    image_size: int = 224
    feature_width: int = 128
    in_channels: int = 1

    def __post_init__(self):
        if self.depth not in SUPPORTED_DEPTHS:
            raise ShapeError(f"unsupported depth {self.depth}; choose from {SUPPORTED_DEPTHS}")
        if self.image_size < 8:
            raise ShapeError("image size too small for any supported stride stack")


@dataclass(frozen=True)
class RNetConfig:
    feature_width: int = 128
    reshape_channels: int = 128
    reshape_side: int = 7
    image_size: int = 224
    fc_hidden: int = 1024

    @property
    def n_upsample(self) -> int:
        """Number of doubling blocks before the final deconvolution."""
        ratio = self.image_size / self.reshape_side
        n = int(round(np.log2(ratio))) - 1
        if self.reshape_side * 2 ** (n + 1) != self.image_size or n < 1:
            raise ShapeError(
                f"image size {self.image_size} must equal reshape_side * 2^(n_up+1) "
                f"with n_up >= 1; got reshape_side={self.reshape_side}"
            )
        return n

    def validate(self):
        n = self.n_upsample
        if self.reshape_channels % (2 ** n):
            raise ShapeError("reshape_channels must be divisible by 2^n_upsample")


@dataclass(frozen=True)
class DNetConfig:
    image_size: int = 224
    n_downsample: int = 3
    base_channels: int = 64
    class_count: int = 3

    @property
    def patch_side(self) -> int:
        """Side of the discrimination head's probability map: M / 2^(n_down+1)."""
        div = 2 ** (self.n_downsample + 1)
        if self.image_size % div or self.image_size // div < 1:
            raise ShapeError(
                f"image size {self.image_size} not divisible by 2^{self.n_downsample + 1}"
            )
        return self.image_size // div


def default_reshape_side(image_size: int) -> int:
    """Pick the generator's reshape side for an image size: 7 when the size
    is 7 * 2^k (the reference geometry), otherwise 8 (small-image fallback)."""
    for side in (7, 8):
        m = image_size / side
        k = int(round(np.log2(m))) if m >= 4 else 0
        if k >= 2 and side * 2 ** k == image_size:
            return side
    raise ShapeError(f"no supported generator geometry for image size {image_size}")


class _Net:
    """Thin layer-by-layer builder writing into one graph."""

    def __init__(self, graph: Graph, owner: str):
        self.g = graph
        self.store = graph.store
        self.owner = owner

    def _param(self, name, shape, owner=None, fill=None, trainable=True, fans=None):
        self.store.create(name, shape, owner or self.owner, trainable=trainable,
                          fill=fill, fans=fans)
        return name

    def conv(self, x, name, cin, cout, k, s, p, bias=True, owner=None):
        fans = (cin * k * k, cout * k * k)
        params = [self._param(f"{name}/weight", (cout, cin, k, k), owner, fans=fans)]
        if bias:
            params.append(self._param(f"{name}/bias", (cout,), owner, fill=0.0))
        return self.g.add(OpSpec("conv2d", kernel=k, stride=s, padding=p), [x], params)

    def deconv(self, x, name, cin, cout, k, s, p, bias=True, owner=None):
        fans = (cin * k * k, cout * k * k)
        params = [self._param(f"{name}/weight", (cin, cout, k, k), owner, fans=fans)]
        if bias:
            params.append(self._param(f"{name}/bias", (cout,), owner, fill=0.0))
        return self.g.add(OpSpec("deconv2d", kernel=k, stride=s, padding=p), [x], params)

    def dense(self, x, name, fin, fout, owner=None):
        # weight is stored (out, in); the op computes through the transpose
        params = [
            self._param(f"{name}/weight", (fout, fin), owner, fans=(fin, fout)),
            self._param(f"{name}/bias", (fout,), owner, fill=0.0),
        ]
        return self.g.add(OpSpec("dense"), [x], params)

    def bn(self, x, name, c, owner=None):
        params = [
            self._param(f"{name}/gamma", (c,), owner, fill=1.0),
            self._param(f"{name}/beta", (c,), owner, fill=0.0),
            self._param(f"{name}/running_mean", (c,), owner, fill=0.0, trainable=False),
            self._param(f"{name}/running_var", (c,), owner, fill=1.0, trainable=False),
        ]
        return self.g.add(OpSpec("batch_norm"), [x], params)

    def inorm(self, x, name, c, owner=None):
        params = [
            self._param(f"{name}/gamma", (c,), owner, fill=1.0),
            self._param(f"{name}/beta", (c,), owner, fill=0.0),
        ]
        return self.g.add(OpSpec("instance_norm"), [x], params)

    def act(self, x, kind):
        return self.g.add(OpSpec(kind), [x])

    def add(self, a, b):
        return self.g.add(OpSpec("add"), [a, b])

    def reshape(self, x, shape):
        return self.g.add(OpSpec("reshape", shape=tuple(shape)), [x])

    def global_pool(self, x):
        return self.g.add(OpSpec("avg_pool", global_pool=True), [x])

    def pool(self, x, k):
        return self.g.add(OpSpec("avg_pool", kernel=k, stride=k), [x])


def _basic_block(net: _Net, x, name, cin, cout, stride):
    y = net.conv(x, f"{name}/conv1", cin, cout, 3, stride, 1, bias=False)
    y = net.bn(y, f"{name}/bn1", cout)
    y = net.act(y, "relu")
    y = net.conv(y, f"{name}/conv2", cout, cout, 3, 1, 1, bias=False)
    y = net.bn(y, f"{name}/bn2", cout)
    if stride != 1 or cin != cout:
        sc = net.conv(x, f"{name}/proj", cin, cout, 1, stride, 0, bias=False)
        sc = net.bn(sc, f"{name}/proj_bn", cout)
    else:
        sc = x
    return net.act(net.add(y, sc), "relu")


def _bottleneck_block(net: _Net, x, name, cin, width, stride):
    cout = width * 4
    y = net.conv(x, f"{name}/conv1", cin, width, 1, 1, 0, bias=False)
    y = net.bn(y, f"{name}/bn1", width)
    y = net.act(y, "relu")
    y = net.conv(y, f"{name}/conv2", width, width, 3, stride, 1, bias=False)
    y = net.bn(y, f"{name}/bn2", width)
    y = net.act(y, "relu")
    y = net.conv(y, f"{name}/conv3", width, cout, 1, 1, 0, bias=False)
    y = net.bn(y, f"{name}/bn3", cout)
    if stride != 1 or cin != cout:
        sc = net.conv(x, f"{name}/proj", cin, cout, 1, stride, 0, bias=False)
        sc = net.bn(sc, f"{name}/proj_bn", cout)
    else:
        sc = x
    return net.act(net.add(y, sc), "relu")


def build_fnet(cfg: FNetConfig, store: ParameterStore) -> Graph:
    """Residual feature extractor mapping (B, C, M, M) -> (B, feature_width)."""
    g = Graph("fnet", store)
    net = _Net(g, "F")
    size = cfg.image_size
    if cfg.depth in _IMAGENET_STAGES:
        kind, counts = _IMAGENET_STAGES[cfg.depth]
        x = net.conv(0, "F/stem/conv", cfg.in_channels, 64, 7, 2, 3, bias=False)
        x = net.bn(x, "F/stem/bn", 64)
        x = net.act(x, "relu")
        size = conv_out_size(size, 7, 2, 3)
        if size % 2:
            raise ShapeError(f"image size {cfg.image_size} incompatible with the stem pool")
        x = net.pool(x, 2)
        size //= 2
        cin = 64
        for si, (width, n_blocks) in enumerate(zip(_IMAGENET_WIDTHS, counts), start=1):
            for bi in range(n_blocks):
                stride = 2 if (si > 1 and bi == 0) else 1
                if stride == 2:
                    size = conv_out_size(size, 3, 2, 1)
                name = f"F/stage{si}/block{bi + 1}"
                if kind == "basic":
                    x = _basic_block(net, x, name, cin, width, stride)
                    cin = width
                else:
                    x = _bottleneck_block(net, x, name, cin, width, stride)
                    cin = width * 4
    else:
        if cfg.depth == 12:
            plan = [(16, 1), (32, 2), (32, 1), (64, 2), (64, 1)]
        else:  # 44
            plan = [(w, 2 if (i == 0 and w > 16) else 1)
                    for w in (16, 32, 64) for i in range(7)]
        x = net.conv(0, "F/stem/conv", cfg.in_channels, 16, 3, 1, 1, bias=False)
        x = net.bn(x, "F/stem/bn", 16)
        x = net.act(x, "relu")
        cin = 16
        for bi, (width, stride) in enumerate(plan, start=1):
            if stride == 2:
                size = conv_out_size(size, 3, 2, 1)
            x = _basic_block(net, x, f"F/block{bi}", cin, width, stride)
            cin = width
    if size < 1:
        raise ShapeError(f"image size {cfg.image_size} too small for depth {cfg.depth}")
    x = net.global_pool(x)
    x = net.reshape(x, (cin,))
    x = net.dense(x, "F/fc", cin, cfg.feature_width)  # linear feature head
    g.set_outputs([x])
    return g


def build_classifier(feature_width: int, class_count: int, store: ParameterStore) -> Graph:
    """Single dense layer plus softmax: (B, feature_width) -> probability rows."""
    if feature_width < 1 or class_count < 1:
        raise ShapeError("feature_width and class_count must be >= 1")
    g = Graph("classifier", store)
    net = _Net(g, "C")
    x = net.dense(0, "C/fc", feature_width, class_count)
    g.set_outputs([net.act(x, "softmax")])
    return g


def build_rnet(cfg: RNetConfig, store: ParameterStore) -> Graph:
    """Feature-to-image generator; output is rescaled from tanh range to [0, 1]."""
    cfg.validate()
    g = Graph("rnet", store)
    net = _Net(g, "R")
    n_up = cfg.n_upsample
    side = cfg.reshape_side
    ch = cfg.reshape_channels
    x = net.dense(0, "R/fc1", cfg.feature_width, cfg.fc_hidden)
    x = net.bn(x, "R/fc1_bn", cfg.fc_hidden)
    x = net.act(x, "relu")
    x = net.dense(x, "R/fc2", cfg.fc_hidden, ch * side * side)
    x = net.bn(x, "R/fc2_bn", ch * side * side)
    x = net.act(x, "relu")
    x = net.reshape(x, (ch, side, side))
    for i in range(n_up):
        x = net.deconv(x, f"R/up{i + 1}/deconv", ch, ch // 2, 4, 2, 1, bias=False)
        ch //= 2
        x = net.inorm(x, f"R/up{i + 1}/in", ch)
        x = net.act(x, "relu")
    x = net.deconv(x, "R/out/deconv", ch, 1, 4, 2, 1)
    x = net.act(x, "tanh")
    # tanh lands in [-1, 1]; consumers (SSIM, D-Net, dumps) expect [0, 1]
    x = g.add(OpSpec("affine_rescale", scale=0.5, shift=0.5), [x])
    g.set_outputs([x])
    return g


def build_dnet(cfg: DNetConfig, store: ParameterStore) -> Graph:
    """Patch discriminator with a real/reconstructed head and a class head.

    Outputs, in order: per-patch probabilities (B, 1, s, s) with
    s = M / 2^(n_down+1), and class probability rows (B, K).
    """
    cfg.patch_side  # validates divisibility
    g = Graph("dnet", store)
    net = _Net(g, "D")
    ch = cfg.base_channels
    x = net.conv(0, "D/stem/conv", 1, ch, 4, 2, 1)
    x = net.act(x, "leaky_relu")
    for i in range(cfg.n_downsample):
        x = net.conv(x, f"D/down{i + 1}/conv", ch, ch * 2, 4, 2, 1, bias=False)
        ch *= 2
        x = net.bn(x, f"D/down{i + 1}/bn", ch)
        x = net.act(x, "leaky_relu")
    x = net.conv(x, "D/feat/conv", ch, ch, 3, 1, 1, bias=False)
    x = net.bn(x, "D/feat/bn", ch)
    feat = net.act(x, "leaky_relu")
    disc = net.conv(feat, "Ddisc/conv", ch, 1, 3, 1, 1, owner="D_disc")
    disc = net.act(disc, "sigmoid")
    cls = net.global_pool(feat)
    cls = net.conv(cls, "Dcls/conv", ch, cfg.class_count, 1, 1, 0, owner="D_cls")
    cls = net.reshape(cls, (cfg.class_count,))
    cls = net.act(cls, "softmax")
    g.set_outputs([disc, cls])
    return g


@dataclass
class ModelBundle:
    """The four graphs over one shared store. R-Net/D-Net are optional:
    ablation arms omit them, and inference never needs them."""

    store: ParameterStore
    fnet: Graph
    classifier: Graph
    rnet: Graph | None
    dnet: Graph | None
    fnet_config: FNetConfig
    class_count: int
    rnet_config: RNetConfig | None = None
    dnet_config: DNetConfig | None = None

    @property
    def image_size(self) -> int:
        return self.fnet_config.image_size

    @property
    def feature_width(self) -> int:
        return self.fnet_config.feature_width

    def summary(self) -> str:
        parts = [f"F-Net depth {self.fnet_config.depth} (M={self.image_size}, "
                 f"N_f={self.feature_width})",
                 f"classifier K={self.class_count}"]
        if self.rnet is not None:
            c = self.rnet_config
            parts.append(f"R-Net reshape {c.reshape_channels}x{c.reshape_side}x"
                         f"{c.reshape_side}, {c.n_upsample} upsample blocks")
        if self.dnet is not None:
            c = self.dnet_config
            parts.append(f"D-Net base {c.base_channels}, {c.n_downsample} downsample "
                         f"blocks, patch map {c.patch_side}x{c.patch_side}")
        return "; ".join(parts)


def build_bundle(fcfg: FNetConfig, class_count: int, rcfg: RNetConfig | None = None,
                 dcfg: DNetConfig | None = None, dtype=np.float32) -> ModelBundle:
    store = ParameterStore(dtype)
    fnet = build_fnet(fcfg, store)
    classifier = build_classifier(fcfg.feature_width, class_count, store)
    rnet = build_rnet(rcfg, store) if rcfg is not None else None
    dnet = build_dnet(dcfg, store) if dcfg is not None else None
    return ModelBundle(store, fnet, classifier, rnet, dnet, fcfg, class_count,
                       rcfg, dcfg)


def _as_image_batch(bundle: ModelBundle, x) -> np.ndarray:
    x = np.asarray(x, dtype=bundle.store.dtype)
    if x.ndim == 3:
        x = x[:, None]
    m = bundle.image_size
    if x.ndim != 4 or x.shape[2] != m or x.shape[3] != m:
        raise ShapeError(f"expected image batch (B, C, {m}, {m}), got {x.shape}")
    return x


def extract_features(bundle: ModelBundle, images) -> np.ndarray:
    """Evaluation-mode feature vectors, shape (batch, feature_width)."""
    return bundle.fnet.forward(_as_image_batch(bundle, images), mode="eval")


def classify(bundle: ModelBundle, features) -> np.ndarray:
    """Class probability rows for pre-extracted features."""
    return bundle.classifier.forward(np.asarray(features, dtype=bundle.store.dtype),
                                     mode="eval")


def predict_label(probs) -> np.ndarray:
    """Row-wise argmax; ties resolve to the lowest class index."""
    return np.argmax(probs, axis=-1)


def predict(bundle: ModelBundle, images) -> np.ndarray:
    return predict_label(classify(bundle, extract_features(bundle, images)))


def reconstruct(bundle: ModelBundle, features) -> np.ndarray:
    """Generator output images in [0, 1], shape (batch, 1, M, M)."""
    if bundle.rnet is None:
        raise ShapeError("this bundle was built without an R-Net")
    return bundle.rnet.forward(np.asarray(features, dtype=bundle.store.dtype),
                               mode="eval")


def discriminate(bundle: ModelBundle, images):
    """Patch probabilities (batch, s, s) and class probability rows (batch, K)."""
    if bundle.dnet is None:
        raise ShapeError("this bundle was built without a D-Net")
    patch, cls = bundle.dnet.forward(_as_image_batch(bundle, images), mode="eval")
    return patch[:, 0], cls
