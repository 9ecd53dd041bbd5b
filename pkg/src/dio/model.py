"""Multi-head classifier: one shared feature backbone, L parallel linear heads.

The backbone maps inputs to an m-dimensional feature vector; each head is a
plain linear classifier on those features. At inference one head is drawn
uniformly at random per forward call (no ensembling of head outputs).
"""

from __future__ import annotations

import hashlib

import numpy as np

from .tensor import Tensor, conv2d, flatten, l2_norm, matmul, no_grad, relu

__all__ = [
    "Dense",
    "Conv2d",
    "Backbone",
    "Head",
    "DioModel",
    "build_model",
    "head_inner_product",
    "parameter_checksum",
    "ARCHITECTURES",
]


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Dense:
    """Affine layer x @ W + b with optional ReLU."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, activation: bool = True):
        self.W = Tensor(_kaiming_uniform(rng, (in_dim, out_dim), in_dim), requires_grad=True)
        self.b = Tensor(np.zeros(out_dim), requires_grad=True)
        self.activation = activation

    def forward(self, x: Tensor) -> Tensor:
        out = matmul(x, self.W) + self.b
        return relu(out) if self.activation else out

    def parameters(self):
        return [self.W, self.b]


class Conv2d:
    """Conv + ReLU block, NCHW. Kernels OIHW, Kaiming-uniform fan-in init."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0):
        fan_in = in_ch * kernel * kernel
        self.W = Tensor(_kaiming_uniform(rng, (out_ch, in_ch, kernel, kernel), fan_in), requires_grad=True)
        self.b = Tensor(np.zeros(out_ch), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        out = conv2d(x, self.W, stride=self.stride, padding=self.padding)
        return relu(out + self.b.reshape((1, -1, 1, 1)))

    def parameters(self):
        return [self.W, self.b]


class _Flatten:
    def forward(self, x: Tensor) -> Tensor:
        return flatten(x)

    def parameters(self):
        return []


class Backbone:
    """Ordered stack of layers producing (batch, feature_dim) activations."""

    def __init__(self, layers, feature_dim: int):
        self.layers = list(layers)
        self.feature_dim = int(feature_dim)

    def forward(self, x: Tensor) -> Tensor:
        out = x
        for layer in self.layers:
            out = layer.forward(out)
        return out

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]


class Head:
    """Linear classifier over backbone features; column j of W is the class-j hyperplane."""

    def __init__(self, feature_dim: int, num_classes: int, rng: np.random.Generator):
        self.W = Tensor(_kaiming_uniform(rng, (feature_dim, num_classes), feature_dim), requires_grad=True)
        self.b = Tensor(np.zeros(num_classes), requires_grad=True)

    def forward(self, z: Tensor) -> Tensor:
        return matmul(z, self.W) + self.b

    def column_norms(self) -> Tensor:
        """Per-class hyperplane norms, differentiable."""
        return l2_norm(self.W, axis=0)

    def parameters(self):
        return [self.W, self.b]


class DioModel:
    """Shared backbone plus L parallel heads over the same feature vector."""

    def __init__(self, backbone: Backbone, heads: list[Head], arch: str = "custom", arch_params: dict | None = None):
        if not heads:
            raise ValueError("DioModel needs at least one head")
        if len({h.W.shape for h in heads}) != 1:
            raise ValueError("all heads must share feature and class dimensions")
        self.backbone = backbone
        self.heads = heads
        self.arch = arch
        self.arch_params = dict(arch_params or {})

    @property
    def num_heads(self) -> int:
        return len(self.heads)

    @property
    def num_classes(self) -> int:
        return self.heads[0].W.shape[1]

    def forward_all_heads(self, x: Tensor) -> list[Tensor]:
        """Logits of every head; the backbone runs exactly once per batch."""
        z = self.backbone.forward(x)
        return [h.forward(z) for h in self.heads]

    def forward_head(self, x: Tensor, index: int) -> Tensor:
        return self.heads[index].forward(self.backbone.forward(x))

    def forward_random_head(self, x: Tensor, rng: np.random.Generator) -> tuple[Tensor, int]:
        """Logits through one uniformly drawn head; returns (logits, head index)."""
        index = int(rng.integers(self.num_heads))
        return self.forward_head(x, index), index

    def predict(self, x: np.ndarray, rng: np.random.Generator | None = None, head: int | None = None) -> np.ndarray:
        """Argmax labels without building a tape."""
        with no_grad():
            xt = Tensor(x)
            if head is not None:
                logits = self.forward_head(xt, head)
            elif self.num_heads == 1:
                logits = self.forward_head(xt, 0)
            else:
                if rng is None:
                    raise ValueError("predict on a multi-head model needs an rng or an explicit head")
                logits, _ = self.forward_random_head(xt, rng)
        return logits.data.argmax(axis=1)

    def parameters(self) -> list[Tensor]:
        params = self.backbone.parameters()
        for h in self.heads:
            params.extend(h.parameters())
        return params

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def head_inner_product(h_i: Head, h_j: Head) -> float:
    """Inner product of the vectorized weight matrices; biases excluded."""
    if h_i.W.shape != h_j.W.shape:
        raise ValueError(f"head_inner_product: shape mismatch {h_i.W.shape} vs {h_j.W.shape}")
    return float(np.dot(h_i.W.data.reshape(-1), h_j.W.data.reshape(-1)))


def parameter_checksum(model: DioModel) -> str:
    """SHA-256 over all parameter bytes, for purity checks."""
    digest = hashlib.sha256()
    for p in model.parameters():
        digest.update(np.ascontiguousarray(p.data).tobytes())
    return digest.hexdigest()


# -- architecture registry ------------------------------------------------


def _build_mlp(params: dict, num_classes: int, L: int, seed: int) -> DioModel:
    d = int(params["input_dim"])
    hidden = int(params.get("hidden", 64))
    m = int(params.get("features", 32))
    seq = np.random.SeedSequence(seed)
    backbone_rng = np.random.default_rng(seq.spawn(1)[0])
    layers = [
        Dense(d, hidden, backbone_rng),
        Dense(hidden, hidden, backbone_rng),
        Dense(hidden, m, backbone_rng),
    ]
    heads = [Head(m, num_classes, np.random.default_rng(child)) for child in seq.spawn(L)]
    return DioModel(Backbone(layers, m), heads, arch="mlp", arch_params=dict(params))


def _build_small_cnn(params: dict, num_classes: int, L: int, seed: int) -> DioModel:
    c, h, w = (int(v) for v in params["input_shape"])
    ch = int(params.get("channels", 8))
    m = int(params.get("features", 32))
    seq = np.random.SeedSequence(seed)
    backbone_rng = np.random.default_rng(seq.spawn(1)[0])
    layers = [
        Conv2d(c, ch, 3, backbone_rng, stride=1, padding=1),
        Conv2d(ch, 2 * ch, 3, backbone_rng, stride=2, padding=1),
        _Flatten(),
    ]
    h2, w2 = (h + 1) // 2, (w + 1) // 2
    layers.append(Dense(2 * ch * h2 * w2, m, backbone_rng))
    heads = [Head(m, num_classes, np.random.default_rng(child)) for child in seq.spawn(L)]
    return DioModel(Backbone(layers, m), heads, arch="small_cnn", arch_params=dict(params))


ARCHITECTURES = {
    "mlp": _build_mlp,
    "small_cnn": _build_small_cnn,
}


def build_model(arch: str, arch_params: dict, num_classes: int, L: int, seed: int) -> DioModel:
    """Instantiate a registered architecture with independently seeded heads."""
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {arch!r}; known: {sorted(ARCHITECTURES)}")
    if L < 1:
        raise ValueError("L must be >= 1")
    return ARCHITECTURES[arch](arch_params, num_classes, L, seed)
