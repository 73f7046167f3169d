"""MLP feature extractor and a bias-free linear classification head.

The head is a single (feature_dim x class_count) weight matrix with no
additive term, so every logit is exactly the column sum of element-wise
feature/weight contributions (see the rationale module). The extractor's
final layer is affine only, leaving features free to take either sign.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff
from .autodiff import Tensor, add, matmul, relu
from .errors import ConfigError, DimensionError, SchemaError


@dataclass
class ModelConfig:
    input_dim: int
    hidden: tuple = (64, 64)
    feature_dim: int = 16
    class_count: int = 2
    init: str = "fan_in_uniform"
    seed: int = 0

    def validate(self):
        if self.input_dim < 1:
            raise ConfigError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.feature_dim < 1:
            raise ConfigError(f"feature_dim must be >= 1, got {self.feature_dim}")
        if self.class_count < 2:
            raise ConfigError(f"class_count must be >= 2, got {self.class_count}")
        if any(w < 1 for w in self.hidden):
            raise ConfigError(f"hidden widths must all be >= 1, got {self.hidden}")
        if self.init != "fan_in_uniform":
            raise ConfigError(f"unknown init scheme {self.init!r}")


class FeatureExtractor:
    """Stack of linear layers with relu between them, affine final layer."""

    def __init__(self, weights, biases):
        self.weights = list(weights)
        self.biases = list(biases)

    @property
    def input_dim(self):
        return self.weights[0].shape[0]

    @property
    def feature_dim(self):
        return self.weights[-1].shape[1]

    def parameters(self):
        params = []
        for w, b in zip(self.weights, self.biases):
            params.extend((w, b))
        return params

    def forward(self, x):
        return forward_features(self, x)

    def forward_np(self, x):
        """Tape-free forward pass for evaluation."""
        h = np.asarray(x, dtype=self.weights[0].data.dtype)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.data + b.data
            if i < last:
                h = np.maximum(h, 0)
        return h


class LinearHead:
    """Linear classifier without bias: logits are ``z @ weight``."""

    def __init__(self, weight):
        self.weight = weight if isinstance(weight, Tensor) else Tensor(weight, requires_grad=True)

    @property
    def feature_dim(self):
        return self.weight.shape[0]

    @property
    def class_count(self):
        return self.weight.shape[1]

    def parameters(self):
        return [self.weight]

    def forward(self, z):
        return forward_logits(self, z)

    def logits_np(self, z):
        return np.asarray(z, dtype=self.weight.data.dtype) @ self.weight.data


def init_model(config: ModelConfig):
    """Fan-in-scaled uniform initialization, deterministic per seed."""
    config.validate()
    rng = np.random.Generator(np.random.PCG64(config.seed))
    dims = [config.input_dim, *config.hidden, config.feature_dim]
    weights, biases = [], []
    for din, dout in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(din)
        weights.append(Tensor(rng.uniform(-bound, bound, size=(din, dout)), requires_grad=True))
        biases.append(Tensor(rng.uniform(-bound, bound, size=dout), requires_grad=True))
    bound = 1.0 / np.sqrt(config.feature_dim)
    head_weight = Tensor(
        rng.uniform(-bound, bound, size=(config.feature_dim, config.class_count)),
        requires_grad=True)
    return FeatureExtractor(weights, biases), LinearHead(head_weight)


def forward_features(extractor, x):
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim != 2 or x.shape[1] != extractor.input_dim:
        raise DimensionError(
            f"expected inputs of shape (n, {extractor.input_dim}), got {x.shape}")
    h = x
    last = len(extractor.weights) - 1
    for i, (w, b) in enumerate(zip(extractor.weights, extractor.biases)):
        h = add(matmul(h, w), b)
        if i < last:
            h = relu(h)
    return h


def forward_logits(head, z):
    z = z if isinstance(z, Tensor) else Tensor(z)
    if z.ndim != 2 or z.shape[1] != head.feature_dim:
        raise DimensionError(
            f"expected features of shape (n, {head.feature_dim}), got {z.shape}")
    return matmul(z, head.weight)


def parameters(extractor, head):
    return extractor.parameters() + head.parameters()


CHECKPOINT_FORMAT = "ridg-model-v1"


def save_checkpoint(extractor, head, path, seed=None, extra=None):
    """Flat JSON document: layer shapes plus row-major weight arrays."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "precision": autodiff.precision_name(),
        "seed": seed,
        "layers": [
            {
                "shape": list(w.shape),
                "weight": w.data.ravel().tolist(),
                "bias": b.data.ravel().tolist(),
            }
            for w, b in zip(extractor.weights, extractor.biases)
        ],
        "head": {
            "shape": list(head.weight.shape),
            "weight": head.weight.data.ravel().tolist(),
        },
    }
    if extra:
        doc["extra"] = extra
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_checkpoint(path):
    """Rebuild (extractor, head) from :func:`save_checkpoint` output."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise SchemaError(f"{path}: not a {CHECKPOINT_FORMAT} document")
    dtype = np.float32 if doc.get("precision") == "f32" else np.float64
    weights, biases = [], []
    for layer in doc["layers"]:
        din, dout = layer["shape"]
        weights.append(Tensor(
            np.asarray(layer["weight"], dtype=dtype).reshape(din, dout),
            requires_grad=True, dtype=dtype))
        biases.append(Tensor(np.asarray(layer["bias"], dtype=dtype), requires_grad=True,
                             dtype=dtype))
    d, k = doc["head"]["shape"]
    head_weight = Tensor(np.asarray(doc["head"]["weight"], dtype=dtype).reshape(d, k),
                         requires_grad=True, dtype=dtype)
    meta = {"precision": doc.get("precision"), "seed": doc.get("seed"),
            "extra": doc.get("extra")}
    return FeatureExtractor(weights, biases), LinearHead(head_weight), meta
