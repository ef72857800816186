"""Model assembly: a small MLP or residual-CNN backbone producing an
abstract feature vector, an optional squashing layer on top of it, and a
final class-score layer.

The squashing layer sits between the backbone output and the class-score
computation.  For the margin losses the class-score computation is the
normalized cosine layer owned by the loss module; by default the
squashed vector is what gets L2-normalized there (``psn_before_norm``),
with the reversed order available as a switch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .losses import CrossEntropy, LossKind, inference_logits
from .psn import PsnMode, PsnParams, POSITIVITY_FLOOR, psn_apply, psn_from_mode
from .tensor import Tensor

__all__ = [
    "BackboneConfig",
    "PsnLayer",
    "PsnetModel",
    "build_model",
    "forward_features",
    "forward_embedding",
    "forward_logits",
    "param_count",
]


@dataclass(frozen=True)
class BackboneConfig:
    kind: str = "tiny_resnet"  # "mlp" or "tiny_resnet"
    input_shape: tuple[int, ...] = (1, 28, 28)
    hidden: tuple[int, ...] = (64,)  # mlp only
    blocks: tuple[int, int, int] = (2, 2, 2)  # residual blocks per stage
    channels: tuple[int, int, int] = (16, 32, 64)
    embedding_dim: int = 64

    def __post_init__(self):
        if self.kind not in ("mlp", "tiny_resnet"):
            raise ValueError(f"unknown backbone kind {self.kind!r}")
        if self.embedding_dim < 2:
            raise ValueError("embedding_dim must be >= 2")
        if self.kind == "tiny_resnet":
            if len(self.input_shape) != 3:
                raise ValueError("tiny_resnet needs a (C, H, W) input shape")
            if len(self.blocks) != len(self.channels):
                raise ValueError("blocks and channels must have equal length")
        if not self.input_shape or any(d < 1 for d in self.input_shape):
            raise ValueError(f"bad input shape {self.input_shape}")


def _he_normal(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
    return Tensor(w, requires_grad=True)


class Linear:
    def __init__(self, rng, in_dim: int, out_dim: int, bias: bool = True):
        self.w = _he_normal(rng, (in_dim, out_dim), in_dim)
        self.b = Tensor(np.zeros(out_dim), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.w)
        return T.add_bias(y, self.b) if self.b is not None else y

    def named_params(self, prefix):
        yield prefix + ".w", self.w
        if self.b is not None:
            yield prefix + ".b", self.b


class Conv:
    def __init__(self, rng, cin: int, cout: int, k: int, stride: int = 1, padding: int = 0):
        self.w = _he_normal(rng, (cout, cin, k, k), cin * k * k)
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.w, self.stride, self.padding)

    def named_params(self, prefix):
        yield prefix + ".w", self.w


class BatchNorm:
    def __init__(self, channels: int):
        self.scale = Tensor(np.ones(channels), requires_grad=True)
        self.shift = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def forward(self, x: Tensor, training: bool) -> Tensor:
        return T.batch_norm2d(
            x, self.scale, self.shift, self.running_mean, self.running_var, training=training
        )

    def named_params(self, prefix):
        yield prefix + ".scale", self.scale
        yield prefix + ".shift", self.shift

    def named_buffers(self, prefix):
        yield prefix + ".running_mean", self.running_mean
        yield prefix + ".running_var", self.running_var


class ResidualBlock:
    """conv-BN-ReLU x2 with identity shortcut, or 1x1 projection when
    the stride or channel count changes."""

    def __init__(self, rng, cin: int, cout: int, stride: int):
        self.conv1 = Conv(rng, cin, cout, 3, stride, 1)
        self.bn1 = BatchNorm(cout)
        self.conv2 = Conv(rng, cout, cout, 3, 1, 1)
        self.bn2 = BatchNorm(cout)
        if stride != 1 or cin != cout:
            self.proj_conv = Conv(rng, cin, cout, 1, stride, 0)
            self.proj_bn = BatchNorm(cout)
        else:
            self.proj_conv = None
            self.proj_bn = None

    def forward(self, x: Tensor, training: bool) -> Tensor:
        h = T.relu(self.bn1.forward(self.conv1.forward(x), training))
        h = self.bn2.forward(self.conv2.forward(h), training)
        if self.proj_conv is not None:
            sc = self.proj_bn.forward(self.proj_conv.forward(x), training)
        else:
            sc = x
        return T.relu(T.add(h, sc))

    def _parts(self, prefix):
        parts = [(prefix + ".conv1", self.conv1), (prefix + ".bn1", self.bn1),
                 (prefix + ".conv2", self.conv2), (prefix + ".bn2", self.bn2)]
        if self.proj_conv is not None:
            parts += [(prefix + ".proj_conv", self.proj_conv), (prefix + ".proj_bn", self.proj_bn)]
        return parts

    def named_params(self, prefix):
        for p, layer in self._parts(prefix):
            yield from layer.named_params(p)

    def named_buffers(self, prefix):
        for p, layer in self._parts(prefix):
            if isinstance(layer, BatchNorm):
                yield from layer.named_buffers(p)


class MlpBackbone:
    def __init__(self, rng, cfg: BackboneConfig):
        in_dim = int(np.prod(cfg.input_shape))
        self.in_dim = in_dim
        dims = [in_dim, *cfg.hidden, cfg.embedding_dim]
        self.layers = [Linear(rng, dims[i], dims[i + 1]) for i in range(len(dims) - 1)]

    def forward(self, x: Tensor, training: bool) -> Tensor:
        if x.data.ndim != 2:
            x = T.reshape(x, (x.shape[0], self.in_dim))
        h = x
        for layer in self.layers[:-1]:
            h = T.relu(layer.forward(h))
        return self.layers[-1].forward(h)

    def named_params(self, prefix):
        for i, layer in enumerate(self.layers):
            yield from layer.named_params(f"{prefix}.fc{i}")

    def named_buffers(self, prefix):
        return iter(())


class TinyResNetBackbone:
    def __init__(self, rng, cfg: BackboneConfig):
        cin = cfg.input_shape[0]
        self.stem_conv = Conv(rng, cin, cfg.channels[0], 3, 1, 1)
        self.stem_bn = BatchNorm(cfg.channels[0])
        self.stages: list[list[ResidualBlock]] = []
        prev = cfg.channels[0]
        for stage_idx, (n_blocks, ch) in enumerate(zip(cfg.blocks, cfg.channels)):
            blocks = []
            for b in range(n_blocks):
                stride = 2 if (stage_idx > 0 and b == 0) else 1
                blocks.append(ResidualBlock(rng, prev, ch, stride))
                prev = ch
            self.stages.append(blocks)
        self.embed = Linear(rng, prev, cfg.embedding_dim)

    def forward(self, x: Tensor, training: bool) -> Tensor:
        h = T.relu(self.stem_bn.forward(self.stem_conv.forward(x), training))
        for blocks in self.stages:
            for block in blocks:
                h = block.forward(h, training)
        return self.embed.forward(T.global_avg_pool(h))

    def named_params(self, prefix):
        yield from self.stem_conv.named_params(prefix + ".stem_conv")
        yield from self.stem_bn.named_params(prefix + ".stem_bn")
        for si, blocks in enumerate(self.stages):
            for bi, block in enumerate(blocks):
                yield from block.named_params(f"{prefix}.stage{si}.block{bi}")
        yield from self.embed.named_params(prefix + ".embed")

    def named_buffers(self, prefix):
        yield from self.stem_bn.named_buffers(prefix + ".stem_bn")
        for si, blocks in enumerate(self.stages):
            for bi, block in enumerate(blocks):
                yield from block.named_buffers(f"{prefix}.stage{si}.block{bi}")


class PsnLayer:
    """Trainable wrapper around the squashing map; parameters are
    shape-(1,) tensors shared by every feature dimension."""

    def __init__(self, params: PsnParams):
        self.alpha = Tensor(np.array([params.alpha]), requires_grad=params.alpha_trainable)
        self.beta = Tensor(np.array([params.beta]), requires_grad=params.beta_trainable)
        self.gamma = Tensor(np.array([params.gamma]), requires_grad=params.gamma_trainable)

    def forward(self, x: Tensor) -> Tensor:
        return psn_apply(x, self.alpha, self.beta, self.gamma)

    def project(self) -> None:
        # alpha and beta must stay positive for the map to stay increasing
        np.clip(self.alpha.data, POSITIVITY_FLOOR, None, out=self.alpha.data)
        np.clip(self.beta.data, POSITIVITY_FLOOR, None, out=self.beta.data)

    def current(self) -> tuple[float, float, float]:
        return float(self.alpha.data[0]), float(self.beta.data[0]), float(self.gamma.data[0])

    def named_params(self, prefix):
        for name, t in (("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)):
            if t.requires_grad:
                yield f"{prefix}.{name}", t

    def named_buffers(self, prefix):
        # frozen scalars still belong in checkpoints
        for name, t in (("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)):
            if not t.requires_grad:
                yield f"{prefix}.{name}", t.data


@dataclass
class PsnetModel:
    backbone: MlpBackbone | TinyResNetBackbone
    psn: PsnLayer | None
    classifier: Tensor  # [num_classes, embedding_dim]
    classifier_bias: Tensor | None  # CrossEntropy only
    loss_kind: LossKind
    config: BackboneConfig
    num_classes: int
    psn_before_norm: bool = True
    training: bool = field(default=True)

    def set_training(self, flag: bool) -> None:
        self.training = flag

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = list(self.backbone.named_params("backbone"))
        if self.psn is not None:
            out.extend(self.psn.named_params("psn"))
        out.append(("classifier.w", self.classifier))
        if self.classifier_bias is not None:
            out.append(("classifier.b", self.classifier_bias))
        names = [n for n, _ in out]
        assert len(names) == len(set(names)), "duplicate parameter name"
        return out

    def named_state(self) -> list[tuple[str, np.ndarray]]:
        """Every array a checkpoint must capture: parameters plus buffers."""
        out = [(n, t.data) for n, t in self.named_parameters()]
        out.extend(self.backbone.named_buffers("backbone"))
        if self.psn is not None:
            out.extend(self.psn.named_buffers("psn"))
        return out

    def zero_grad(self) -> None:
        for _, t in self.named_parameters():
            t.zero_grad()


def build_model(
    cfg: BackboneConfig,
    mode: PsnMode,
    num_classes: int,
    seed: int,
    loss: LossKind = CrossEntropy(),
    psn_before_norm: bool = True,
) -> PsnetModel:
    """Deterministically initialized model; same inputs give bitwise-
    identical parameters.  The classifier carries a bias only under
    CrossEntropy (the margin losses are bias-free by construction)."""
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    rng = np.random.default_rng([int(seed), 0])
    if cfg.kind == "mlp":
        backbone = MlpBackbone(rng, cfg)
    else:
        backbone = TinyResNetBackbone(rng, cfg)
    params = psn_from_mode(mode)
    psn = PsnLayer(params) if params is not None else None
    classifier = _he_normal(rng, (num_classes, cfg.embedding_dim), cfg.embedding_dim)
    bias = Tensor(np.zeros(num_classes), requires_grad=True) if isinstance(loss, CrossEntropy) else None
    return PsnetModel(backbone, psn, classifier, bias, loss, cfg, num_classes, psn_before_norm)


def forward_features(model: PsnetModel, batch: Tensor) -> Tensor:
    """Abstract feature vectors [N, embedding_dim], before squashing."""
    return model.backbone.forward(batch, model.training)


def forward_embedding(model: PsnetModel, batch: Tensor) -> Tensor:
    """The vector the class-score computation consumes.

    With squashing enabled this is psn(features); under the reversed
    ordering switch (margin losses only) it is psn applied to the
    unit-normalized features instead.
    """
    feats = forward_features(model, batch)
    if model.psn is None:
        return feats
    if model.psn_before_norm or isinstance(model.loss_kind, CrossEntropy):
        return model.psn.forward(feats)
    return model.psn.forward(T.l2_normalize_rows(feats))


def forward_logits(model: PsnetModel, batch: Tensor) -> Tensor:
    """Class scores [N, K]; for the margin losses these are the loss
    module's margin-free logits over the same classifier weights."""
    emb = forward_embedding(model, batch)
    return inference_logits(model.loss_kind, emb, model.classifier, model.classifier_bias)


def param_count(model: PsnetModel) -> int:
    return sum(t.size for _, t in model.named_parameters())
