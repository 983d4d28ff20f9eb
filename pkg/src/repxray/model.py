"""RepVGG blocks and models, plus the re-parameterization that fuses each
multi-branch block into a single 3x3 convolution for deployment."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, ModeError, ValidationError
from .tensor import (DEFAULT_DTYPE, BatchNormParams, batchnorm_infer, check_nchw, conv2d, dense,
                     global_avg_pool, relu)

TRAIN = "train-multibranch"
DEPLOY = "deploy-fused"

CLASS_NAMES = ("covid", "pneumonia", "normal")
DEFAULT_CHANNELS = (8, 16, 32, 64, 64)
DEFAULT_STRIDES = (1, 2, 2, 2, 2)
DEFAULT_INPUT = (1, 64, 64)


@dataclass
class RepVggBlockParams:
    conv3x3_w: np.ndarray
    bn3: BatchNormParams
    conv1x1_w: np.ndarray
    bn1: BatchNormParams
    bn_id: BatchNormParams | None = None
    stride: int = 1

    def __post_init__(self):
        cout, cin = self.conv3x3_w.shape[:2]
        if self.conv3x3_w.shape[2:] != (3, 3):
            raise DimensionError("3x3 branch kernel must be [Cout,Cin,3,3]", axis="kernel")
        if self.conv1x1_w.shape != (cout, cin, 1, 1):
            raise DimensionError(f"1x1 branch kernel must be {(cout, cin, 1, 1)}, got {self.conv1x1_w.shape}",
                                 axis="kernel")
        if self.stride not in (1, 2):
            raise ValidationError(f"stride must be 1 or 2, got {self.stride}")
        if (self.bn_id is not None) != has_identity(cin, cout, self.stride):
            raise ValidationError("identity branch present iff stride == 1 and Cin == Cout")
        for bn in (self.bn3, self.bn1, self.bn_id):
            if bn is not None and bn.channels != cout:
                raise DimensionError(f"batch-norm width {bn.channels} != Cout {cout}", axis="Cout")

    @property
    def in_channels(self):
        return self.conv3x3_w.shape[1]

    @property
    def out_channels(self):
        return self.conv3x3_w.shape[0]

    def copy(self):
        return RepVggBlockParams(self.conv3x3_w.copy(), self.bn3.copy(), self.conv1x1_w.copy(), self.bn1.copy(),
                                 None if self.bn_id is None else self.bn_id.copy(), self.stride)


@dataclass
class FusedConvParams:
    weight: np.ndarray
    bias: np.ndarray
    stride: int = 1

    padding = 1

    @property
    def in_channels(self):
        return self.weight.shape[1]

    @property
    def out_channels(self):
        return self.weight.shape[0]

    def copy(self):
        return FusedConvParams(self.weight.copy(), self.bias.copy(), self.stride)


@dataclass
class RepVggModel:
    blocks: list
    head_w: np.ndarray
    head_b: np.ndarray
    mode: str = TRAIN
    input_shape: tuple = DEFAULT_INPUT
    strides: tuple = field(init=False)
    channels: tuple = field(init=False)

    def __post_init__(self):
        if self.mode not in (TRAIN, DEPLOY):
            raise ValidationError(f"unknown mode {self.mode!r}")
        kind = RepVggBlockParams if self.mode == TRAIN else FusedConvParams
        prev = self.input_shape[0]
        for i, b in enumerate(self.blocks):
            if not isinstance(b, kind):
                raise ModeError(f"block {i} is {type(b).__name__}, expected {kind.__name__} in {self.mode} mode")
            if b.in_channels != prev:
                raise DimensionError(f"block {i} expects {b.in_channels} channels, previous stage gives {prev}",
                                     axis="C")
            prev = b.out_channels
        if self.head_w.shape[1] != prev or len(self.head_b) != self.head_w.shape[0]:
            raise DimensionError(f"head shape {self.head_w.shape} does not match {prev} features", axis="F")
        self.strides = tuple(b.stride for b in self.blocks)
        self.channels = tuple(b.out_channels for b in self.blocks)

    @property
    def num_classes(self):
        return self.head_w.shape[0]

    @property
    def dtype(self):
        return self.head_w.dtype

    def tensors(self):
        """Ordered mapping name -> array of everything the model stores."""
        out = {}
        for i, b in enumerate(self.blocks):
            p = f"blocks.{i}."
            if isinstance(b, FusedConvParams):
                out[p + "weight"] = b.weight
                out[p + "bias"] = b.bias
                continue
            out[p + "conv3x3_w"] = b.conv3x3_w
            out[p + "conv1x1_w"] = b.conv1x1_w
            for bn_name in ("bn3", "bn1", "bn_id"):
                bn = getattr(b, bn_name)
                if bn is None:
                    continue
                for attr in ("gamma", "beta", "running_mean", "running_var"):
                    out[f"{p}{bn_name}.{attr}"] = getattr(bn, attr)
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out

    def parameters(self):
        """Trainable arrays only (running statistics excluded)."""
        return {k: v for k, v in self.tensors().items() if not k.endswith(("running_mean", "running_var"))}

    def num_elements(self):
        return sum(v.size for v in self.tensors().values())

    def copy(self):
        return RepVggModel([b.copy() for b in self.blocks], self.head_w.copy(), self.head_b.copy(), self.mode,
                           tuple(self.input_shape))


def has_identity(cin, cout, stride):
    return stride == 1 and cin == cout


def init_block(rng, cin, cout, stride, dtype=DEFAULT_DTYPE):
    """He-normal branch kernels, unit batch-norms."""
    w3 = rng.normal(0.0, np.sqrt(2.0 / (cin * 9)), (cout, cin, 3, 3)).astype(dtype)
    w1 = rng.normal(0.0, np.sqrt(2.0 / cin), (cout, cin, 1, 1)).astype(dtype)
    bn_id = BatchNormParams.identity(cout, dtype) if has_identity(cin, cout, stride) else None
    return RepVggBlockParams(w3, BatchNormParams.identity(cout, dtype), w1, BatchNormParams.identity(cout, dtype),
                             bn_id, stride)


def init_model(seed=0, channels=DEFAULT_CHANNELS, strides=DEFAULT_STRIDES, input_shape=DEFAULT_INPUT,
               num_classes=len(CLASS_NAMES), dtype=DEFAULT_DTYPE) -> RepVggModel:
    if len(channels) != len(strides):
        raise ValidationError("channels and strides must have equal length")
    rng = np.random.default_rng(seed)
    blocks, cin = [], input_shape[0]
    for cout, s in zip(channels, strides):
        blocks.append(init_block(rng, cin, cout, s, dtype))
        cin = cout
    head_w = rng.normal(0.0, np.sqrt(1.0 / cin), (num_classes, cin)).astype(dtype)
    return RepVggModel(blocks, head_w, np.zeros(num_classes, dtype), TRAIN, tuple(input_shape))


def block_forward_train(x, block: RepVggBlockParams):
    """Multi-branch forward with running batch-norm statistics."""
    check_nchw(x)
    if x.shape[1] != block.in_channels:
        raise DimensionError(f"block expects {block.in_channels} channels, got {x.shape[1]}", axis="C")
    y = batchnorm_infer(conv2d(x, block.conv3x3_w, stride=block.stride, padding=1), block.bn3)
    y = y + batchnorm_infer(conv2d(x, block.conv1x1_w, stride=block.stride, padding=0), block.bn1)
    if block.bn_id is not None:
        y = y + batchnorm_infer(x, block.bn_id)
    return relu(y)


def block_forward_fused(x, block: FusedConvParams):
    return relu(conv2d(x, block.weight, block.bias, stride=block.stride, padding=1))


def block_forward(x, block):
    if isinstance(block, FusedConvParams):
        return block_forward_fused(x, block)
    return block_forward_train(x, block)


def fold_bn(conv_w, bn: BatchNormParams):
    """Fold an inference-mode batch-norm into the preceding bias-free conv.

    Returns ``(w', b')`` with ``conv(x, w') + b' == bn(conv(x, w))``.
    """
    if bn.channels != conv_w.shape[0]:
        raise DimensionError(f"batch-norm width {bn.channels} != Cout {conv_w.shape[0]}", axis="Cout")
    std = np.sqrt(bn.running_var + bn.eps)
    t = bn.gamma / std
    return conv_w * t[:, None, None, None], bn.beta - bn.running_mean * t


def pad_1x1_to_3x3(w):
    out = np.zeros(w.shape[:2] + (3, 3), dtype=w.dtype)
    out[:, :, 1, 1] = w[:, :, 0, 0]
    return out


def identity_to_conv3x3(channels, dtype=DEFAULT_DTYPE, stride=1, out_channels=None):
    """3x3 kernel whose padding-1 convolution is the identity map."""
    if stride != 1 or (out_channels is not None and out_channels != channels):
        raise ValidationError("identity branch only exists for stride 1 and Cin == Cout")
    w = np.zeros((channels, channels, 3, 3), dtype=dtype)
    w[np.arange(channels), np.arange(channels), 1, 1] = 1
    return w


def fuse_block(block: RepVggBlockParams) -> FusedConvParams:
    for name in ("bn3", "bn1", "bn_id"):
        bn = getattr(block, name)
        if bn is not None and np.any(bn.running_var + bn.eps <= 0):
            raise ValidationError(f"{name} running variance is not finalized (var + eps <= 0)")
    w3, b3 = fold_bn(block.conv3x3_w, block.bn3)
    w1, b1 = fold_bn(block.conv1x1_w, block.bn1)
    weight = w3 + pad_1x1_to_3x3(w1)
    bias = b3 + b1
    if block.bn_id is not None:
        wid, bid = fold_bn(identity_to_conv3x3(block.in_channels, block.conv3x3_w.dtype), block.bn_id)
        weight = weight + wid
        bias = bias + bid
    return FusedConvParams(weight.astype(block.conv3x3_w.dtype), bias.astype(block.conv3x3_w.dtype), block.stride)


def fuse_model(model: RepVggModel) -> RepVggModel:
    if model.mode != TRAIN:
        raise ModeError("model is already fused")
    return RepVggModel([fuse_block(b) for b in model.blocks], model.head_w.copy(), model.head_b.copy(), DEPLOY,
                       tuple(model.input_shape))


def check_input(model, x):
    check_nchw(x)
    expected = tuple(model.input_shape)
    if tuple(x.shape[1:]) != expected:
        axis = "CHW"[[a != b for a, b in zip(x.shape[1:], expected)].index(True)]
        raise DimensionError(f"model expects input [N,{','.join(map(str, expected))}], got {list(x.shape)}",
                             axis=axis)


def features(model, x, upto=None):
    """Run blocks ``0..upto`` (inclusive; all blocks if None) and return the activations."""
    check_input(model, x)
    last = len(model.blocks) - 1 if upto is None else upto
    for b in model.blocks[:last + 1]:
        x = block_forward(x, b)
    return x


def head_forward(model, feats):
    pooled = global_avg_pool(feats).reshape(feats.shape[0], -1)
    return dense(pooled, model.head_w, model.head_b)


def model_forward(model: RepVggModel, x):
    """Logits [N, num_classes] in inference mode (running batch-norm statistics)."""
    return head_forward(model, features(model, x))
