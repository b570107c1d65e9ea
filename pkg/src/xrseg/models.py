"""SegNet, residual U-Net and plain U-Net built from tensor_core ops.

A :class:`Model` owns its parameters as a flat name -> Tensor map (names
such as ``enc0.conv1.weight``) plus batch-norm running statistics. The
builders register parameters in a fixed order from a seeded generator, so
the same :class:`ModelSpec` always yields the same initial weights.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Callable

import numpy as np

from .tensor_core import (
    RunningStats,
    ShapeError,
    Tensor,
    add,
    batchnorm2d,
    concat_channels,
    conv2d,
    maxpool2d_indices,
    maxunpool2d,
    no_grad,
    relu,
    sigmoid,
    upsample_nearest2x,
)

ARCHS = ("segnet", "resunet", "unet")
_DEFAULT_BASE = {"segnet": 32, "resunet": 16, "unet": 16}
_DEFAULT_DEPTH = {"segnet": 4, "resunet": 3, "unet": 3}


@dataclass(frozen=True)
class ModelSpec:
    arch: str = "segnet"
    in_channels: int = 1
    base_channels: int | None = None
    depth: int | None = None
    input_hw: tuple[int, int] = (128, 128)
    seed: int = 0

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown architecture {self.arch!r}; expected one of {ARCHS}")
        if self.base_channels is None:
            object.__setattr__(self, "base_channels", _DEFAULT_BASE[self.arch])
        if self.depth is None:
            object.__setattr__(self, "depth", _DEFAULT_DEPTH[self.arch])
        object.__setattr__(self, "input_hw", tuple(int(v) for v in self.input_hw))
        if self.base_channels < 1 or self.depth < 1 or self.in_channels < 1:
            raise ValueError("base_channels, depth and in_channels must all be >= 1")
        step = 2**self.depth
        if any(v <= 0 or v % step for v in self.input_hw):
            raise ValueError(f"input_hw {self.input_hw} must be divisible by 2^depth = {step}")

    def to_text(self) -> str:
        h, w = self.input_hw
        return "\n".join(
            [
                f"arch={self.arch}",
                f"in_channels={self.in_channels}",
                f"base_channels={self.base_channels}",
                f"depth={self.depth}",
                f"input_hw={h}x{w}",
                f"seed={self.seed}",
            ]
        )

    @classmethod
    def from_mapping(cls, kv: dict[str, str]) -> "ModelSpec":
        known = {f.name for f in fields(cls)}
        args: dict = {}
        for key, raw in kv.items():
            if key not in known:
                continue
            if key == "arch":
                args[key] = raw
            elif key == "input_hw":
                h, _, w = raw.partition("x")
                args[key] = (int(h), int(w or h))
            else:
                args[key] = int(raw)
        return cls(**args)


class Model:
    """Parameter container plus an architecture-specific forward pass."""

    def __init__(self, spec: ModelSpec, dtype=np.float32):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, RunningStats] = {}
        self._rng = np.random.default_rng(spec.seed)
        self._forward_impl: Callable[[Tensor, str], Tensor] | None = None

    # -- registration -------------------------------------------------
    def _param(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name}")
        t = Tensor(data.astype(self.dtype), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def add_conv(self, name: str, cin: int, cout: int, k: int) -> None:
        fan_in = cin * k * k
        w = self._rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, k, k))
        self._param(f"{name}.weight", w)
        self._param(f"{name}.bias", np.zeros(cout))

    def add_bn(self, name: str, channels: int) -> None:
        self._param(f"{name}.gamma", np.ones(channels))
        self._param(f"{name}.beta", np.zeros(channels))
        self.buffers[name] = RunningStats.fresh(channels, self.dtype)

    # -- layer application --------------------------------------------
    def conv(self, name: str, x: Tensor, stride: int = 1) -> Tensor:
        w = self.params[f"{name}.weight"]
        return conv2d(x, w, self.params[f"{name}.bias"], stride=stride, padding=w.shape[-1] // 2)

    def bn(self, name: str, x: Tensor, mode: str) -> Tensor:
        return batchnorm2d(x, self.params[f"{name}.gamma"], self.params[f"{name}.beta"], self.buffers[name], mode)

    def conv_bn_relu(self, name: str, x: Tensor, mode: str, stride: int = 1) -> Tensor:
        return relu(self.bn(f"{name}.bn", self.conv(f"{name}.conv", x, stride), mode))

    def add_conv_bn(self, name: str, cin: int, cout: int, k: int = 3) -> None:
        self.add_conv(f"{name}.conv", cin, cout, k)
        self.add_bn(f"{name}.bn", cout)

    # -- public API ---------------------------------------------------
    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def forward(self, batch: Tensor | np.ndarray, mode: str = "eval") -> Tensor:
        """Per-pixel foreground probability map of shape B×1×H×W.

        In ``train`` mode ops are recorded on the caller's active tape and
        batch-norm uses batch statistics; ``eval`` records nothing and uses
        the running statistics.
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"unknown mode {mode!r}")
        x = batch if isinstance(batch, Tensor) else Tensor(batch, dtype=self.dtype)
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ShapeError(f"expected B×{self.spec.in_channels}×H×W input, got {x.shape}")
        if tuple(x.shape[2:]) != self.spec.input_hw:
            raise ShapeError(f"input spatial size {x.shape[2:]} != model input_hw {self.spec.input_hw}")
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype))
        if mode == "eval":
            with no_grad():
                return self._forward_impl(x, mode)
        return self._forward_impl(x, mode)

    __call__ = forward


def _widths(spec: ModelSpec) -> list[int]:
    return [spec.base_channels * 2**i for i in range(spec.depth + 1)]


def build_segnet(spec: ModelSpec, dtype=np.float32) -> Model:
    if spec.arch != "segnet":
        raise ValueError(f"build_segnet got arch {spec.arch!r}")
    m = Model(spec, dtype)
    ch = _widths(spec)
    depth = spec.depth
    cin = spec.in_channels
    for i in range(depth):
        m.add_conv_bn(f"enc{i}.0", cin, ch[i])
        m.add_conv_bn(f"enc{i}.1", ch[i], ch[i])
        cin = ch[i]
    for i in reversed(range(depth)):
        out = ch[i - 1] if i > 0 else ch[0]
        m.add_conv_bn(f"dec{i}.0", ch[i], ch[i])
        m.add_conv_bn(f"dec{i}.1", ch[i], out)
    m.add_conv("head", ch[0], 1, 1)

    def forward(x: Tensor, mode: str) -> Tensor:
        pools = []
        for i in range(depth):
            x = m.conv_bn_relu(f"enc{i}.0", x, mode)
            x = m.conv_bn_relu(f"enc{i}.1", x, mode)
            hw = x.shape[2:]
            x, idx = maxpool2d_indices(x)
            pools.append((idx, hw))
        for i in reversed(range(depth)):
            idx, hw = pools[i]
            x = maxunpool2d(x, idx, hw)
            x = m.conv_bn_relu(f"dec{i}.0", x, mode)
            x = m.conv_bn_relu(f"dec{i}.1", x, mode)
        return sigmoid(m.conv("head", x))

    m._forward_impl = forward
    return m


def _add_plain_block(m: Model, name: str, cin: int, cout: int) -> None:
    m.add_conv_bn(f"{name}.a", cin, cout)
    m.add_conv_bn(f"{name}.b", cout, cout)


def _plain_block(m: Model, name: str, x: Tensor, mode: str, stride: int) -> Tensor:
    x = m.conv_bn_relu(f"{name}.a", x, mode, stride)
    return m.conv_bn_relu(f"{name}.b", x, mode)


def add_residual_block(m: Model, name: str, cin: int, cout: int, stride: int) -> None:
    m.add_conv_bn(f"{name}.a", cin, cout)
    m.add_conv_bn(f"{name}.b", cout, cout)
    if stride != 1 or cin != cout:
        m.add_conv(f"{name}.proj", cin, cout, 1)


def residual_block(m: Model, name: str, x: Tensor, mode: str, stride: int = 1) -> Tensor:
    """relu(bn(conv(relu(bn(conv(x))))) + shortcut(x)); 1×1 projection when shape changes."""
    h = m.conv_bn_relu(f"{name}.a", x, mode, stride)
    h = m.bn(f"{name}.b.bn", m.conv(f"{name}.b.conv", h), mode)
    shortcut = m.conv(f"{name}.proj", x, stride) if f"{name}.proj.weight" in m.params else x
    return relu(add(h, shortcut))


def _build_unet_family(spec: ModelSpec, residual: bool, dtype) -> Model:
    m = Model(spec, dtype)
    ch = _widths(spec)
    depth = spec.depth

    def add_block(name, cin, cout, stride):
        if residual:
            add_residual_block(m, name, cin, cout, stride)
        else:
            _add_plain_block(m, name, cin, cout)

    def block(name, x, mode, stride):
        if residual:
            return residual_block(m, name, x, mode, stride)
        return _plain_block(m, name, x, mode, stride)

    m.add_conv_bn("stem", spec.in_channels, ch[0])
    cin = ch[0]
    for i in range(depth):
        add_block(f"enc{i}", cin, ch[i], 1 if i == 0 else 2)
        cin = ch[i]
    add_block("bridge", ch[depth - 1], ch[depth], 2)
    cin = ch[depth]
    for i in reversed(range(depth)):
        add_block(f"dec{i}", cin + ch[i], ch[i], 1)
        cin = ch[i]
    m.add_conv("head", ch[0], 1, 1)

    def forward(x: Tensor, mode: str) -> Tensor:
        x = m.conv_bn_relu("stem", x, mode)
        skips = []
        for i in range(depth):
            x = block(f"enc{i}", x, mode, 1 if i == 0 else 2)
            skips.append(x)
        x = block("bridge", x, mode, 2)
        for i in reversed(range(depth)):
            x = concat_channels(upsample_nearest2x(x), skips[i])
            x = block(f"dec{i}", x, mode, 1)
        return sigmoid(m.conv("head", x))

    m._forward_impl = forward
    return m


def build_resunet(spec: ModelSpec, dtype=np.float32) -> Model:
    if spec.arch != "resunet":
        raise ValueError(f"build_resunet got arch {spec.arch!r}")
    return _build_unet_family(spec, residual=True, dtype=dtype)


def build_unet(spec: ModelSpec, dtype=np.float32) -> Model:
    if spec.arch != "unet":
        raise ValueError(f"build_unet got arch {spec.arch!r}")
    return _build_unet_family(spec, residual=False, dtype=dtype)


_BUILDERS = {"segnet": build_segnet, "resunet": build_resunet, "unet": build_unet}


def build_model(spec: ModelSpec, dtype=np.float32) -> Model:
    return _BUILDERS[spec.arch](spec, dtype)


def forward(model: Model, batch: Tensor | np.ndarray, mode: str = "eval") -> Tensor:
    return model.forward(batch, mode)
