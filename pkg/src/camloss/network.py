"""Small plain CNN: 3x3 conv + ReLU blocks, global average pooling, bias-free head.

The head has no bias so that every logit is exactly the spatial mean of the
corresponding class activation map.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import checkpoint
from . import tensor as T

BACKBONE = "backbone"
HEAD = "head"
ALL = "all"

HEAD_WEIGHT = "head.weight"


@dataclass(frozen=True)
class NetworkConfig:
    input_channels: int = 1
    input_size: int = 64
    class_count: int = 4
    # (out_channels, stride) per 3x3 block; the last block's width is K
    blocks: tuple[tuple[int, int], ...] = ((8, 1), (16, 2), (32, 2), (64, 2))

    @property
    def final_channels(self) -> int:
        return self.blocks[-1][0]

    def paddings(self) -> list[tuple[int, int]]:
        """Per-block (before, after) padding that makes every output size exact."""
        pads = []
        size = self.input_size
        for _, stride in self.blocks:
            # stride 1 keeps the size; otherwise trim the bottom/right pad so the
            # division is exact (matches floor-mode "same" convolution)
            after = 1 if stride == 1 else (2 - size) % stride
            pads.append((1, after))
            size = (size + 1 + after - 3) // stride + 1
        return pads

    def spatial_sizes(self) -> list[int]:
        sizes = []
        size = self.input_size
        for (_, stride), (before, after) in zip(self.blocks, self.paddings()):
            size = (size + before + after - 3) // stride + 1
            sizes.append(size)
        return sizes

    def validate(self) -> None:
        if self.class_count < 2:
            raise ValueError(f"class_count must be at least 2, got {self.class_count}")
        if self.input_channels < 1 or self.input_size < 1:
            raise ValueError("input_channels and input_size must be positive")
        if not self.blocks:
            raise ValueError("network needs at least one conv block")
        for out, stride in self.blocks:
            if out < 1 or stride < 1:
                raise ValueError(f"bad block spec ({out}, {stride})")
        final = self.spatial_sizes()[-1]
        if final < 2:
            raise ValueError(
                f"final feature map is {final}x{final}; min-max normalization needs at least 2x2"
            )

    def scaled(self, width: float) -> "NetworkConfig":
        blocks = tuple((max(1, int(round(c * width))), s) for c, s in self.blocks)
        return NetworkConfig(self.input_channels, self.input_size, self.class_count, blocks)


class ForwardResult(NamedTuple):
    features: T.Tensor  # [N,K,H,W], last conv block after ReLU
    pooled: T.Tensor  # [N,K]
    logits: T.Tensor  # [N,n]


@dataclass
class Network:
    config: NetworkConfig
    params: dict[str, T.Tensor] = field(default_factory=dict)

    @property
    def head(self) -> T.Tensor:
        return self.params[HEAD_WEIGHT]

    def parameters(self, group: str = ALL) -> list[str]:
        return parameters(self, group)

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {state[name].shape} vs {p.shape}")
            p.data = np.array(state[name], dtype=p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def clone(self) -> "Network":
        twin = Network(self.config)
        for name, p in self.params.items():
            twin.params[name] = T.Tensor(p.data.copy(), requires_grad=p.requires_grad, name=name)
        return twin

    def frozen(self) -> "Network":
        """Copy whose parameters never record onto a tape."""
        twin = self.clone()
        for p in twin.params.values():
            p.requires_grad = False
        return twin

def build(config: NetworkConfig, seed: int) -> Network:
    """Initialise every weight from U(-b, b) with b = sqrt(6 / fan_in); conv biases start at 0."""
    config.validate()
    rng = np.random.default_rng(seed)
    dtype = T.get_dtype()
    net = Network(config)
    cin = config.input_channels
    for i, (cout, _) in enumerate(config.blocks, start=1):
        bound = np.sqrt(6.0 / (cin * 9))
        kernels = rng.uniform(-bound, bound, size=(cout, cin, 3, 3)).astype(dtype)
        net.params[f"conv{i}.weight"] = T.Tensor(kernels, requires_grad=True, name=f"conv{i}.weight")
        net.params[f"conv{i}.bias"] = T.Tensor(
            np.zeros(cout, dtype), requires_grad=True, name=f"conv{i}.bias"
        )
        cin = cout
    bound = np.sqrt(6.0 / cin)
    head = rng.uniform(-bound, bound, size=(config.class_count, cin)).astype(dtype)
    net.params[HEAD_WEIGHT] = T.Tensor(head, requires_grad=True, name=HEAD_WEIGHT)
    return net


def forward(net: Network, batch, tape: T.Tape | None = None) -> ForwardResult:
    """Run the network; records onto ``tape`` when one is given."""
    if tape is not None:
        with tape:
            return forward(net, batch)
    x = T.as_tensor(batch)
    cfg = net.config
    expected = (cfg.input_channels, cfg.input_size, cfg.input_size)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ValueError(f"batch shape {x.shape} does not match network input {expected}")
    # the conv stack runs channel-major; features come back as [N,K,H,W]
    h = T.transpose(x, (1, 0, 2, 3))
    for i, ((_, stride), pad) in enumerate(zip(cfg.blocks, cfg.paddings()), start=1):
        weight, bias = net.params[f"conv{i}.weight"], net.params[f"conv{i}.bias"]
        h = T.relu(T.conv2d(h, weight, bias, stride, pad, layout="CNHW"))
    h = T.transpose(h, (1, 0, 2, 3))
    pooled = T.global_average_pool(h)
    logits = T.linear(pooled, net.head)
    return ForwardResult(h, pooled, logits)


def parameters(net: Network, group: str = ALL) -> list[str]:
    if group == ALL:
        return list(net.params)
    if group == HEAD:
        return [HEAD_WEIGHT]
    if group == BACKBONE:
        return [name for name in net.params if name != HEAD_WEIGHT]
    raise ValueError(f"unknown parameter group {group!r}")


def _arch_tensors(cfg: NetworkConfig) -> dict[str, np.ndarray]:
    return {
        "arch.input": np.array([cfg.input_channels, cfg.input_size, cfg.class_count], np.float32),
        "arch.blocks": np.array(cfg.blocks, np.float32).reshape(-1, 2),
    }


def save(net: Network, path) -> None:
    tensors = _arch_tensors(net.config)
    tensors.update({name: p.data for name, p in net.params.items()})
    checkpoint.write(path, tensors)


def from_tensors(tensors: dict[str, np.ndarray]) -> Network:
    try:
        channels, size, classes = (int(v) for v in tensors["arch.input"])
        blocks = tuple((int(c), int(s)) for c, s in tensors["arch.blocks"])
    except (KeyError, ValueError) as exc:
        raise checkpoint.CheckpointError("checkpoint lacks architecture tensors") from exc
    config = NetworkConfig(channels, size, classes, blocks)
    net = build(config, seed=0)
    for name, p in net.params.items():
        if name not in tensors:
            raise checkpoint.CheckpointError(f"checkpoint is missing parameter {name!r}")
        if tensors[name].shape != p.shape:
            raise checkpoint.CheckpointError(
                f"parameter {name!r} has shape {tensors[name].shape}, expected {p.shape}"
            )
        p.data = np.array(tensors[name], dtype=T.get_dtype())
    return net


def load(path) -> Network:
    return from_tensors(checkpoint.read(path))
