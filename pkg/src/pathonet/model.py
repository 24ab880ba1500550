"""PathoNet: a U-shaped density-map regressor built from residual dilated
inception modules (RDIMs), plus its checkpoint format."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .tensor import (
    ConvSpec,
    ShapeError,
    Tensor,
    add,
    conv2d,
    duplicate_channels,
    max_pool2,
    relu,
    upsample2,
)

DEFAULT_WIDTHS = (16, 32, 64, 128)
CHECKPOINT_MAGIC = b"PNET"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # "conv" or "up"
    in_channels: int
    out_channels: int
    kernel_size: int = 3
    dilation: int = 1

    @property
    def conv(self) -> ConvSpec:
        return ConvSpec(self.kernel_size, self.in_channels, self.out_channels, dilation=self.dilation)

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == "up":
            return (self.in_channels, self.out_channels, 2, 2)
        return self.conv.weight_shape

    @property
    def fan_in(self) -> int:
        if self.kind == "up":
            return self.in_channels
        return self.in_channels * self.kernel_size ** 2


def _rdim_layers(prefix: str, cin: int, cout: int, dilation: int, decoder: bool) -> list[LayerSpec]:
    layers = [
        LayerSpec(f"{prefix}.a1", "conv", cin, cout),
        LayerSpec(f"{prefix}.a2", "conv", cout, cout),
        LayerSpec(f"{prefix}.b1", "conv", cin, cout, dilation=dilation),
        LayerSpec(f"{prefix}.b2", "conv", cout, cout, dilation=dilation),
    ]
    if decoder:
        layers.append(LayerSpec(f"{prefix}.proj", "conv", cin, cout, kernel_size=1))
    return layers


@dataclass(frozen=True)
class ArchDescriptor:
    """Layer widths and wiring of a PathoNet instance.

    ``widths`` are the stem width followed by the three encoder output widths;
    each encoder RDIM doubles its input width.  The decoder runs a bottleneck
    RDIM at twice the deepest width, then three upsample/skip/RDIM stages
    mirroring the encoder.
    """

    widths: tuple[int, ...] = DEFAULT_WIDTHS
    dilation: int = 4
    skip: str = "add"
    head_width: int | None = None
    in_channels: int = 3
    out_channels: int = 3

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        object.__setattr__(self, "widths", widths)
        if len(widths) != 4 or min(widths) < 1:
            raise ValueError(f"widths must be four positive integers, got {widths}")
        for lo, hi in zip(widths, widths[1:]):
            if hi != 2 * lo:
                raise ValueError(f"encoder RDIMs double the width; inconsistent widths {widths}")
        if self.skip != "add":
            raise ValueError(f"unsupported skip connection type {self.skip!r}")
        if self.head_width is None:
            object.__setattr__(self, "head_width", widths[1])
        if self.dilation < 1:
            raise ValueError("dilation must be positive")

    @classmethod
    def from_base(cls, base: int, **kw) -> "ArchDescriptor":
        return cls(widths=(base, 2 * base, 4 * base, 8 * base), **kw)

    @property
    def decoder_widths(self) -> tuple[int, int, int, int]:
        w = self.widths
        return (2 * w[3], w[3], w[2], w[1])

    def layers(self) -> list[LayerSpec]:
        w, dw, dil = self.widths, self.decoder_widths, self.dilation
        out = [
            LayerSpec("stem.0", "conv", self.in_channels, w[0]),
            LayerSpec("stem.1", "conv", w[0], w[0]),
        ]
        for k in range(1, 4):
            out += _rdim_layers(f"enc{k}", w[k - 1], w[k], dil, decoder=False)
        out += _rdim_layers("dec0", w[3], dw[0], dil, decoder=True)
        for k in range(1, 4):
            out.append(LayerSpec(f"up{k}", "up", dw[k - 1], dw[k]))
            out.append(LayerSpec(f"skip{k}", "conv", w[4 - k], dw[k], kernel_size=1))
            out += _rdim_layers(f"dec{k}", dw[k], dw[k], dil, decoder=True)
        hw = self.head_width
        out += [
            LayerSpec("head.0", "conv", dw[3], hw, kernel_size=1),
            LayerSpec("head.1", "conv", hw, hw, kernel_size=1),
            LayerSpec("head.2", "conv", hw, self.out_channels, kernel_size=1),
        ]
        return out

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes = []
        for layer in self.layers():
            shapes.append((f"{layer.name}.weight", layer.weight_shape))
            shapes.append((f"{layer.name}.bias", (layer.out_channels,)))
        return shapes

    def to_dict(self) -> dict:
        return {
            "widths": list(self.widths),
            "dilation": self.dilation,
            "skip": self.skip,
            "head_width": self.head_width,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
        }


@dataclass
class ModelParams:
    arch: ArchDescriptor
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def layer(self, name: str) -> tuple[Tensor, Tensor]:
        return self.tensors[f"{name}.weight"], self.tensors[f"{name}.bias"]

    def requires_grad_(self, flag: bool = True) -> "ModelParams":
        for t in self.tensors.values():
            t.requires_grad = flag
        return self

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.arch, {k: Tensor(t.data, dtype=dtype, requires_grad=t.requires_grad)
                                       for k, t in self.tensors.items()})

    def block(self, prefix: str) -> "RdimBlock":
        specs = {l.name.split(".")[1]: l for l in self.arch.layers() if l.name.startswith(prefix + ".")}
        if not specs:
            raise KeyError(prefix)
        return RdimBlock(
            variant="decoder" if "proj" in specs else "encoder",
            in_channels=specs["a1"].in_channels,
            out_channels=specs["a1"].out_channels,
            convs={k: (s.conv, *self.layer(s.name)) for k, s in specs.items()},
        )


@dataclass
class RdimBlock:
    variant: str
    in_channels: int
    out_channels: int
    convs: dict[str, tuple[ConvSpec, Tensor, Tensor]]

    def __post_init__(self):
        if self.variant == "encoder" and self.out_channels != 2 * self.in_channels:
            raise ValueError("encoder RDIM needs out_channels == 2 * in_channels")
        if self.variant == "decoder":
            if "proj" not in self.convs or self.convs["proj"][0].out_channels != self.out_channels:
                raise ValueError("decoder RDIM needs a projection matching its output width")
        elif self.variant != "encoder":
            raise ValueError(f"unknown RDIM variant {self.variant!r}")


def _conv(x: Tensor, entry: tuple[ConvSpec, Tensor, Tensor]) -> Tensor:
    spec, w, b = entry
    return conv2d(x, spec, w, b)


def rdim_forward(block: RdimBlock, x: Tensor) -> Tensor:
    """Plain 3x3 path + dilated 3x3 path + residual.

    The encoder residual is the input duplicated along channels; the decoder
    residual is a linear 1x1 projection of the input.
    """
    if x.shape[1] != block.in_channels:
        raise ShapeError(f"RDIM expects {block.in_channels} channels, got {x.shape[1]}")
    c = block.convs
    path_a = relu(_conv(relu(_conv(x, c["a1"])), c["a2"]))
    path_b = relu(_conv(relu(_conv(x, c["b1"])), c["b2"]))
    residual = duplicate_channels(x) if block.variant == "encoder" else _conv(x, c["proj"])
    return add(add(path_a, path_b), residual)


def build_pathonet(widths=DEFAULT_WIDTHS, seed: int = 0, dtype=np.float32, **arch_kw) -> ModelParams:
    """Create a PathoNet with He-normal weights and zero biases.

    The final head layer starts at zero so an untrained network predicts an
    all-zero density map.  ``widths`` may be a single base width.
    """
    if isinstance(widths, (int, np.integer)):
        arch = ArchDescriptor.from_base(int(widths), **arch_kw)
    else:
        arch = ArchDescriptor(widths=tuple(widths), **arch_kw)
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    for layer in arch.layers():
        if layer.name == "head.2":
            w = np.zeros(layer.weight_shape)
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / layer.fan_in), size=layer.weight_shape)
        tensors[f"{layer.name}.weight"] = Tensor(w, dtype=dtype)
        tensors[f"{layer.name}.bias"] = Tensor(np.zeros(layer.out_channels), dtype=dtype)
    return ModelParams(arch, tensors)


def _as_batch(image) -> Tensor:
    if isinstance(image, Tensor):
        return image if image.data.ndim == 4 else Tensor(image.data[None], requires_grad=image.requires_grad)
    arr = np.asarray(image)
    if arr.ndim == 3:
        arr = arr[None]
    return Tensor(arr, dtype=arr.dtype if arr.dtype == np.float64 else np.float32)


def forward(params: ModelParams, image) -> Tensor:
    """Density maps for a batch (N x 3 x H x W) or single (3 x H x W) image.

    Inputs are expected in [0, 1]; H and W must be divisible by 8.  The head
    is linear, so outputs can be negative.
    """
    arch = params.arch
    x = _as_batch(image)
    if x.data.ndim != 4 or x.shape[1] != arch.in_channels:
        raise ShapeError(f"expected N x {arch.in_channels} x H x W input, got {x.shape}")
    if x.shape[2] % 8 or x.shape[3] % 8:
        raise ShapeError(f"spatial dims must be divisible by 8, got {x.shape[2]}x{x.shape[3]}")

    def conv(name, inp, k=3):
        w, b = params.layer(name)
        spec = ConvSpec(k, w.shape[1], w.shape[0])
        return conv2d(inp, spec, w, b)

    x = relu(conv("stem.1", relu(conv("stem.0", x))))
    skips = []
    for k in range(1, 4):
        x = rdim_forward(params.block(f"enc{k}"), x)
        skips.append(x)
        x = max_pool2(x)
    x = rdim_forward(params.block("dec0"), x)
    for k in range(1, 4):
        up = relu(upsample2(x, *params.layer(f"up{k}")))
        skip = relu(conv(f"skip{k}", skips[3 - k], k=1))
        x = rdim_forward(params.block(f"dec{k}"), add(up, skip))
    for name in ("head.0", "head.1", "head.2"):
        x = conv(name, x, k=1)
    return x


def predict(params: ModelParams, image: np.ndarray) -> np.ndarray:
    """Run inference on an 8-bit H x W x 3 image; returns a 3 x H x W map.

    Sides that are not a multiple of 8 are edge-padded for the forward pass
    and cropped back afterwards.
    """
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeError(f"expected H x W x 3 RGB image, got {arr.shape}")
    h, w = arr.shape[:2]
    ph, pw = -h % 8, -w % 8
    if ph or pw:
        arr = np.pad(arr, ((0, ph), (0, pw), (0, 0)), mode="edge")
    x = (arr.astype(np.float32) / 255.0).transpose(2, 0, 1)
    return forward(params, x).data[0, :, :h, :w]


# ---------------------------------------------------------------------------
# checkpoints

def _descriptor_blob(arch: ArchDescriptor) -> bytes:
    doc = arch.to_dict()
    doc["params"] = [[name, list(shape)] for name, shape in arch.param_shapes()]
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(params: ModelParams, path: str | os.PathLike) -> None:
    """Write ``PNET`` magic, u32 version, u32 descriptor length, JSON
    descriptor, then every tensor as little-endian float32 in descriptor order."""
    blob = _descriptor_blob(params.arch)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for name, shape in params.arch.param_shapes():
            data = params.tensors[name].data
            if data.shape != tuple(shape):
                raise CheckpointError(f"tensor {name} has shape {data.shape}, descriptor says {shape}")
            fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def load_checkpoint(path: str | os.PathLike) -> ModelParams:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12:
        raise CheckpointError("truncated checkpoint header")
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {raw[:4]!r}, not a PathoNet checkpoint")
    version, blob_len = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = 12 + blob_len
    if len(raw) < start:
        raise CheckpointError("truncated checkpoint descriptor")
    try:
        doc = json.loads(raw[12:start].decode("utf-8"))
        listed = [(name, tuple(shape)) for name, shape in doc.pop("params")]
        arch = ArchDescriptor(**{**doc, "widths": tuple(doc["widths"])})
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"malformed checkpoint descriptor: {exc}") from exc
    expected = arch.param_shapes()
    if listed != expected:
        raise CheckpointError("descriptor parameter list disagrees with its architecture")
    n_floats = sum(int(np.prod(shape)) for _, shape in expected)
    body = raw[start:]
    if len(body) < 4 * n_floats:
        raise CheckpointError(f"truncated checkpoint: {len(body)} tensor bytes, expected {4 * n_floats}")
    if len(body) > 4 * n_floats:
        raise CheckpointError(f"checkpoint has {len(body) - 4 * n_floats} trailing bytes after tensors")
    flat = np.frombuffer(body, dtype="<f4")
    tensors, offset = {}, 0
    for name, shape in expected:
        size = int(np.prod(shape))
        tensors[name] = Tensor(flat[offset:offset + size].reshape(shape).astype(np.float32))
        offset += size
    return ModelParams(arch, tensors)
