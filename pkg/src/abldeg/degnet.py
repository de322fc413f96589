"""Degradation network: residual encoder, adaptive blurring layer, strided decoder."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import (Conv2dParams, Tensor, add, conv2d, mixture_blur, relu,
                       softmax_rows)
from .gausskernel import BankSpec, KernelBank, build_bank, rescale_bank

MAGIC = b"ABLDEGCK"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    """Bad magic, unsupported version, or truncated checkpoint."""


@dataclass(frozen=True)
class NetConfig:
    channels: int = 16
    num_resblocks: int = 4
    scale: int = 4
    bank: BankSpec = field(default_factory=BankSpec)

    def __post_init__(self):
        if self.scale not in (2, 4, 8):
            raise ValueError(f"scale must be 2, 4 or 8, got {self.scale}")
        if self.channels < 1 or self.num_resblocks < 0:
            raise ValueError("channels must be >= 1 and num_resblocks >= 0")

    @property
    def num_down(self) -> int:
        return int(round(math.log2(self.scale)))

    def to_dict(self) -> dict:
        return {"channels": self.channels, "num_resblocks": self.num_resblocks,
                "scale": self.scale, "bank": self.bank.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        d = dict(d)
        d["bank"] = BankSpec.from_dict(d["bank"])
        return cls(**d)


@dataclass
class ResBlock:
    conv1: Conv2dParams
    conv2: Conv2dParams

    def __call__(self, x: Tensor) -> Tensor:
        return add(x, conv2d(relu(conv2d(x, self.conv1)), self.conv2))


def _conv(rng, cin, cout, stride=1, mode="reflect", gain=2.0, damp=1.0) -> Conv2dParams:
    std = damp * math.sqrt(gain / (cin * 9))
    w = Tensor(rng.normal(0.0, std, size=(cout, cin, 3, 3)), requires_grad=True)
    b = Tensor(np.zeros(cout), requires_grad=True)
    return Conv2dParams(w, b, stride=stride, padding=1, pad_mode=mode)


@dataclass
class DegradationModel:
    config: NetConfig
    conv_in: Conv2dParams
    blocks: list[ResBlock]
    abl_logits: Tensor
    decoder: list[Conv2dParams]
    head: Conv2dParams
    bank: KernelBank

    @classmethod
    def init(cls, config: NetConfig, seed: int = 0) -> "DegradationModel":
        rng = np.random.default_rng(seed)
        c = config.channels
        conv_in = _conv(rng, 1, c)
        blocks = [ResBlock(_conv(rng, c, c), _conv(rng, c, c, damp=0.1)) for _ in range(config.num_resblocks)]
        decoder = [_conv(rng, c, c, stride=2) for _ in range(config.num_down)]
        head = _conv(rng, c, 1, gain=1.0)
        bank = build_bank(config.bank)
        logits = Tensor(np.zeros((c, len(bank))), requires_grad=True)
        return cls(config, conv_in, blocks, logits, decoder, head, bank)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("conv_in.weight", self.conv_in.weight), ("conv_in.bias", self.conv_in.bias)]
        for i, blk in enumerate(self.blocks):
            for j, conv in enumerate((blk.conv1, blk.conv2), start=1):
                out += [(f"res{i}.conv{j}.weight", conv.weight), (f"res{i}.conv{j}.bias", conv.bias)]
        out.append(("abl.logits", self.abl_logits))
        for i, conv in enumerate(self.decoder):
            out += [(f"dec{i}.weight", conv.weight), (f"dec{i}.bias", conv.bias)]
        out += [("head.weight", self.head.weight), ("head.bias", self.head.bias)]
        return out

    def parameters(self) -> list[Tensor]:
        """Learnable tensors. The kernel bank is a plain array and never appears here."""
        return [t for _, t in self.named_parameters()]

    def mixture_weights(self) -> np.ndarray:
        return softmax_rows(Tensor(self.abl_logits.data)).data

    def with_factors(self, factors) -> "DegradationModel":
        """Shallow copy sharing all learned tensors, with a rescaled bank."""
        bank = rescale_bank(self.bank, factors)
        cfg = NetConfig(self.config.channels, self.config.num_resblocks, self.config.scale, bank.spec)
        return DegradationModel(cfg, self.conv_in, self.blocks, self.abl_logits,
                                self.decoder, self.head, bank)

    # forward pieces

    def encode(self, hr: Tensor) -> Tensor:
        x = conv2d(hr, self.conv_in)
        for blk in self.blocks:
            x = blk(x)
        return x

    def abl_forward(self, feat: Tensor) -> Tensor:
        if feat.shape[1] != self.abl_logits.shape[0]:
            raise ValueError(f"feature has {feat.shape[1]} channels, ABL expects {self.abl_logits.shape[0]}")
        if self.abl_logits.shape[1] != len(self.bank):
            raise ValueError("ABL logits do not match the kernel bank size")
        return mixture_blur(feat, softmax_rows(self.abl_logits), self.bank.kernels)

    def decode(self, feat: Tensor) -> Tensor:
        s = self.config.scale
        if feat.shape[2] % s or feat.shape[3] % s:
            raise ValueError(f"spatial size {feat.shape[2:]} not divisible by scale {s}")
        x = feat
        for conv in self.decoder:
            x = relu(conv2d(x, conv))
        return conv2d(x, self.head)

    def forward(self, hr) -> Tensor:
        if not isinstance(hr, Tensor):
            hr = Tensor(hr)
        if hr.data.ndim != 4 or hr.shape[1] != 1:
            raise ValueError(f"expected input of shape (N, 1, H, W), got {hr.shape}")
        return self.decode(self.abl_forward(self.encode(hr)))

    __call__ = forward

    def degrade(self, hr: np.ndarray) -> np.ndarray:
        """Inference on a single 2-D image; output clamped to [0, 1]."""
        out = self.forward(Tensor(hr[None, None])).data[0, 0]
        return np.clip(out, 0.0, 1.0)


def save_model(model: DegradationModel, path):
    """Write the checkpoint: magic, u64 header length, JSON header, LE float64 payload."""
    manifest, blobs, offset = [], [], 0
    for name, t in model.named_parameters():
        raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        manifest.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({
        "magic": MAGIC.decode(),
        "version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "tensors": manifest,
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_model(path) -> DegradationModel:
    buf = Path(path).read_bytes()
    if len(buf) < 16 or buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a degradation-model checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", buf[8:16])
    if 16 + hlen > len(buf):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(buf[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header ({e})") from e
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    config = NetConfig.from_dict(header["config"])
    model = DegradationModel.init(config)
    params = dict(model.named_parameters())
    base = 16 + hlen
    for entry in header["tensors"]:
        start = base + entry["offset"]
        end = start + entry["nbytes"]
        if end > len(buf):
            raise CheckpointError(f"{path}: truncated payload at {entry['name']}")
        arr = np.frombuffer(buf[start:end], dtype="<f8").reshape(entry["shape"])
        target = params.get(entry["name"])
        if target is None or target.shape != arr.shape:
            raise CheckpointError(f"{path}: unexpected tensor {entry['name']} {arr.shape}")
        target.data = arr.astype(np.float64)
    missing = set(params) - {e["name"] for e in header["tensors"]}
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)}")
    return model
