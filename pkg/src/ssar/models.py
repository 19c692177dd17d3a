"""The slice-sequence age regressor, its volumetric baseline, and weight files.

Weight file layout (all integers unsigned 64-bit little-endian)::

    b"SSAR1\\n"
    key=value\\n ...            architecture descriptor, UTF-8
    \\n                          blank line ends the descriptor
    per parameter, in declaration order:
        name length, name bytes, rank, extents..., float32 LE values
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import (
    NonFiniteError,
    Tensor,
    conv2d,
    conv3d,
    max_pool,
    reduce,
    relu,
    reshape,
    stack,
)
from .layers import BasicBlock, LstmParams, bilstm, instance_norm, linear, seq_avg_pool, uniform_init, zeros_param

MAGIC = b"SSAR1\n"


class ArchitectureMismatchError(ValueError):
    """Weights and network disagree on architecture or parameter shapes."""


class WeightFormatError(ValueError):
    """Malformed or truncated weight file."""


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


@dataclass(frozen=True)
class ResNetConfig:
    """ResNet18-style backbone layout.  Defaults are the full-size 2D network."""

    in_channels: int = 1
    widths: tuple[int, ...] = (64, 128, 256, 512)
    blocks: tuple[int, ...] = (2, 2, 2, 2)
    stem_kernel: int = 7
    stem_stride: int = 2
    maxpool: bool = True
    nd: int = 2

    def __post_init__(self):
        if len(self.widths) != len(self.blocks) or not self.widths:
            raise ValueError("widths and blocks must be non-empty and of equal length")
        if self.nd not in (2, 3):
            raise ValueError(f"nd must be 2 or 3, got {self.nd}")

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]

    def to_dict(self) -> dict[str, str]:
        return {
            "in_channels": str(self.in_channels),
            "widths": ",".join(map(str, self.widths)),
            "blocks": ",".join(map(str, self.blocks)),
            "stem_kernel": str(self.stem_kernel),
            "stem_stride": str(self.stem_stride),
            "maxpool": str(int(self.maxpool)),
            "nd": str(self.nd),
        }

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "ResNetConfig":
        return cls(
            in_channels=int(d["in_channels"]),
            widths=_ints(d["widths"]),
            blocks=_ints(d["blocks"]),
            stem_kernel=int(d["stem_kernel"]),
            stem_stride=int(d["stem_stride"]),
            maxpool=bool(int(d["maxpool"])),
            nd=int(d["nd"]),
        )


RESNET18_2D = ResNetConfig()
RESNET18_3D = ResNetConfig(stem_kernel=3, nd=3)


class ResNetBackbone:
    """Stem conv, optional max-pool, residual stages, global average pool.

    Maps a batch ``[N, C_in, *spatial]`` to features ``[N, widths[-1]]``.
    """

    def __init__(self, cfg: ResNetConfig, rng: np.random.Generator):
        self.cfg = cfg
        nd = cfg.nd
        k = cfg.stem_kernel
        c0 = cfg.widths[0]
        self.stem = uniform_init(rng, (c0, cfg.in_channels) + (k,) * nd, cfg.in_channels * k**nd)
        self.stages: list[list[BasicBlock]] = []
        c_in = c0
        for s, (width, n_blocks) in enumerate(zip(cfg.widths, cfg.blocks)):
            stage = []
            for b in range(n_blocks):
                stride = 2 if (s > 0 and b == 0) else 1
                stage.append(BasicBlock(c_in, width, stride, rng, nd=nd))
                c_in = width
            self.stages.append(stage)

    def __call__(self, x: Tensor) -> Tensor:
        cfg = self.cfg
        if x.ndim != cfg.nd + 2 or x.shape[1] != cfg.in_channels:
            raise ValueError(f"backbone expects [N, {cfg.in_channels}, {cfg.nd} spatial dims], got {x.shape}")
        for s in x.shape[2:]:
            if s < cfg.stem_kernel:
                raise ValueError(f"input spatial extent {x.shape[2:]} smaller than stem kernel {cfg.stem_kernel}")
        conv = conv2d if cfg.nd == 2 else conv3d
        with _stage("stem"):
            y = conv(x, self.stem, cfg.stem_stride, cfg.stem_kernel // 2)
            y = relu(instance_norm(y, channel_axis=1))
            if cfg.maxpool:
                y = max_pool(y, 3, 2, 1, nd=cfg.nd)
        for s, stage in enumerate(self.stages):
            with _stage(f"stage{s + 1}"):
                for block in stage:
                    y = block(y)
        with _stage("global_pool"):
            return reduce("mean", y, axes=tuple(range(2, y.ndim)))

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = [(prefix + "stem", self.stem)]
        for s, stage in enumerate(self.stages):
            for b, block in enumerate(stage):
                out += block.named_parameters(f"{prefix}layer{s + 1}.{b}.")
        return out


class _stage:
    """Re-raise non-finite errors tagged with the pipeline stage."""

    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is NonFiniteError and not str(exc).startswith("stage "):
            raise NonFiniteError(f"stage {self.name!r}: {exc}") from exc
        return False


class _Net:
    kind = ""

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        raise NotImplementedError

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def descriptor(self) -> dict[str, str]:
        raise NotImplementedError

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class SliceSeqAgeNet(_Net):
    """2D ResNet per slice, average pooling over the slice axis, BiLSTM, linear head.

    ``seq_len`` slices go in; ``seq_len // pool_k`` pooled steps reach the
    BiLSTM, and the concatenation of all its outputs feeds the regressor.
    """

    kind = "sliceseq"

    def __init__(
        self,
        seq_len: int,
        pool_k: int = 3,
        hidden: int = 64,
        backbone: ResNetConfig = RESNET18_2D,
        seed: int = 0,
    ):
        if backbone.nd != 2:
            raise ValueError("SliceSeqAgeNet needs a 2D backbone")
        if pool_k < 1 or seq_len < pool_k:
            raise ValueError(f"seq_len={seq_len} must be >= pool_k={pool_k} >= 1")
        rng = np.random.default_rng(seed)
        self.seq_len, self.pool_k, self.hidden, self.seed = seq_len, pool_k, hidden, seed
        self.backbone = ResNetBackbone(backbone, rng)
        feat = backbone.feature_dim
        self.lstm_fwd = LstmParams.init(feat, hidden, rng)
        self.lstm_bwd = LstmParams.init(feat, hidden, rng)
        width = self.n_pooled * 2 * hidden
        self.reg_W = uniform_init(rng, (1, width), width)
        self.reg_b = zeros_param((1,))

    @property
    def n_pooled(self) -> int:
        return self.seq_len // self.pool_k

    def features(self, slices: Tensor) -> Tensor:
        """Per-slice backbone features ``[n, feature_dim]``."""
        return self.backbone(slices)

    def __call__(self, slices) -> Tensor:
        if isinstance(slices, (list, tuple)):
            slices = stack(slices, axis=0)
        if slices.ndim == 3:
            slices = reshape(slices, (slices.shape[0], 1) + slices.shape[1:])
        if slices.ndim != 4 or slices.shape[0] != self.seq_len or slices.shape[1] != 1:
            raise ValueError(f"expected {self.seq_len} slices shaped [1,H,W], got tensor {slices.shape}")
        feats = self.features(slices)
        with _stage("pooling"):
            pooled = seq_avg_pool(feats, self.pool_k)
        with _stage("bilstm"):
            H = bilstm(pooled, self.lstm_fwd, self.lstm_bwd)
        with _stage("regressor"):
            out = linear(reshape(H, (H.size,)), self.reg_W, self.reg_b)
            return reshape(out, ())

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return (
            self.backbone.named_parameters("backbone.")
            + self.lstm_fwd.named_parameters("lstm_fwd.")
            + self.lstm_bwd.named_parameters("lstm_bwd.")
            + [("regressor.W", self.reg_W), ("regressor.b", self.reg_b)]
        )

    def descriptor(self) -> dict[str, str]:
        d = {"model": self.kind, "seq_len": str(self.seq_len), "pool_k": str(self.pool_k), "hidden": str(self.hidden)}
        d.update({f"backbone.{k}": v for k, v in self.backbone.cfg.to_dict().items()})
        return d


class Volumetric3DNet(_Net):
    """3D ResNet18 with instance norm, global average pooling and a linear head."""

    kind = "vol3d"

    def __init__(self, backbone: ResNetConfig = RESNET18_3D, seed: int = 0):
        if backbone.nd != 3:
            raise ValueError("Volumetric3DNet needs a 3D backbone")
        rng = np.random.default_rng(seed)
        self.seed = seed
        self.backbone = ResNetBackbone(backbone, rng)
        feat = backbone.feature_dim
        self.reg_W = uniform_init(rng, (1, feat), feat)
        self.reg_b = zeros_param((1,))

    def __call__(self, volume: Tensor) -> Tensor:
        if volume.ndim == 3:
            volume = reshape(volume, (1,) + volume.shape)
        if volume.ndim != 4 or volume.shape[0] != 1:
            raise ValueError(f"expected a [1, D, H, W] volume, got {volume.shape}")
        feats = self.backbone(reshape(volume, (1,) + volume.shape))
        with _stage("regressor"):
            out = linear(reshape(feats, (feats.size,)), self.reg_W, self.reg_b)
            return reshape(out, ())

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return self.backbone.named_parameters("backbone.") + [("regressor.W", self.reg_W), ("regressor.b", self.reg_b)]

    def descriptor(self) -> dict[str, str]:
        d = {"model": self.kind}
        d.update({f"backbone.{k}": v for k, v in self.backbone.cfg.to_dict().items()})
        return d


def sliceseq_forward(slices, net: SliceSeqAgeNet) -> Tensor:
    return net(slices)


def vol3d_forward(volume: Tensor, net: Volumetric3DNet) -> Tensor:
    return net(volume)


def param_count(net: _Net) -> int:
    return int(sum(p.size for p in net.parameters()))


def build_from_descriptor(desc: dict[str, str]):
    """Construct an (untrained) network matching a descriptor."""
    kind = desc.get("model")
    bb = ResNetConfig.from_dict({k[len("backbone.") :]: v for k, v in desc.items() if k.startswith("backbone.")})
    if kind == SliceSeqAgeNet.kind:
        return SliceSeqAgeNet(int(desc["seq_len"]), int(desc["pool_k"]), int(desc["hidden"]), bb)
    if kind == Volumetric3DNet.kind:
        return Volumetric3DNet(bb)
    raise ArchitectureMismatchError(f"unknown model kind {kind!r}")


# weight files -----------------------------------------------------------------------

_U64 = struct.Struct("<Q")


def save_weights(net: _Net, path, extra: dict[str, str] | None = None) -> None:
    """Write ``net``'s parameters.  ``extra`` keys are stored in the descriptor."""
    desc = dict(net.descriptor())
    for k, v in (extra or {}).items():
        if k in desc or "=" in k or "\n" in k + str(v):
            raise ValueError(f"invalid extra descriptor entry {k!r}")
        desc[k] = str(v)
    params = net.named_parameters()
    desc["params"] = str(len(params))
    chunks = [MAGIC]
    chunks += [f"{k}={v}\n".encode() for k, v in desc.items()]
    chunks.append(b"\n")
    for name, p in params:
        nb = name.encode()
        chunks.append(_U64.pack(len(nb)) + nb + _U64.pack(p.ndim))
        chunks += [_U64.pack(s) for s in p.shape]
        chunks.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_weight_file(path) -> tuple[dict[str, str], list[tuple[str, np.ndarray]]]:
    """Parse a weight file into its descriptor and ``(name, float32 array)`` list."""
    buf = Path(path).read_bytes()
    if not buf.startswith(MAGIC):
        raise WeightFormatError(f"{path}: not an SSAR1 weight file")
    pos = len(MAGIC)
    end = buf.find(b"\n\n", pos - 1)
    if end < 0:
        raise WeightFormatError(f"{path}: unterminated descriptor")
    desc = {}
    for line in buf[pos:end].decode().splitlines():
        if line:
            k, _, v = line.partition("=")
            desc[k] = v
    pos = end + 2
    arrays = []

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise WeightFormatError(f"{path}: truncated weight file")
        out = buf[pos : pos + n]
        pos += n
        return out

    for _ in range(int(desc.get("params", "0"))):
        (nlen,) = _U64.unpack(take(8))
        name = take(nlen).decode()
        (rank,) = _U64.unpack(take(8))
        shape = tuple(_U64.unpack(take(8))[0] for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape)
        arrays.append((name, arr))
    if pos != len(buf):
        raise WeightFormatError(f"{path}: {len(buf) - pos} trailing bytes")
    return desc, arrays


ARCH_KEYS_PREFIXES = ("model", "seq_len", "pool_k", "hidden", "backbone.")


def _arch_part(desc: dict[str, str]) -> dict[str, str]:
    return {k: v for k, v in desc.items() if k.startswith(ARCH_KEYS_PREFIXES)}


def load_weights(path, net: _Net | None = None):
    """Load weights, building the network from the file unless ``net`` is given.

    The returned network carries the full descriptor in ``net.metadata``.
    """
    desc, arrays = read_weight_file(path)
    if net is None:
        net = build_from_descriptor(desc)
    problems = []
    want_arch, got_arch = net.descriptor(), _arch_part(desc)
    for k in sorted(set(want_arch) | set(got_arch)):
        if want_arch.get(k) != got_arch.get(k):
            problems.append(f"{k}: network={want_arch.get(k)} file={got_arch.get(k)}")
    params = net.named_parameters()
    file_shapes = {n: a.shape for n, a in arrays}
    for name, p in params:
        if file_shapes.get(name) != p.shape:
            problems.append(f"{name}: network {p.shape} vs file {file_shapes.get(name)}")
    extra_names = set(file_shapes) - {n for n, _ in params}
    problems += [f"{n}: only in file, shape {file_shapes[n]}" for n in sorted(extra_names)]
    if problems:
        raise ArchitectureMismatchError("architecture mismatch:\n  " + "\n  ".join(problems))
    by_name = dict(arrays)
    for name, p in params:
        p.data = by_name[name].astype(np.float32, copy=True)
        p.grad = None
    net.metadata = desc
    return net
