"""Feature generator, domain discriminator and task network at desk scale.

The generator is a plain conv/relu/max-pool stack (no batch norm, so every
gradient stays exactly checkable) followed by global average pooling and a
dense projection to the embedding. The two heads are small dense stacks.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import tensor as T
from .tensor import Tensor

CHECKPOINT_MAGIC = b"SADG"
CHECKPOINT_VERSION = 1


class Module:
    """Named, ordered parameter container."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def _param(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(data, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> Iterable[tuple[str, Tensor]]:
        return self.params.items()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# Kaiming-uniform with negative slope sqrt(5): gain sqrt(1/3), bound 1/sqrt(fan_in).
# The relu gain (std sqrt(2/fan_in)) starts the embedding about 100x larger, and
# the generator then escapes the adversarial game by inflating the embedding norm.
KAIMING_SLOPE = 5.0 ** 0.5


def kaiming(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    gain = np.sqrt(2.0 / (1.0 + KAIMING_SLOPE ** 2))
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class GeneratorArch:
    channels: tuple[int, ...] = (16, 32, 64, 128)
    kernel: int = 3
    embed_dim: int = 128
    input_size: int = 32
    in_channels: int = 3

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.input_size % (2 ** len(self.channels)):
            raise ValueError(
                f"input_size {self.input_size} not divisible by 2^{len(self.channels)} pooling stages")


class FeatureGenerator(Module):
    """conv3x3 -> relu -> maxpool2 per block, then global average pool and a dense embedding."""

    def __init__(self, arch: GeneratorArch | None = None, rng: np.random.Generator | None = None):
        super().__init__()
        self.arch = arch or GeneratorArch()
        rng = rng if rng is not None else np.random.default_rng(0)
        k = self.arch.kernel
        c_in = self.arch.in_channels
        for i, c_out in enumerate(self.arch.channels):
            self._param(f"G.conv{i}.w", kaiming(rng, (c_out, c_in, k, k), c_in * k * k))
            self._param(f"G.conv{i}.b", np.zeros(c_out))
            c_in = c_out
        self._param("G.embed.w", kaiming(rng, (c_in, self.arch.embed_dim), c_in))
        self._param("G.embed.b", np.zeros(self.arch.embed_dim))

    def __call__(self, images) -> Tensor:
        return embed(self, images)


def embed(g: FeatureGenerator, images, normalize: bool = False) -> Tensor:
    """Map an image batch [n, 3, H, W] to embeddings [n, embed_dim]."""
    x = T.as_tensor(images)
    a = g.arch
    if x.ndim != 4 or x.shape[1] != a.in_channels or x.shape[2:] != (a.input_size, a.input_size):
        raise T.ShapeError(
            f"embed: expected images [n, {a.in_channels}, {a.input_size}, {a.input_size}], got {x.shape}")
    pad = a.kernel // 2
    for i in range(len(a.channels)):
        x = T.conv2d(x, g.params[f"G.conv{i}.w"], g.params[f"G.conv{i}.b"], padding=pad)
        x = T.max_pool2d(T.relu(x), 2)
    x = T.global_avg_pool(x)
    f = T.dense(x, g.params["G.embed.w"], g.params["G.embed.b"])
    return T.l2_normalize(f) if normalize else f


class DomainDiscriminator(Module):
    """dense(embed -> hidden) -> relu -> dense(hidden -> n_domains)."""

    def __init__(self, n_domains: int, embed_dim: int = 128, hidden: int = 64,
                 rng: np.random.Generator | None = None):
        super().__init__()
        if n_domains < 1:
            raise ValueError("DomainDiscriminator needs at least one domain")
        rng = rng if rng is not None else np.random.default_rng(1)
        self.n_domains = n_domains
        self._param("D.fc1.w", kaiming(rng, (embed_dim, hidden), embed_dim))
        self._param("D.fc1.b", np.zeros(hidden))
        self._param("D.fc2.w", kaiming(rng, (hidden, n_domains), hidden))
        self._param("D.fc2.b", np.zeros(n_domains))

    def __call__(self, feats) -> Tensor:
        h = T.relu(T.dense(feats, self.params["D.fc1.w"], self.params["D.fc1.b"]))
        return T.dense(h, self.params["D.fc2.w"], self.params["D.fc2.b"])


def discriminate_domain(d: DomainDiscriminator, feats, lambda_grl: float = 1.0,
                        n_domains: int | None = None) -> Tensor:
    """Domain logits of D applied behind a gradient reversal layer."""
    if n_domains is not None and n_domains != d.n_domains:
        raise ValueError(f"discriminator has {d.n_domains} outputs but experiment has {n_domains} source domains")
    return d(T.grad_reverse(feats, lambda_grl))


class TaskNetwork(Module):
    """Single dense layer embed -> 2 class logits."""

    n_classes = 2

    def __init__(self, embed_dim: int = 128, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(2)
        self._param("T.fc.w", kaiming(rng, (embed_dim, self.n_classes), embed_dim))
        self._param("T.fc.b", np.zeros(self.n_classes))

    def __call__(self, feats) -> Tensor:
        return T.dense(feats, self.params["T.fc.w"], self.params["T.fc.b"])


def classify(t: TaskNetwork, feats) -> Tensor:
    return t(feats)


@dataclass
class SADGModels:
    g: FeatureGenerator
    d: DomainDiscriminator
    t: TaskNetwork
    extra: dict = field(default_factory=dict)

    @classmethod
    def build(cls, n_domains: int, seed: int = 0, arch: GeneratorArch | None = None,
              disc_hidden: int = 64) -> "SADGModels":
        arch = arch or GeneratorArch()
        rg, rd, rt = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))
        return cls(FeatureGenerator(arch, rg),
                   DomainDiscriminator(n_domains, arch.embed_dim, disc_hidden, rd),
                   TaskNetwork(arch.embed_dim, rt))

    def modules(self) -> tuple[Module, Module, Module]:
        return self.g, self.d, self.t

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [item for m in self.modules() for item in m.named_parameters()]

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(m.num_parameters() for m in self.modules())

    def zero_grad(self) -> None:
        for m in self.modules():
            m.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"checkpoint is missing parameters: {sorted(missing)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.copy()


# ---------------------------------------------------------------------------
# checkpoint file: "SADG" | u32 version | u32 count | per tensor:
#   u32 name_len | name | u32 rank | u32 extents[rank] | f64 values (little endian)
# ---------------------------------------------------------------------------

def save_checkpoint(path: str | Path, state: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(state)))
        for name, arr in state.items():
            arr = np.asarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic {blob[:4]!r})")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    state: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            n = int(np.prod(shape)) if rank else 1
            if pos + 8 * n > len(blob):
                raise ValueError("truncated tensor data")
            state[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * n
    except struct.error as exc:
        raise ValueError(f"{path}: truncated checkpoint") from exc
    if pos != len(blob):
        raise ValueError(f"{path}: {len(blob) - pos} trailing bytes after {count} tensors")
    return state
