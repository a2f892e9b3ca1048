"""Procedural multi-domain corpus of single-capture vs. recaptured images.

A canvas is a 3xHxW float image in [0, 1]. Single captures are a procedural
texture seen under the domain's colour temperature, illumination and sensor
noise. Recaptures run the same texture pipeline and then the recapture
artifact stack: an aliased screen grid (moire), a 3x3 blur, the display's
channel gain and extra noise.

Canvases are quantized to 8 bits at generation time so that the on-disk PPM
corpus round-trips losslessly.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

TEXTURE_FAMILIES = ("gradients", "blobs", "stripes")
MANIFEST_NAME = "manifest.tsv"
MANIFEST_HEADER = "path\ty\tdomain"
SINGLE, RECAPTURE = 0, 1
SMALL, LARGE = 0, 1
MOIRE_MAX_TILT = 0.15  # radians between display grid and sensor rows


@dataclass(frozen=True)
class RecaptureArtifacts:
    """Strengths of the recapture artifact stack. All-zero/unit gains is the identity."""

    moire_strength: float = 0.0
    moire_freq: tuple[float, float] = (0.7, 0.95)  # screen grid pitch, cycles per pixel
    blur: float = 0.0  # blend weight of the 3x3 blurred image
    gain: tuple[float, float, float] = (1.0, 1.0, 1.0)
    noise: float = 0.0

    @classmethod
    def identity(cls) -> "RecaptureArtifacts":
        return cls()


@dataclass(frozen=True)
class DomainSpec:
    domain_id: str
    texture: str = "gradients"
    color_gain: tuple[float, float, float] = (1.0, 1.0, 1.0)
    illumination: float = 1.0
    freq_range: tuple[float, float] = (2.0, 5.0)  # content frequency, cycles per canvas
    noise: float = 0.02
    recapture: RecaptureArtifacts = field(default_factory=lambda: RecaptureArtifacts(
        moire_strength=0.25, blur=0.5, gain=(1.05, 1.0, 0.95), noise=0.02))

    def __post_init__(self):
        if self.texture not in TEXTURE_FAMILIES:
            raise ValueError(f"{self.domain_id}: unknown texture family {self.texture!r}")
        gains = (*self.color_gain, self.illumination, *self.recapture.gain)
        if any(not 0.5 <= g <= 1.5 for g in gains):
            raise ValueError(f"{self.domain_id}: gains must lie in [0.5, 1.5], got {gains}")
        lo, hi = self.freq_range
        if not 0 < lo <= hi:
            raise ValueError(f"{self.domain_id}: frequency range must be positive, got {self.freq_range}")


def spec_difference(a: DomainSpec, b: DomainSpec) -> int:
    """Number of fields (other than the id) on which two specs differ."""
    return sum(getattr(a, f.name) != getattr(b, f.name)
               for f in dataclasses.fields(DomainSpec) if f.name != "domain_id")


def validate_specs(specs: list[DomainSpec]) -> None:
    ids = [s.domain_id for s in specs]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate domain ids: {ids}")
    for i, a in enumerate(specs):
        for b in specs[i + 1:]:
            if spec_difference(a, b) < 2:
                raise ValueError(f"domains {a.domain_id} and {b.domain_id} differ in fewer than 2 fields")


def default_domains() -> list[DomainSpec]:
    """Four domains that differ in content, colour, illumination, sensor noise and display.

    Displays differ in white point (which channel the recapture dims) and in
    how they disturb fine detail: A and C smear it (blur), B and D add
    high-frequency noise. Sensor noise on single captures also varies, so raw
    high-frequency energy says different things about the class in each domain.
    """
    grid = (0.85, 0.95)
    return [
        DomainSpec("A", "gradients", (1.15, 1.0, 0.85), 1.0, (1.5, 3.0), 0.05,
                   RecaptureArtifacts(0.2, grid, 0.9, (0.75, 1.0, 1.0), 0.0)),
        DomainSpec("B", "blobs", (0.9, 1.0, 1.15), 0.85, (3.0, 6.0), 0.01,
                   RecaptureArtifacts(0.2, grid, 0.3, (1.0, 0.75, 1.0), 0.05)),
        DomainSpec("C", "stripes", (1.0, 1.1, 0.95), 1.1, (2.0, 4.0), 0.04,
                   RecaptureArtifacts(0.2, grid, 0.9, (1.0, 1.0, 0.75), 0.0)),
        DomainSpec("D", "blobs", (1.05, 0.95, 1.05), 0.7, (5.0, 9.0), 0.015,
                   RecaptureArtifacts(0.2, grid, 0.3, (0.875, 1.0, 0.875), 0.05)),
    ]


# ---------------------------------------------------------------------------
# texture pipeline
# ---------------------------------------------------------------------------

def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    coords = (np.arange(size) + 0.5) / size
    return np.meshgrid(coords, coords, indexing="ij")


def _texture(family: str, size: int, freq: float, rng: np.random.Generator) -> np.ndarray:
    u, v = _grid(size)
    colors = rng.uniform(0.3, 0.7, size=(3, 3))
    if family == "gradients":
        theta = rng.uniform(0, 2 * np.pi)
        ramp = np.cos(theta) * (u - 0.5) + np.sin(theta) * (v - 0.5) + 0.5
        wave = 0.5 + 0.5 * np.cos(2 * np.pi * freq * (np.sin(theta) * u - np.cos(theta) * v)
                                  + rng.uniform(0, 2 * np.pi))
        w = np.stack([ramp * (1 - wave), (1 - ramp) * (1 - wave), wave])
    elif family == "blobs":
        k = 6
        centers = rng.uniform(0, 1, size=(k, 2))
        sigma = 0.5 / freq
        weights = rng.uniform(0.5, 1.0, size=k)
        blobs = np.stack([wk * np.exp(-((u - cx) ** 2 + (v - cy) ** 2) / (2 * sigma ** 2))
                          for wk, (cx, cy) in zip(weights, centers)])
        owner = rng.integers(0, 3, size=k)
        w = np.stack([blobs[owner == i].sum(axis=0) for i in range(3)]) + 0.15
    else:  # stripes
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        s = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (np.cos(theta) * u + np.sin(theta) * v) + phase)
        w = np.stack([s, 1 - s, 0.3 + 0.4 * s * (1 - s)])
    w = w / w.sum(axis=0, keepdims=True)
    # [3 color channels] = colors^T @ weights
    return np.einsum("kc,khw->chw", colors, w)


def render_canvas(spec: DomainSpec, size: int, rng: np.random.Generator) -> np.ndarray:
    """One single-capture canvas in [0, 1] (before quantization)."""
    freq = rng.uniform(*spec.freq_range)
    img = _texture(spec.texture, size, freq, rng)
    img = img * np.asarray(spec.color_gain)[:, None, None] * spec.illumination
    img = img + rng.standard_normal(img.shape) * spec.noise
    return np.clip(img, 0.0, 1.0)


def _blur3(img: np.ndarray) -> np.ndarray:
    k = np.array([1.0, 2.0, 1.0]) / 4.0
    p = np.pad(img, ((0, 0), (1, 1), (1, 1)), mode="edge")
    rows = k[0] * p[:, :-2, :] + k[1] * p[:, 1:-1, :] + k[2] * p[:, 2:, :]
    return k[0] * rows[:, :, :-2] + k[1] * rows[:, :, 1:-1] + k[2] * rows[:, :, 2:]


def apply_recapture_artifacts(canvas: np.ndarray, artifacts: RecaptureArtifacts | DomainSpec,
                              rng: np.random.Generator) -> np.ndarray:
    """Composite moire, blur, channel gain and noise onto ``canvas``; result clamped to [0, 1].

    The moire is a display pixel grid, slightly rotated against the sensor,
    sampled at pixel centres with no prefilter. A pitch near one cycle per
    pixel folds down to low-frequency beats.
    """
    if isinstance(artifacts, DomainSpec):
        artifacts = artifacts.recapture
    a = artifacts
    out = np.array(canvas, dtype=np.float64, copy=True)
    _, h, w = out.shape
    if a.moire_strength > 0:
        f = rng.uniform(*a.moire_freq)
        theta = rng.uniform(-MOIRE_MAX_TILT, MOIRE_MAX_TILT)
        px, py = rng.uniform(0, 2 * np.pi, size=2)
        yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        u = np.cos(theta) * xx + np.sin(theta) * yy
        v = -np.sin(theta) * xx + np.cos(theta) * yy
        grid = 0.5 * (np.cos(2 * np.pi * f * u + px) + np.cos(2 * np.pi * f * v + py))
        out = out * (1.0 - a.moire_strength * 0.5 * (1.0 + grid))[None]
    if a.blur > 0:
        out = (1.0 - a.blur) * out + a.blur * _blur3(out)
    out = out * np.asarray(a.gain)[:, None, None]
    if a.noise > 0:
        out = out + rng.standard_normal(out.shape) * a.noise
    return np.clip(out, 0.0, 1.0)


def quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# domains and corpora
# ---------------------------------------------------------------------------

@dataclass
class DomainData:
    domain_id: str
    images: np.ndarray  # uint8 [n, 3, S, S]
    labels: np.ndarray  # int [n]

    def __len__(self) -> int:
        return len(self.labels)

    def canvas(self, i: int) -> np.ndarray:
        return self.images[i].astype(np.float64) / 255.0


@dataclass
class Corpus:
    domains: dict[str, DomainData]

    @property
    def domain_ids(self) -> list[str]:
        return list(self.domains)

    def __getitem__(self, domain_id: str) -> DomainData:
        try:
            return self.domains[domain_id]
        except KeyError:
            raise KeyError(f"domain {domain_id!r} not in corpus ({self.domain_ids})") from None

    def __len__(self) -> int:
        return sum(len(d) for d in self.domains.values())


def generate_domain(spec: DomainSpec, count_per_class: int, seed: int,
                    canvas_size: int = 64) -> DomainData:
    """``count_per_class`` single-capture then ``count_per_class`` recaptured canvases."""
    if count_per_class < 1:
        raise ValueError("count_per_class must be >= 1")
    ss = np.random.SeedSequence([int(seed), *spec.domain_id.encode("utf-8")])
    images, labels = [], []
    for y in (SINGLE, RECAPTURE):
        for child in ss.spawn(count_per_class):
            rng = np.random.default_rng(child)
            img = render_canvas(spec, canvas_size, rng)
            if y == RECAPTURE:
                img = apply_recapture_artifacts(img, spec.recapture, rng)
            images.append(quantize(img))
            labels.append(y)
    return DomainData(spec.domain_id, np.stack(images), np.asarray(labels, dtype=np.int64))


def generate_corpus(specs: list[DomainSpec] | None = None, count_per_class: int = 300,
                    seed: int = 0, canvas_size: int = 64) -> Corpus:
    specs = default_domains() if specs is None else specs
    validate_specs(specs)
    return Corpus({s.domain_id: generate_domain(s, count_per_class, seed, canvas_size) for s in specs})


# ---------------------------------------------------------------------------
# scale pairs
# ---------------------------------------------------------------------------

@dataclass
class Sample:
    image: np.ndarray  # float [3, H, W] in [0, 1]
    y: int
    domain_id: str
    scale_tag: int


@dataclass
class ScalePair:
    large: Sample
    small: Sample

    @property
    def y(self) -> int:
        return self.large.y

    @property
    def domain_id(self) -> str:
        return self.large.domain_id


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centred bilinear resampling of a [c, h, w] image."""
    _, h, w = img.shape

    def axis_weights(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, fr = axis_weights(h, out_h)
    c0, c1, fc = axis_weights(w, out_w)
    rows = img[:, r0, :] * (1 - fr)[None, :, None] + img[:, r1, :] * fr[None, :, None]
    return rows[:, :, c0] * (1 - fc)[None, None, :] + rows[:, :, c1] * fc[None, None, :]


def subsample(img: np.ndarray, factor: int) -> np.ndarray:
    """Box-downsample by ``factor`` and resample back up to the original size."""
    if factor == 1:
        return img.copy()
    c, h, w = img.shape
    if h % factor or w % factor:
        raise ValueError(f"image size {(h, w)} not divisible by factor {factor}")
    low = img.reshape(c, h // factor, factor, w // factor, factor).mean(axis=(2, 4))
    return bilinear_resize(low, h, w)


def make_scale_pair(canvas: np.ndarray, crop_size: int, rng: np.random.Generator, *,
                    y: int = 0, domain_id: str = "", factor: int = 2,
                    offset: tuple[int, int] | None = None) -> ScalePair:
    """Random crop at native resolution plus its subsampled copy."""
    _, h, w = canvas.shape
    if h < 2 * crop_size or w < 2 * crop_size:
        raise ValueError(f"canvas {h}x{w} is smaller than twice the crop size {crop_size}")
    if offset is None:
        top = int(rng.integers(0, h - crop_size + 1))
        left = int(rng.integers(0, w - crop_size + 1))
    else:
        top, left = offset
    large = np.ascontiguousarray(canvas[:, top:top + crop_size, left:left + crop_size], dtype=np.float64)
    small = subsample(large, factor)
    return ScalePair(Sample(large, y, domain_id, LARGE), Sample(small, y, domain_id, SMALL))


def laplacian_energy(img: np.ndarray) -> float:
    """Mean absolute 4-neighbour Laplacian over interior pixels."""
    lap = (img[:, 1:-1, :-2] + img[:, 1:-1, 2:] + img[:, :-2, 1:-1] + img[:, 2:, 1:-1]
           - 4 * img[:, 1:-1, 1:-1])
    return float(np.abs(lap).mean())


# ---------------------------------------------------------------------------
# PPM corpus I/O
# ---------------------------------------------------------------------------

def write_ppm(path: str | Path, image: np.ndarray) -> None:
    """Write a uint8 [3, H, W] image as binary P6."""
    img = np.asarray(image)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"write_ppm expects uint8 [3, H, W], got {img.dtype} {img.shape}")
    _, h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img.transpose(1, 2, 0)).tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PPM header")
        tokens.append(blob[start:pos])
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ValueError(f"{path}: malformed PPM header") from None
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM supported (maxval {maxval})")
    pos += 1  # single whitespace before raster
    raster = blob[pos:]
    if len(raster) != w * h * 3:
        raise ValueError(f"{path}: expected {w * h * 3} raster bytes, found {len(raster)}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1).copy()


def save_corpus(corpus: Corpus, directory: str | Path) -> Path:
    """Write ``<dir>/<domain>/<class>/<index>.ppm`` plus ``manifest.tsv``."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    lines = [MANIFEST_HEADER]
    for dom_id, data in corpus.domains.items():
        counters = {SINGLE: 0, RECAPTURE: 0}
        for img, y in zip(data.images, data.labels):
            y = int(y)
            rel = Path(dom_id) / str(y) / f"{counters[y]:05d}.ppm"
            counters[y] += 1
            (root / rel).parent.mkdir(parents=True, exist_ok=True)
            write_ppm(root / rel, img)
            lines.append(f"{rel.as_posix()}\t{y}\t{dom_id}")
    manifest = root / MANIFEST_NAME
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def load_corpus(directory: str | Path) -> Corpus:
    root = Path(directory)
    manifest = root / MANIFEST_NAME
    if not manifest.is_file():
        raise FileNotFoundError(f"no {MANIFEST_NAME} in {root}")
    lines = manifest.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != MANIFEST_HEADER:
        raise ValueError(f"{manifest}: bad header, expected {MANIFEST_HEADER!r}")
    per_domain: dict[str, tuple[list, list]] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"{manifest}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
        rel, y, dom = parts
        if y not in ("0", "1"):
            raise ValueError(f"{manifest}:{lineno}: label must be 0 or 1, got {y!r}")
        path = root / rel
        if not path.is_file():
            raise FileNotFoundError(f"{manifest}:{lineno}: missing image {path}")
        imgs, labels = per_domain.setdefault(dom, ([], []))
        imgs.append(read_ppm(path))
        labels.append(int(y))
    return Corpus({dom: DomainData(dom, np.stack(imgs), np.asarray(labels, dtype=np.int64))
                   for dom, (imgs, labels) in per_domain.items()})
