"""Domain-balanced batches of scale pairs.

Each source domain contributes the same number of pairs per batch, split as
evenly as possible between the two classes. Canvases are drawn without
replacement from a per-(domain, class) shuffled stream that reshuffles
whenever it is exhausted, so the first ``len(pool)`` draws of any stream are
exactly that pool.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .synth import LARGE, SMALL, Corpus, ScalePair, make_scale_pair


@dataclass
class DomainBatch:
    """Scale pairs from every source domain.

    ``large``/``small`` are index-aligned [P, 3, H, W]; ``y`` and ``domain``
    (index into the sampler's source list) are per pair. ``canvas_ids``
    records which canvas each pair was cut from.
    """

    large: np.ndarray
    small: np.ndarray
    y: np.ndarray
    domain: np.ndarray
    canvas_ids: list[tuple[str, int]]
    domain_ids: tuple[str, ...]

    @property
    def n_pairs(self) -> int:
        return len(self.y)

    def pairs_by_domain(self) -> dict[str, list[int]]:
        return {d: np.flatnonzero(self.domain == i).tolist() for i, d in enumerate(self.domain_ids)}

    def images(self) -> np.ndarray:
        """Both scales stacked: large members first, then small, [2P, 3, H, W]."""
        return np.concatenate([self.large, self.small])

    def labels(self) -> np.ndarray:
        return np.concatenate([self.y, self.y])

    def domains(self) -> np.ndarray:
        return np.concatenate([self.domain, self.domain])

    def scale_tags(self) -> np.ndarray:
        return np.r_[np.full(self.n_pairs, LARGE), np.full(self.n_pairs, SMALL)]

    def scale_pairs(self) -> list[ScalePair]:
        from .synth import Sample
        out = []
        for i in range(self.n_pairs):
            d = self.domain_ids[self.domain[i]]
            out.append(ScalePair(Sample(self.large[i], int(self.y[i]), d, LARGE),
                                 Sample(self.small[i], int(self.y[i]), d, SMALL)))
        return out


@dataclass
class LossView:
    """Index structure a single loss consumes from the stacked [2P] forward batch."""

    rows: np.ndarray  # rows of the stacked batch
    targets: np.ndarray | None = None  # class or domain index per row
    pairs: dict[int, tuple[np.ndarray, np.ndarray]] | None = None  # class -> (large rows, small rows)


def flatten_for_loss(batch: DomainBatch, which: str) -> LossView:
    """Views over the stacked batch: ``cls`` (rows, y), ``ada`` (rows, domain),
    ``trip`` (rows, y; domain and scale ignored), ``sa`` (class-grouped pairs)."""
    n = batch.n_pairs
    rows = np.arange(2 * n)
    if which == "cls":
        return LossView(rows, batch.labels())
    if which == "ada":
        return LossView(rows, batch.domains())
    if which == "trip":
        return LossView(rows, batch.labels())
    if which == "sa":
        groups = {}
        for c in np.unique(batch.y):
            idx = np.flatnonzero(batch.y == c)
            groups[int(c)] = (idx, idx + n)
        return LossView(np.arange(n), batch.y, groups)
    raise ValueError(f"unknown loss view {which!r}")


class _Stream:
    """Endless without-replacement stream over a pool, reshuffled per epoch."""

    def __init__(self, pool: np.ndarray, rng: np.random.Generator):
        self.pool = np.asarray(pool)
        self.rng = rng
        self.order = self.rng.permutation(self.pool)
        self.pos = 0
        self.epoch = 0

    def take(self, k: int) -> list[int]:
        out = []
        while len(out) < k:
            if self.pos == len(self.order):
                self.order = self.rng.permutation(self.pool)
                self.pos = 0
                self.epoch += 1
            step = min(k - len(out), len(self.order) - self.pos)
            out.extend(int(i) for i in self.order[self.pos:self.pos + step])
            self.pos += step
        return out


class BalancedSampler:
    """Produces :class:`DomainBatch` es with ``batch_size`` pairs per source domain.

    ``pools`` maps domain id -> canvas indices available for training (e.g. the
    non-validation split). With ``unit="images"`` the per-domain batch size
    counts scale images rather than pairs, i.e. ``batch_size // 2`` pairs.
    """

    def __init__(self, corpus: Corpus, pools: dict[str, np.ndarray], batch_size: int = 8,
                 rng: np.random.Generator | None = None, crop_size: int = 32,
                 scale_factor: int = 2, unit: str = "pairs"):
        if unit not in ("pairs", "images"):
            raise ValueError(f"unit must be 'pairs' or 'images', got {unit!r}")
        self.pairs_per_domain = batch_size if unit == "pairs" else batch_size // 2
        if self.pairs_per_domain < 2:
            raise ValueError("need at least 2 pairs per domain so both classes appear")
        self.corpus = corpus
        self.domain_ids = tuple(pools)
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.crop_size = crop_size
        self.scale_factor = scale_factor
        self.streams: dict[tuple[str, int], _Stream] = {}
        for d, pool in pools.items():
            labels = corpus[d].labels
            pool = np.asarray(pool)
            for c in (0, 1):
                cls_pool = pool[labels[pool] == c]
                if cls_pool.size == 0:
                    raise ValueError(f"domain {d!r} has no samples of class {c} in its pool")
                self.streams[(d, c)] = _Stream(cls_pool, self.rng)
        self.n_batches = 0

    def _class_split(self) -> tuple[int, int]:
        half, odd = divmod(self.pairs_per_domain, 2)
        if not odd:
            return half, half
        extra = self.n_batches % 2  # alternate which class gets the spare slot
        return half + (1 - extra), half + extra

    def next_batch(self) -> DomainBatch:
        counts = self._class_split()
        large, small, ys, doms, ids = [], [], [], [], []
        for di, d in enumerate(self.domain_ids):
            data = self.corpus[d]
            for c in (0, 1):
                for idx in self.streams[(d, c)].take(counts[c]):
                    pair = make_scale_pair(data.canvas(idx), self.crop_size, self.rng,
                                           y=c, domain_id=d, factor=self.scale_factor)
                    large.append(pair.large.image)
                    small.append(pair.small.image)
                    ys.append(c)
                    doms.append(di)
                    ids.append((d, idx))
        self.n_batches += 1
        return DomainBatch(np.stack(large), np.stack(small), np.asarray(ys, dtype=np.int64),
                           np.asarray(doms, dtype=np.int64), ids, self.domain_ids)

    def __iter__(self):
        while True:
            yield self.next_batch()


def next_batch(sampler: BalancedSampler) -> DomainBatch:
    return sampler.next_batch()
