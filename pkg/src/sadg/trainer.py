"""Joint optimisation of the composite objective over all source domains."""

from __future__ import annotations

import copy
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import losses as L
from . import tensor as T
from .metrics import auc, evaluate_scores, hter_at_eer, MetricsReport
from .models import GeneratorArch, SADGModels, embed, load_checkpoint, save_checkpoint
from .sampler import BalancedSampler, DomainBatch
from .synth import Corpus, DomainData, make_scale_pair

logger = logging.getLogger(__name__)

SA_STRATEGIES = ("pairwise", "feature", "avg_score")
TRACE_HEADER = "step,l_cls,l_ada,l_trip,l_sa,l_total,val_auc,val_hter"


@dataclass
class TrainConfig:
    lr: float = 1e-4
    steps: int = 2000
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    sa_strategy: str = "pairwise"
    no_ad: bool = False
    no_trip: bool = False
    no_sa: bool = False
    grl_schedule: str = "constant"
    lambda_grl: float = 1.0
    seed: int = 1
    batch_size: int = 8
    batch_unit: str = "pairs"
    triplet_mining: str = "all"
    val_fraction: float = 0.1
    val_every: int = 250
    crop_size: int = 32
    scale_factor: int = 2
    disc_hidden: int = 64
    channels: tuple[int, ...] = (16, 32, 64, 128)
    embed_dim: int = 128

    def __post_init__(self):
        if not self.lr > 0 or self.steps < 1:
            raise ValueError(f"lr and steps must be positive (lr={self.lr}, steps={self.steps})")
        if self.sa_strategy not in SA_STRATEGIES:
            raise ValueError(f"sa_strategy must be one of {SA_STRATEGIES}, got {self.sa_strategy!r}")
        if self.grl_schedule not in ("constant", "ramp"):
            raise ValueError(f"unknown grl_schedule {self.grl_schedule!r}")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")

    def effective_weights(self) -> L.LossWeights:
        """Loss weights after the ablation switches zero their terms."""
        w = self.weights
        return dataclasses.replace(
            w,
            lambda1=0.0 if self.no_ad else w.lambda1,
            lambda2=0.0 if self.no_trip else w.lambda2,
            lambda3=0.0 if self.no_sa else w.lambda3,
        )

    def arch(self) -> GeneratorArch:
        return GeneratorArch(channels=tuple(self.channels), embed_dim=self.embed_dim, input_size=self.crop_size)


class Adam:
    """Bias-corrected Adam over a fixed, named parameter list."""

    def __init__(self, named_params, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = dict(named_params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = 0

    def step(self, lr: float | None = None) -> None:
        grads = {k: p.grad for k, p in self.params.items()}
        adam_update(self.params, grads, self, self.lr if lr is None else lr)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict:
        return {"t": self.t, "m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()}}


def adam_update(params: dict, grads: dict, state: Adam, lr: float) -> None:
    """In-place Adam step. Parameters whose grad is None are treated as zero-gradient."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.data.shape:
            raise T.ShapeError(f"adam_update: grad shape {g.shape} != param {name} shape {p.data.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# one step
# ---------------------------------------------------------------------------

def compute_losses(models: SADGModels, batch: DomainBatch, config: TrainConfig,
                   lambda_grl: float) -> dict[str, T.Tensor]:
    """Every loss term on one shared forward pass of both scale members."""
    images = batch.images()
    y = batch.labels()
    feats = embed(models.g, images)
    logits = models.t(feats)
    l_cls = L.cross_entropy(logits, y)
    l_ada = L.domain_loss_from_features(models.d, feats, batch.domains(), lambda_grl)
    l_trip = L.triplet_loss(T.l2_normalize(feats), y, config.weights.margin_alpha, config.triplet_mining)
    n = batch.n_pairs
    if config.sa_strategy == "pairwise":
        l_sa = L.pairwise_alignment_from_logits(T.take(logits, np.arange(n)),
                                                T.take(logits, np.arange(n, 2 * n)), batch.y)
    elif config.sa_strategy == "feature":
        l_sa = L.feature_alignment_from_embeddings(models.t, feats, y, batch.scale_tags())
    else:
        l_sa = L.avg_score_alignment_from_logits(logits, y, batch.scale_tags())
    total = L.composite_loss(config.effective_weights(), l_cls, l_ada, l_trip, l_sa)
    return {"l_cls": l_cls, "l_ada": l_ada, "l_trip": l_trip, "l_sa": l_sa, "l_total": total}


def train_step(models: SADGModels, batch: DomainBatch, config: TrainConfig, opt: Adam,
               progress: float = 0.0) -> dict[str, float]:
    """One backward pass through the composite loss and one joint Adam update of G, D and T."""
    lam = L.grl_lambda(config.grl_schedule, progress, config.lambda_grl)
    terms = compute_losses(models, batch, config, lam)
    values = {k: v.item() for k, v in terms.items()}
    for name, value in values.items():
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite loss term {name} = {value}")
    opt.zero_grad()
    terms["l_total"].backward()
    opt.step()
    return values


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------

@dataclass
class EvalSet:
    """Fixed crops at both scales for a list of canvases."""

    large: np.ndarray
    small: np.ndarray
    y: np.ndarray

    @classmethod
    def from_domain(cls, data: DomainData, indices, crop_size: int, scale_factor: int, seed: int) -> "EvalSet":
        rng = np.random.default_rng(seed)
        large, small = [], []
        for i in indices:
            pair = make_scale_pair(data.canvas(int(i)), crop_size, rng, factor=scale_factor)
            large.append(pair.large.image)
            small.append(pair.small.image)
        idx = np.asarray(indices, dtype=np.int64)
        return cls(np.stack(large), np.stack(small), data.labels[idx])

    @classmethod
    def concat(cls, sets: list["EvalSet"]) -> "EvalSet":
        return cls(np.concatenate([s.large for s in sets]), np.concatenate([s.small for s in sets]),
                   np.concatenate([s.y for s in sets]))


def predict_proba(models: SADGModels, images: np.ndarray, chunk: int = 128) -> np.ndarray:
    """[n, 2] task softmax, evaluated without recording the tape."""
    out = []
    with T.no_grad():
        for start in range(0, len(images), chunk):
            logits = models.t(embed(models.g, images[start:start + chunk]))
            out.append(T.softmax(logits, axis=1).data)
    return np.concatenate(out)


@dataclass
class Scored:
    scores: np.ndarray  # recapture probability, large then small members
    labels: np.ndarray
    pair_kl: float  # mean symmetric KL between the two scale members' outputs


def score_set(models: SADGModels, es: EvalSet) -> Scored:
    pl = predict_proba(models, es.large)
    ps = predict_proba(models, es.small)
    kl = float(np.mean(L.symmetric_kl(pl, ps)))
    return Scored(np.r_[pl[:, 1], ps[:, 1]], np.r_[es.y, es.y], kl)


# ---------------------------------------------------------------------------
# full run
# ---------------------------------------------------------------------------

def split_validation(corpus: Corpus, sources, fraction: float, seed: int) -> tuple[dict, dict]:
    """Stratified per (domain, class) split; returns (train pools, validation indices)."""
    train, val = {}, {}
    for d in sources:
        labels = corpus[d].labels
        rng = np.random.default_rng(np.random.SeedSequence([seed, *d.encode("utf-8"), 7]))
        tr, va = [], []
        for c in (0, 1):
            idx = rng.permutation(np.flatnonzero(labels == c))
            k = max(1, int(round(fraction * idx.size)))
            va.append(idx[:k])
            tr.append(idx[k:])
        train[d] = np.sort(np.concatenate(tr))
        val[d] = np.sort(np.concatenate(va))
    return train, val


@dataclass
class TrainResult:
    models: SADGModels
    trace: list[dict]
    best_step: int
    best_val_auc: float
    val_set: EvalSet
    sources: tuple[str, ...]
    config: TrainConfig

    def write_trace(self, path: str | Path) -> None:
        write_trace_csv(path, self.trace)


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return f"{v:.10g}"


def write_trace_csv(path: str | Path, trace: list[dict]) -> None:
    lines = [TRACE_HEADER]
    cols = TRACE_HEADER.split(",")
    for row in trace:
        lines.append(",".join(str(row["step"]) if c == "step" else _fmt(row.get(c)) for c in cols))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def run_training(corpus: Corpus, sources, config: TrainConfig,
                 checkpoint_path: str | Path | None = None, log_every: int = 0) -> TrainResult:
    """Train on ``sources``; validate every ``val_every`` steps; keep the best-validation-AUC weights."""
    sources = tuple(sources)
    if len(sources) < 1:
        raise ValueError("need at least one source domain")
    models = SADGModels.build(len(sources), seed=config.seed, arch=config.arch(),
                              disc_hidden=config.disc_hidden)
    opt = Adam(models.named_parameters(), lr=config.lr)
    pools, val_idx = split_validation(corpus, sources, config.val_fraction, config.seed)
    sampler = BalancedSampler(corpus, pools, config.batch_size,
                              np.random.default_rng(np.random.SeedSequence([config.seed, 11])),
                              config.crop_size, config.scale_factor, config.batch_unit)
    val_set = EvalSet.concat([
        EvalSet.from_domain(corpus[d], val_idx[d], config.crop_size, config.scale_factor, seed=config.seed + 1000 * i)
        for i, d in enumerate(sources)])

    trace: list[dict] = []
    best_auc, best_step, best_state = -1.0, 0, None
    for step in range(1, config.steps + 1):
        batch = sampler.next_batch()
        row = {"step": step, **train_step(models, batch, config, opt, progress=(step - 1) / config.steps),
               "val_auc": None, "val_hter": None}
        if step % config.val_every == 0 or step == config.steps:
            scored = score_set(models, val_set)
            row["val_auc"] = auc(scored.scores, scored.labels)
            row["val_hter"], _ = hter_at_eer(scored.scores, scored.labels, scored.scores, scored.labels)
            if row["val_auc"] > best_auc:
                best_auc, best_step, best_state = row["val_auc"], step, models.state_dict()
                if checkpoint_path is not None:
                    save_checkpoint(checkpoint_path, best_state)
        if log_every and step % log_every == 0:
            logger.info("step %d total %.4f cls %.4f val_auc %s", step, row["l_total"], row["l_cls"], row["val_auc"])
        trace.append(row)
    models.load_state_dict(best_state)
    return TrainResult(models, trace, best_step, best_auc, val_set, sources, config)


def evaluate_target(result: TrainResult, target: DomainData, *, threshold_policy: str = "source",
                    seed: int = 12345, run_id: str = "") -> MetricsReport:
    """Score every target canvas at both scales; HTER threshold from the source validation split."""
    cfg = result.config
    es = EvalSet.from_domain(target, np.arange(len(target)), cfg.crop_size, cfg.scale_factor, seed)
    scored = score_set(result.models, es)
    extra = {"scale_kl": scored.pair_kl, "best_step": result.best_step, "val_auc": result.best_val_auc}
    if threshold_policy == "source":
        val = score_set(result.models, result.val_set)
        return evaluate_scores(scored.scores, scored.labels, val.scores, val.labels,
                               run_id=run_id, target=target.domain_id, extra=extra)
    if threshold_policy == "target":
        return evaluate_scores(scored.scores, scored.labels, run_id=run_id, target=target.domain_id, extra=extra)
    raise ValueError(f"unknown threshold policy {threshold_policy!r}")


def reload_models(path: str | Path, n_domains: int, config: TrainConfig) -> SADGModels:
    models = SADGModels.build(n_domains, seed=config.seed, arch=config.arch(), disc_hidden=config.disc_hidden)
    models.load_state_dict(load_checkpoint(path))
    return models


def replace_models(result: TrainResult, models: SADGModels) -> TrainResult:
    out = copy.copy(result)
    out.models = models
    return out
