"""Adam training of the dual encoder, split scoring, and the three-way ablation."""

from __future__ import annotations

import logging
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import data as data_mod
from .encoder import DualEncoder, EncoderConfig, clip_loss, live_probability, similarity
from .metrics import MetricsReport, ScoreSet, compute_metrics, eer_threshold
from .tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)

VARIANTS = ("vanilla", "softmoe", "la_softmoe")
# ACER / ACC / AUC / EER in percent for vanilla CLIP, + Soft MoE, + La-SoftMoE
REFERENCE_ABLATION = {
    "vanilla": {"acer": 0.91, "acc": 98.87, "auc": 99.76, "eer": 0.96},
    "softmoe": {"acer": 0.53, "acc": 99.39, "auc": 99.66, "eer": 0.68},
    "la_softmoe": {"acer": 0.32, "acc": 99.54, "auc": 99.72, "eer": 0.56},
}
REFERENCE_LEARNING_RATE = 1e-6


class TrainingError(RuntimeError):
    def __init__(self, message: str, step: int | None = None, variant: str | None = None):
        super().__init__(message)
        self.step = step
        self.variant = variant


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 1
    template_id: str = "T-8"
    threshold_policy: str = "fixed"  # fixed | eer-on-eval

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.threshold_policy not in ("fixed", "eer-on-eval"):
            raise ValueError(f"unknown threshold policy {self.threshold_policy!r}")

    @classmethod
    def reference_scale(cls, **kw) -> "TrainConfig":
        return cls(learning_rate=REFERENCE_LEARNING_RATE, **kw)

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **changes})


@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None], state: AdamState, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update, in place.  Missing gradients count as zero."""
    state.t += 1
    t = state.t
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        p.data -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


def build_model(enc: EncoderConfig, seed: int) -> DualEncoder:
    return DualEncoder(enc, seed)


def batch_loss(model: DualEncoder, images: np.ndarray, labels: np.ndarray, template_id) -> Tensor:
    """Contrastive loss pairing every image with the prompt of its own label."""
    img = model.encode_images(np.asarray(images, dtype=np.float64))
    class_txt = model.class_text(template_id)  # rows: live, fake
    rows = np.where(np.asarray(labels) == data_mod.LIVE, 0, 1)
    txt = class_txt[rows]
    return clip_loss(img, txt, model.temperature())


@dataclass
class TrainResult:
    model: DualEncoder
    loss_curve: list[float]
    steps: int


def train(
    variant: str,
    splits: dict[str, data_mod.Split],
    cfg: TrainConfig,
    enc: EncoderConfig | None = None,
    model: DualEncoder | None = None,
    on_step=None,
) -> TrainResult:
    """Minimize the contrastive loss over the train split; returns per-epoch mean losses."""
    enc = (enc or EncoderConfig()).replace(variant=variant)
    model = model or build_model(enc, cfg.seed)
    params = model.parameters()
    state = AdamState()
    curve: list[float] = []
    step = 0
    train_split = splits["train"]
    for epoch in range(cfg.epochs):
        losses = []
        for idx in data_mod.batch_indices(train_split, cfg.batch_size, cfg.seed, epoch):
            model.zero_grad()
            loss = batch_loss(model, train_split.images[idx], train_split.labels[idx], cfg.template_id)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at step {step}", step=step, variant=variant)
            backward(loss)
            adam_step(params, {k: p.grad for k, p in params.items()}, state, cfg)
            losses.append(value)
            if on_step is not None:
                on_step(step, value)
            step += 1
        curve.append(float(np.mean(losses)))
        log.debug("%s epoch %d loss %.5f", variant, epoch, curve[-1])
    return TrainResult(model, curve, step)


def embed_split(model: DualEncoder, split: data_mod.Split, chunk: int = 64) -> np.ndarray:
    out = []
    with no_grad():
        for start in range(0, len(split), chunk):
            out.append(model.encode_images(split.images[start : start + chunk]).data)
    return np.concatenate(out) if out else np.zeros((0, model.cfg.embed_dim))


def score_split(model: DualEncoder, split: data_mod.Split, template_id="T-8") -> ScoreSet:
    """Liveness probability per sample, in split order."""
    emb = embed_split(model, split)
    with no_grad():
        txt = model.class_text(template_id)
        sims = similarity(Tensor(emb), txt, model.temperature()).data
    return ScoreSet(live_probability(sims[:, 0], sims[:, 1]), split.labels.astype(np.int64))


def evaluate(model: DualEncoder, splits: dict[str, data_mod.Split], cfg: TrainConfig, split: str = "test") -> MetricsReport:
    scores = score_split(model, splits[split], cfg.template_id)
    if cfg.threshold_policy == "eer-on-eval":
        thr = eer_threshold(score_split(model, splits["eval"], cfg.template_id))
        return compute_metrics(scores, thr, policy="eer-on-eval")
    return compute_metrics(scores, 0.5)


@dataclass
class AblationRow:
    variant: str
    seed: int
    report: MetricsReport
    final_loss: float
    loss_curve: list[float] = field(default_factory=list)


def _ablation_run(variant: str, seed: int, splits, cfg: TrainConfig, enc) -> AblationRow:
    run_cfg = cfg.replace(seed=seed)
    try:
        result = train(variant, splits, run_cfg, enc)
    except TrainingError as exc:
        exc.variant = variant
        raise
    report = evaluate(result.model, splits, run_cfg)
    final = result.loss_curve[-1] if result.loss_curve else math.nan
    return AblationRow(variant, seed, report, final, result.loss_curve)


def run_ablation(
    splits: dict[str, data_mod.Split],
    cfg: TrainConfig,
    enc: EncoderConfig | None = None,
    seeds=(1, 2, 3, 4, 5),
    variants=VARIANTS,
    progress=None,
    jobs: int = 1,
) -> list[AblationRow]:
    """Train every variant for every seed under identical data order and shared init.

    Rows come back seed-major in ``variants`` order whatever ``jobs`` is; runs
    are independent, so parallel execution gives the same rows.
    """
    tasks = [(variant, seed) for seed in seeds for variant in variants]
    rows = []
    if jobs <= 1:
        for variant, seed in tasks:
            rows.append(_ablation_run(variant, seed, splits, cfg, enc))
            if progress is not None:
                progress(rows[-1])
        return rows
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(_ablation_run, variant, seed, splits, cfg, enc) for variant, seed in tasks]
        for fut in futures:
            rows.append(fut.result())
            if progress is not None:
                progress(rows[-1])
    return rows


def median_table(rows: list[AblationRow], variants=VARIANTS) -> dict[str, dict[str, float]]:
    """Per-variant medians of ACER, ACC, AUC and EER."""
    table = {}
    for v in variants:
        reports = [r.report for r in rows if r.variant == v]
        if reports:
            table[v] = {k: statistics.median(getattr(rep, k) for rep in reports) for k in ("acer", "acc", "auc", "eer")}
    return table


def dump_embeddings(model: DualEncoder, split: data_mod.Split, path) -> np.ndarray:
    vecs = embed_split(model, split)
    data_mod.write_embeddings(path, vecs, split)
    return vecs
