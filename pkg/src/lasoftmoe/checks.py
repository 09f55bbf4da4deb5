"""Finite-difference gradient-check suites at four scopes: single ops, MoE
layers, one encoder block, and the full dual encoder under the contrastive loss."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .encoder import DualEncoder, EncoderBlock, EncoderConfig, clip_loss
from .moe import MoEVariant, SoftMoEParams, soft_moe_forward
from .tensor import Tensor, grad_check

SCOPES = ("ops", "moe", "block", "full")


@dataclass
class Case:
    name: str
    f: Callable[[], Tensor]
    wrt: list[Tensor]
    max_entries: int | None = None


@dataclass
class CaseResult:
    name: str
    max_rel_error: float
    checked: int
    passed: bool
    seconds: float


def _randn(seed: int, *shape) -> np.ndarray:
    return T.rng(seed, "gradcheck").normal(size=shape)


def op_cases(seed: int = 0) -> list[Case]:
    x = Tensor(_randn(seed, 4, 3))
    y = Tensor(_randn(seed + 1, 3, 5))
    gain, bias = Tensor(_randn(seed + 2, 3)), Tensor(_randn(seed + 3, 3))
    w = Tensor(_randn(seed + 4, 4, 3))
    cube = Tensor(_randn(seed + 5, 2, 3, 4))
    cases = {
        "add": lambda: ((x + w) * w).sum(),
        "mul": lambda: (x * w * x).sum(),
        "div": lambda: (x / (x * x + 2.0)).sum(),
        "pow": lambda: ((x * x + 1.0) ** 1.5).sum(),
        "matmul": lambda: ((x @ y) ** 2).sum(),
        "exp": lambda: (x.exp() * w).sum(),
        "log": lambda: ((x * x + 0.5).log() * w).sum(),
        "sigmoid": lambda: (T.sigmoid(x) * w).sum(),
        "gelu": lambda: (T.gelu(x) * w).sum(),
        "elu": lambda: (T.elu(x) * w).sum(),
        "softmax": lambda: (T.softmax(x, axis=0) * w).sum() + (T.softmax(x, axis=1) ** 2).sum(),
        "log_softmax": lambda: (T.log_softmax(x, axis=1) * w).sum(),
        "layer_norm": lambda: (T.layer_norm(x, gain, bias, 1e-5) * w).sum(),
        "l2_normalize": lambda: (T.l2_normalize(x, axis=-1) * w).sum(),
        "reshape_transpose": lambda: ((x.reshape(3, 4).T) * w).sum(),
        "getitem": lambda: (x[1:, ::2] ** 2).sum(),
        "concat_stack": lambda: (T.concat([x, w], axis=0) ** 2).sum() + (T.stack([x, w]) * 0.5).sum(),
        "mean": lambda: (x.mean(axis=0) ** 2).sum(),
        "contract": lambda: (T.contract("n d, e s d -> n e s", x, cube.reshape(2, 4, 3)) ** 2).sum(),
    }
    return [Case(name, f, [x, w, y, gain, bias, cube]) for name, f in cases.items()]


def moe_cases(seed: int = 0, n: int = 8, d: int = 16, experts: int = 2, slots: int = 3) -> list[Case]:
    out = []
    for variant in MoEVariant:
        x = Tensor(_randn(seed + 10, n, d))
        params = SoftMoEParams(d, experts, slots, seed, variant=variant)
        wrt = [x] + list(params.parameters().values())
        out.append(Case(f"moe[{variant.value}]", lambda x=x, p=params: soft_moe_forward(x, p).mean(), wrt, max_entries=8))
    return out


def _small_config(variant: str) -> EncoderConfig:
    return EncoderConfig(depth=1, d_model=16, heads=2, experts=2, slots=2, patch_size=8, image_size=16, embed_dim=8, variant=variant)


def block_cases(seed: int = 0) -> list[Case]:
    out = []
    for variant in ("vanilla", "softmoe", "la_softmoe"):
        cfg = _small_config(variant)
        block = EncoderBlock(cfg, seed, 0)
        x = Tensor(_randn(seed + 20, 1, cfg.n_tokens, cfg.d_model))
        probe = Tensor(_randn(seed + 21, 1, cfg.n_tokens, cfg.d_model))
        wrt = [x] + list(block.parameters().values())
        out.append(Case(f"block[{variant}]", lambda b=block, x=x, p=probe: (b(x) * p).mean(), wrt, max_entries=4))
    return out


def full_cases(seed: int = 0, cfg: EncoderConfig | None = None, variants=("vanilla", "softmoe", "la_softmoe")) -> list[Case]:
    """Contrastive loss of the whole dual encoder (default: the 2-block desk config) per variant."""
    base = cfg or EncoderConfig()
    out = []
    for variant in variants:
        cfg = base.replace(variant=variant)
        model = DualEncoder(cfg, seed)
        images = T.rng(seed, "gradcheck.images").uniform(size=(2, cfg.image_size, cfg.image_size, cfg.channels))

        def loss(model=model, images=images):
            return clip_loss(model.encode_images(images), model.class_text("T-8"), model.temperature())

        out.append(Case(f"full[{variant}, depth={cfg.depth}]", loss, list(model.parameters().values()), max_entries=2))
    return out


def cases_for(scope: str, seed: int = 0) -> list[Case]:
    if scope not in SCOPES:
        raise ValueError(f"unknown scope {scope!r}; expected one of {SCOPES}")
    return {"ops": op_cases, "moe": moe_cases, "block": block_cases, "full": full_cases}[scope](seed)


def run_cases(cases: list[Case], h: float = 1e-5, tol: float = 1e-4, seed: int = 0) -> list[CaseResult]:
    results = []
    for case in cases:
        t0 = time.perf_counter()
        report = grad_check(case.f, case.wrt, h=h, tol=tol, max_entries=case.max_entries, seed=seed)
        results.append(CaseResult(case.name, report.max_rel_error, report.checked, report.passed, time.perf_counter() - t0))
    return results
