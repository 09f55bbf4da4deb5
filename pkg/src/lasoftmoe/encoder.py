"""Contrastive dual encoder: a ViT image tower with optional MoE branches and a
hashed bag-of-tokens text tower, joined by the symmetric contrastive loss."""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .layers import FeedForward, LayerNorm, Linear, Module, swap_last
from .moe import MoEVariant, SoftMoEParams
from .tensor import (
    Tensor,
    as_tensor,
    clamp_max,
    concat,
    fnv1a_64,
    l2_normalize,
    log_softmax,
    no_grad,
    parameter,
    rng,
    softmax,
    stack,
)

VOCAB_BUCKETS = 4096
PLACEHOLDER = "<CLASS>"
CLASSES = ("live", "fake")
MAX_TEMPERATURE = 100.0

# Prompt sentences T-1 .. T-8
DEFAULT_TEMPLATES = (
    "There is a <CLASS> face in this photo.",
    "<CLASS> face is in this photo.",
    "A photo of a <CLASS> face.",
    "This is an example of a <CLASS> face.",
    "This is how a <CLASS> face looks like.",
    "This photo contains <CLASS> face.",
    "The picture is a <CLASS> face.",
    "This is an image of a <CLASS> face.",
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    depth: int = 2
    d_model: int = 64
    heads: int = 4
    experts: int = 4
    slots: int = 8
    patch_size: int = 8
    image_size: int = 32
    channels: int = 3
    embed_dim: int = 32
    variant: str = "la_softmoe"  # vanilla | softmoe | la_softmoe
    mlp_ratio: int = 4
    ln_eps: float = 1e-5
    # fixed input normalization applied before patching
    pixel_mean: float = 0.5
    pixel_std: float = 0.25

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.variant not in ("vanilla", "softmoe", "la_softmoe"):
            raise ConfigError(f"unknown variant {self.variant!r}")
        if min(self.depth + 1, self.experts, self.slots, self.embed_dim, self.channels) < 1:
            raise ConfigError("depth must be >= 0 and all other sizes >= 1")

    @property
    def d_k(self) -> int:
        return self.d_model // self.heads

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_tokens(self) -> int:
        return self.grid**2 + 1

    @property
    def moe_variant(self) -> MoEVariant | None:
        return None if self.variant == "vanilla" else MoEVariant(self.variant)

    def replace(self, **changes) -> "EncoderConfig":
        return EncoderConfig(**{**asdict(self), **changes})


# Reference scale: ViT-B/16 with 4 experts and 49 slots in each of 12 blocks.
REFERENCE_CONFIG = dict(depth=12, d_model=768, heads=12, experts=4, slots=49, patch_size=16, image_size=224)


class PromptSet:
    """Prompt templates, each holding one ``<CLASS>`` placeholder."""

    def __init__(self, templates=DEFAULT_TEMPLATES):
        templates = list(templates)
        for t in templates:
            if t.count(PLACEHOLDER) != 1:
                raise ConfigError(f"template must contain exactly one {PLACEHOLDER}: {t!r}")
        self.templates = templates

    @classmethod
    def from_file(cls, path) -> "PromptSet":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln.strip() for ln in lines if ln.strip()])

    def ids(self) -> list[str]:
        return [f"T-{i + 1}" for i in range(len(self.templates))]

    def render(self, template_id: str | int, label: str) -> str:
        if label not in CLASSES:
            raise ValueError(f"class must be one of {CLASSES}, got {label!r}")
        return self.templates[self._index(template_id)].replace(PLACEHOLDER, label)

    def _index(self, template_id) -> int:
        if isinstance(template_id, str):
            m = re.fullmatch(r"T-(\d+)", template_id.strip())
            if not m:
                raise KeyError(f"unknown template id {template_id!r}")
            template_id = int(m.group(1))
        i = int(template_id) - 1
        if not 0 <= i < len(self.templates):
            raise KeyError(f"unknown template id T-{template_id}")
        return i


def tokenize(sentence: str) -> list[str]:
    return re.findall(r"[a-z0-9]+", sentence.lower())


def token_bucket(token: str) -> int:
    return fnv1a_64(token.encode("utf-8")) % VOCAB_BUCKETS


def bag_of_tokens(sentence: str) -> np.ndarray:
    counts = np.zeros(VOCAB_BUCKETS)
    for tok in tokenize(sentence):
        counts[token_bucket(tok)] += 1.0
    return counts


# ---------------------------------------------------------------------------
# Image tower
# ---------------------------------------------------------------------------


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, H, W, C) -> (B, patches, patch_size * patch_size * C), row-major patch order."""
    b, h, w, c = images.shape
    if h % patch_size or w % patch_size:
        raise ConfigError(f"image {h}x{w} not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    x = images.reshape(b, gh, patch_size, gw, patch_size, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, gh * gw, patch_size * patch_size * c)


class PatchEmbed(Module):
    def __init__(self, cfg: EncoderConfig, seed: int):
        self.cfg = cfg
        d_patch = cfg.patch_size**2 * cfg.channels
        self.proj = Linear(d_patch, cfg.d_model, seed, "patch.proj")
        gen = rng(seed, "patch.tokens")
        self.cls_token = parameter(gen.normal(0.0, 0.02, size=cfg.d_model))
        self.pos_embed = parameter(gen.normal(0.0, 0.02, size=(cfg.n_tokens, cfg.d_model)))

    def tokens(self, images: np.ndarray) -> Tensor:
        """Patch and class tokens before the positional embedding is added."""
        cfg = self.cfg
        images = np.asarray(images, dtype=np.float64)
        if images.shape[1:3] != (cfg.image_size, cfg.image_size):
            raise ConfigError(f"expected {cfg.image_size}x{cfg.image_size} images, got {images.shape[1:3]}")
        pixels = (images - cfg.pixel_mean) / cfg.pixel_std
        patches = self.proj(Tensor(patchify(pixels, cfg.patch_size)))
        b = images.shape[0]
        cls = self.cls_token.reshape(1, 1, cfg.d_model) + Tensor(np.zeros((b, 1, cfg.d_model)))
        return concat([cls, patches], axis=1)

    def __call__(self, images: np.ndarray) -> Tensor:
        return self.tokens(images) + self.pos_embed


class Attention(Module):
    """Multi-head scaled dot-product self-attention."""

    def __init__(self, cfg: EncoderConfig, seed: int, stream: str):
        self.heads = cfg.heads
        self.d_k = cfg.d_k
        d = cfg.d_model
        self.q = Linear(d, d, seed, stream + ".q")
        self.k = Linear(d, d, seed, stream + ".k")
        self.v = Linear(d, d, seed, stream + ".v")
        self.o = Linear(d, d, seed, stream + ".o")

    def _split(self, t: Tensor) -> Tensor:
        b, n, _ = t.shape
        return t.reshape(b, n, self.heads, self.d_k).transpose(0, 2, 1, 3)

    def weights(self, x: Tensor) -> Tensor:
        q, k = self._split(self.q(x)), self._split(self.k(x))
        return softmax((q @ swap_last(k)) * (1.0 / math.sqrt(self.d_k)), axis=-1)

    def __call__(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        v = self._split(self.v(x))
        heads = self.weights(x) @ v
        return self.o(heads.transpose(0, 2, 1, 3).reshape(b, n, d))


class EncoderBlock(Module):
    """Pre-norm residual block; the MoE branch, when present, runs beside the MLP
    on the same normalized input and both outputs join one residual sum."""

    def __init__(self, cfg: EncoderConfig, seed: int, index: int):
        stream = f"block{index}"
        self.ln1 = LayerNorm(cfg.d_model, cfg.ln_eps)
        self.attn = Attention(cfg, seed, stream + ".attn")
        self.ln2 = LayerNorm(cfg.d_model, cfg.ln_eps)
        self.mlp = FeedForward(cfg.d_model, cfg.mlp_ratio * cfg.d_model, seed, stream + ".mlp")
        variant = cfg.moe_variant
        self.moe = None
        if variant is not None:
            self.moe = SoftMoEParams(cfg.d_model, cfg.experts, cfg.slots, seed, stream + ".moe", variant=variant)

    def __call__(self, x: Tensor) -> Tensor:
        y = x + self.attn(self.ln1(x))
        h = self.ln2(y)
        out = y + self.mlp(h)
        if self.moe is not None:
            out = out + self.moe(h)
        return out


class ImageEncoder(Module):
    def __init__(self, cfg: EncoderConfig, seed: int):
        self.cfg = cfg
        self.patch = PatchEmbed(cfg, seed)
        self.blocks = [EncoderBlock(cfg, seed, i) for i in range(cfg.depth)]
        self.ln_final = LayerNorm(cfg.d_model, cfg.ln_eps)
        self.proj = Linear(cfg.d_model, cfg.embed_dim, seed, "image.proj")

    def features(self, images: np.ndarray) -> Tensor:
        x = self.patch(images)
        for block in self.blocks:
            x = block(x)
        return self.ln_final(x)[:, 0, :]

    def __call__(self, images: np.ndarray) -> Tensor:
        """Unit-norm embeddings, shape (B, embed_dim); a single (H, W, C) image gives (embed_dim,)."""
        images = np.asarray(images, dtype=np.float64)
        single = images.ndim == 3
        if single:
            images = images[None]
        emb = l2_normalize(self.proj(self.features(images)), axis=-1)
        return emb[0] if single else emb


# ---------------------------------------------------------------------------
# Text tower
# ---------------------------------------------------------------------------


class TextEncoder(Module):
    """Hashed bag-of-tokens: summed bucket embeddings, an affine map, L2 normalization."""

    def __init__(self, cfg: EncoderConfig, seed: int, width: int | None = None):
        width = width or cfg.d_model
        self.table = parameter(rng(seed, "text.table").normal(0.0, 1.0 / math.sqrt(width), size=(VOCAB_BUCKETS, width)))
        self.proj = Linear(width, cfg.embed_dim, seed, "text.proj")

    def encode_sentence(self, sentence: str) -> Tensor:
        counts = Tensor(bag_of_tokens(sentence)[None])
        return l2_normalize(self.proj(counts @ self.table), axis=-1)[0]


# ---------------------------------------------------------------------------
# Dual encoder and loss
# ---------------------------------------------------------------------------


class DualEncoder(Module):
    def __init__(self, cfg: EncoderConfig, seed: int, prompts: PromptSet | None = None):
        self.cfg = cfg
        self.seed = seed
        self.prompts = prompts or PromptSet()
        self.image = ImageEncoder(cfg, seed)
        self.text = TextEncoder(cfg, seed)
        self.log_temperature = parameter(np.array(math.log(1.0 / 0.07)))

    def temperature(self) -> Tensor:
        return clamp_max(self.log_temperature, math.log(MAX_TEMPERATURE)).exp()

    def encode_images(self, images) -> Tensor:
        return self.image(images)

    def encode_text(self, template_id, label: str) -> Tensor:
        return self.text.encode_sentence(self.prompts.render(template_id, label))

    def class_text(self, template_id) -> Tensor:
        """(2, embed_dim) text embeddings ordered (live, fake)."""
        return stack([self.encode_text(template_id, c) for c in CLASSES])


def text_encode(model: DualEncoder, template_id, class_label: str) -> Tensor:
    return model.encode_text(template_id, class_label)


def image_encode(model: DualEncoder, image) -> Tensor:
    return model.encode_images(image)


def similarity(image_emb: Tensor, text_emb: Tensor, temperature) -> Tensor:
    return (image_emb @ swap_last(text_emb)) * temperature


def clip_loss(image_emb: Tensor, text_emb: Tensor, temperature=1.0) -> Tensor:
    """Symmetric cross entropy over the image-text similarity matrix.

    ``-(1/2N) * sum_i [log softmax_row(S)_ii + log softmax_col(S)_ii]``
    with ``S = temperature * image_emb @ text_emb.T``.
    """
    s = similarity(as_tensor(image_emb), as_tensor(text_emb), temperature)
    return clip_loss_from_logits(s)


def clip_loss_from_logits(s: Tensor) -> Tensor:
    n = s.shape[0]
    if s.shape != (n, n) or n < 1:
        raise ValueError(f"similarity matrix must be square, got {s.shape}")
    eye = np.eye(n)
    rows = (log_softmax(s, axis=1) * eye).sum()
    cols = (log_softmax(s, axis=0) * eye).sum()
    return (rows + cols) * (-1.0 / (2 * n))


def live_probability(sim_live, sim_fake) -> np.ndarray:
    """Two-way softmax probability of the live class from scaled similarities."""
    gap = np.asarray(sim_live, dtype=np.float64) - np.asarray(sim_fake, dtype=np.float64)
    return expit(gap)


def classify(model: DualEncoder, images, template_id="T-8") -> tuple[np.ndarray, np.ndarray]:
    """Liveness probabilities and labels (1 = live, 0 = fake) for a batch of images."""
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    with no_grad():
        img = model.encode_images(images[None] if single else images)
        txt = model.class_text(template_id)
        sims = similarity(img, txt, model.temperature()).data
    score = live_probability(sims[:, 0], sims[:, 1])
    label = (sims[:, 0] >= sims[:, 1]).astype(np.int64)  # ties go to live, as score 0.5 does at threshold 0.5
    if single:
        return score[0], label[0]
    return score, label
