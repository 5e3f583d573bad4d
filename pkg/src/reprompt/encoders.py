"""Small frozen transformers standing in for the CLIP image and text towers.

Weights are seeded normals (scale 0.02) and never updated.  The vision
encoder supports deep visual prompts (one prompt block per layer, replaced
between layers) with retrieval-conditioned prompts added on the first ``J``
layers.  Inputs are either patch tokens (``S x d`` per sample) or a single
``d``-vector feature (passthrough mode, see :meth:`VisionEncoder.lift`).
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass

import numpy as np

from .numerics import (
    RngStream,
    Tensor,
    concat,
    gelu,
    l2_normalize,
    layer_norm,
    matmul,
    softmax,
    swapaxes,
)

INIT_SCALE = 0.02
UNIT_TOL = 1e-4


@dataclass(frozen=True)
class VisionEncoderConfig:
    layers: int = 12
    dim: int = 64
    patches: int = 16
    heads: int = 4
    mlp_ratio: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.layers < 1 or self.patches < 1:
            raise ValueError("layers and patches must be >= 1")
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")


@dataclass(frozen=True)
class TextEncoderConfig:
    n_classes: int
    layers: int = 12
    dim: int = 64
    heads: int = 4
    prompt_len: int = 4
    mlp_ratio: int = 4
    seed: int = 1

    def __post_init__(self):
        if self.n_classes < 1:
            raise ValueError("class token table is empty")
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")
        if self.prompt_len < 0:
            raise ValueError("prompt_len must be >= 0")


def fingerprint64(*parts) -> int:
    h = hashlib.blake2b(repr(parts).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def _hash_arrays(arrays) -> int:
    h = hashlib.blake2b(digest_size=8)
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return int.from_bytes(h.digest(), "little")


class FrozenBlock:
    """Pre-LN transformer block with untrainable weights."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng: RngStream):
        hidden = dim * mlp_ratio
        self.heads = heads
        self.arrays = {
            "ln1_g": np.ones(dim),
            "ln1_b": np.zeros(dim),
            "wq": rng.normal((dim, dim), INIT_SCALE),
            "wk": rng.normal((dim, dim), INIT_SCALE),
            "wv": rng.normal((dim, dim), INIT_SCALE),
            "wo": rng.normal((dim, dim), INIT_SCALE),
            "ln2_g": np.ones(dim),
            "ln2_b": np.zeros(dim),
            "w1": rng.normal((dim, hidden), INIT_SCALE),
            "b1": np.zeros(hidden),
            "w2": rng.normal((hidden, dim), INIT_SCALE),
            "b2": np.zeros(dim),
        }
        for a in self.arrays.values():
            a.setflags(write=False)
        self.t = {k: Tensor(v) for k, v in self.arrays.items()}

    def attention(self, x: Tensor) -> tuple[Tensor, Tensor]:
        t = self.t
        B, T, d = x.shape
        H = self.heads
        dh = d // H
        h = layer_norm(x, t["ln1_g"], t["ln1_b"])

        def split(w):
            return swapaxes(matmul(h, w).reshape(B, T, H, dh), 1, 2)  # B,H,T,dh

        q, k, v = split(t["wq"]), split(t["wk"]), split(t["wv"])
        attn = softmax(matmul(q, swapaxes(k, 2, 3)) * (1.0 / np.sqrt(dh)), axis=-1)
        ctx = swapaxes(matmul(attn, v), 1, 2).reshape(B, T, d)
        return matmul(ctx, t["wo"]), attn

    def __call__(self, x: Tensor, return_attention: bool = False):
        t = self.t
        a, attn = self.attention(x)
        x = x + a
        h = layer_norm(x, t["ln2_g"], t["ln2_b"])
        x = x + matmul(gelu(matmul(h, t["w1"]) + t["b1"]), t["w2"]) + t["b2"]
        return (x, attn) if return_attention else x


class VisionEncoder:
    """Frozen ViT-style encoder; shared for the image and retrieval branches."""

    def __init__(self, config: VisionEncoderConfig = VisionEncoderConfig()):
        self.config = config
        rng = RngStream(config.seed, stream_id=0)
        d, S = config.dim, config.patches
        self.blocks = [
            FrozenBlock(d, config.heads, config.mlp_ratio, rng) for _ in range(config.layers)
        ]
        self.cls_embed = rng.normal((d,), INIT_SCALE)
        self.pos_embed = rng.normal((S + 1, d), INIT_SCALE)
        self.cls_embed.setflags(write=False)
        self.pos_embed.setflags(write=False)

    @property
    def fingerprint(self) -> int:
        return fingerprint64("vision", tuple(sorted(asdict(self.config).items())))

    def parameter_hash(self) -> int:
        arrays = [self.cls_embed, self.pos_embed]
        for b in self.blocks:
            arrays.extend(b.arrays[k] for k in sorted(b.arrays))
        return _hash_arrays(arrays)

    # -- input handling ---------------------------------------------------

    def lift(self, features) -> tuple[np.ndarray, np.ndarray]:
        """Turn ``B x d`` features into (class tokens, ``B x S x d`` patches).

        Passthrough features carry no spatial structure: the feature seeds
        the class token and every patch token, offset by the positional
        embedding.
        """
        f = np.asarray(features, dtype=np.float64)
        cls = f + self.pos_embed[0]
        patches = f[:, None, :] + self.pos_embed[None, 1:]
        return cls, patches

    def _tokens(self, inputs) -> tuple[np.ndarray, np.ndarray]:
        x = np.asarray(inputs, dtype=np.float64)
        d, S = self.config.dim, self.config.patches
        if x.ndim == 2:
            if x.shape[1] != d:
                raise ValueError(f"feature dimension {x.shape[1]} != {d}")
            return self.lift(x)
        if x.ndim == 3:
            if x.shape[1:] != (S, d):
                raise ValueError(f"patch input must be B x {S} x {d}, got {x.shape}")
            cls = np.broadcast_to(self.cls_embed + self.pos_embed[0], (x.shape[0], d))
            return cls, x + self.pos_embed[None, 1:]
        raise ValueError("inputs must be B x d features or B x S x d patches")

    # -- forwards ---------------------------------------------------------

    def encode_frozen(self, inputs, patch: bool = False) -> np.ndarray:
        """Frozen features z_q: passthrough-normalized vectors or promptless CLS output.

        1-D input is one feature, 2-D a feature batch, 3-D a patch batch.  Pass
        ``patch=True`` to encode a single ``S x d`` patch matrix.
        """
        x = np.asarray(inputs, dtype=np.float64)
        single = x.ndim == 1 or patch
        if patch:
            if x.ndim != 2:
                raise ValueError("patch=True expects a single S x d matrix")
            x = x[None]
        elif x.ndim == 1:
            x = x[None]
        if x.ndim == 2:
            if x.shape[1] != self.config.dim:
                raise ValueError(f"feature dimension {x.shape[1]} != {self.config.dim}")
            out = l2_normalize(Tensor(x)).data
        else:
            out = self.forward(x).data
        return out[0] if single else out

    def forward(
        self,
        inputs,
        visual_prompts=None,
        dynamic_prompts=None,
        return_attention: bool = False,
    ):
        """Prompted forward; returns unit CLS features ``B x d`` (and attention maps).

        ``visual_prompts`` is a list of ``L`` prompt matrices (``d x N``) or None;
        ``dynamic_prompts`` a list of ``J`` batched ``B x d x N`` tensors added
        to the first ``J`` prompt blocks.
        """
        cfg = self.config
        cls, patches = self._tokens(inputs)
        B = patches.shape[0]
        dyn = list(dynamic_prompts or [])
        if visual_prompts is None and dyn:
            raise ValueError("dynamic prompts need a visual prompt stack")
        if visual_prompts is not None and len(visual_prompts) != cfg.layers:
            raise ValueError(f"expected {cfg.layers} visual prompt sets")
        if len(dyn) > cfg.layers:
            raise ValueError("J exceeds the number of layers")
        n_prompt = 0 if visual_prompts is None else visual_prompts[0].shape[-1]

        def prompt_block(layer: int):
            if visual_prompts is None:
                return None
            p = visual_prompts[layer]
            if p.shape != (cfg.dim, n_prompt):
                raise ValueError(f"visual prompt {layer} has shape {p.shape}")
            if layer < len(dyn):
                dp = dyn[layer]
                if dp.shape != (B, cfg.dim, n_prompt):
                    raise ValueError(f"dynamic prompt {layer} has shape {dp.shape}")
                p = dp + p
            else:
                p = p.reshape(1, cfg.dim, n_prompt) + np.zeros((B, 1, 1))
            return swapaxes(p, 1, 2)  # B x N x d

        cls_t = Tensor(cls.reshape(B, 1, cfg.dim))
        patch_t = Tensor(patches)
        maps = []
        first = prompt_block(0)
        x = concat([cls_t, first, patch_t] if first is not None else [cls_t, patch_t], axis=1)
        for i, block in enumerate(self.blocks):
            if i > 0 and n_prompt:
                x = concat([x[:, :1], prompt_block(i), x[:, 1 + n_prompt :]], axis=1)
            if return_attention:
                x, attn = block(x, return_attention=True)
                maps.append(attn)
            else:
                x = block(x)
        out = l2_normalize(x[:, 0])
        return (out, maps) if return_attention else out


class TextEncoder:
    """Frozen text transformer over ``[prompt tokens..., class token]`` sequences."""

    def __init__(self, config: TextEncoderConfig):
        self.config = config
        rng = RngStream(config.seed, stream_id=1)
        d = config.dim
        self.blocks = [
            FrozenBlock(d, config.heads, config.mlp_ratio, rng) for _ in range(config.layers)
        ]
        self.class_tokens = rng.normal((config.n_classes, d), INIT_SCALE)
        self.pos_embed = rng.normal((config.prompt_len + 1, d), INIT_SCALE)
        self.class_tokens.setflags(write=False)
        self.pos_embed.setflags(write=False)

    def parameter_hash(self) -> int:
        arrays = [self.class_tokens, self.pos_embed]
        for b in self.blocks:
            arrays.extend(b.arrays[k] for k in sorted(b.arrays))
        return _hash_arrays(arrays)

    def encode(self, prompt=None) -> Tensor:
        """Class features ``d x C`` for text prompt ``P_T`` (``d x M``)."""
        cfg = self.config
        C, d, M = cfg.n_classes, cfg.dim, cfg.prompt_len
        cls = Tensor(self.class_tokens.reshape(C, 1, d))
        if M:
            if prompt is None or prompt.shape != (d, M):
                raise ValueError(f"text prompt must be {d} x {M}")
            p = prompt.T.reshape(1, M, d) + np.zeros((C, 1, 1))
            x = concat([p, cls], axis=1)
        else:
            x = cls
        x = x + self.pos_embed[None, : M + 1]
        for block in self.blocks:
            x = block(x)
        return l2_normalize(x[:, -1]).T


def _check_unit(x: np.ndarray, what: str) -> None:
    norms = np.linalg.norm(x, axis=0 if what == "text features" else -1)
    if np.abs(norms - 1.0).max() > UNIT_TOL:
        raise ValueError(f"{what} must be unit-norm")


def predict_clip(image_feature, text_features, logit_scale: float = 100.0) -> Tensor:
    """softmax(logit_scale * image . text) over classes."""
    if logit_scale <= 0:
        raise ValueError("logit_scale must be positive")
    z = image_feature if isinstance(image_feature, Tensor) else Tensor(image_feature)
    f = text_features if isinstance(text_features, Tensor) else Tensor(text_features)
    _check_unit(z.data, "image feature")
    _check_unit(f.data, "text features")
    single = z.ndim == 1
    if single:
        z = z.reshape(1, -1)
    p = softmax(matmul(z, f) * logit_scale, axis=-1)
    return p[0] if single else p
