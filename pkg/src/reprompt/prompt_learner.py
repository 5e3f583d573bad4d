"""Learnable visual prompts and REConv blocks.

A REConv block treats the prompt input (``d x N`` token columns) as a 2-D map
with ``d`` channels and spatial extent ``1 x N``.  Each token is layer-normed,
then passed through a 1x1 reduce, a 3x3 mix (zero padding 1) and a 1x1
expand convolution.  The scaled result is added back onto the input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import RngStream, Tensor, conv2d, layer_norm, swapaxes

INIT_SCALE = 0.02


@dataclass
class REConvBlock:
    ln_gain: Tensor
    ln_bias: Tensor
    w_reduce: Tensor
    w_mid: Tensor
    w_expand: Tensor
    beta: float = 10.0

    @classmethod
    def init(cls, dim: int, rng: RngStream, beta: float = 10.0, zero_expand: bool = True):
        if beta <= 0:
            raise ValueError("beta must be positive")
        hidden = max(1, dim // 4)
        expand = np.zeros((dim, hidden, 1, 1)) if zero_expand else rng.normal(
            (dim, hidden, 1, 1), INIT_SCALE
        )
        return cls(
            ln_gain=Tensor(np.ones(dim), requires_grad=True),
            ln_bias=Tensor(np.zeros(dim), requires_grad=True),
            w_reduce=Tensor(rng.normal((hidden, dim, 1, 1), INIT_SCALE), requires_grad=True),
            w_mid=Tensor(rng.normal((hidden, hidden, 3, 3), INIT_SCALE), requires_grad=True),
            w_expand=Tensor(expand, requires_grad=True),
            beta=float(beta),
        )

    @property
    def dim(self) -> int:
        return self.ln_gain.shape[0]

    def parameters(self) -> dict[str, Tensor]:
        return {
            "ln_gain": self.ln_gain,
            "ln_bias": self.ln_bias,
            "w_reduce": self.w_reduce,
            "w_mid": self.w_mid,
            "w_expand": self.w_expand,
        }


def reconv_forward(block: REConvBlock, prompt_input) -> Tensor:
    """``beta * conv_path(LN(i)) + i`` for ``d x N`` or ``B x d x N`` input."""
    x = prompt_input if isinstance(prompt_input, Tensor) else Tensor(prompt_input)
    single = x.ndim == 2
    if single:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 3 or x.shape[1] != block.dim:
        raise ValueError(f"REConv input must be {block.dim} x N, got {x.shape}")
    B, d, N = x.shape
    h = swapaxes(layer_norm(swapaxes(x, 1, 2), block.ln_gain, block.ln_bias), 1, 2)
    h = h.reshape(B, d, 1, N)
    h = conv2d(h, block.w_reduce)
    h = conv2d(h, block.w_mid, padding=1)
    h = conv2d(h, block.w_expand)
    out = h.reshape(B, d, N) * block.beta + x
    return out[0] if single else out


class PromptLearner:
    """Deep visual prompt stack (``L`` sets of ``d x N``) plus ``J`` REConv blocks."""

    def __init__(
        self,
        layers: int,
        dim: int,
        n_prompts: int,
        depth: int,
        beta: float = 10.0,
        seed: int = 0,
        zero_expand: bool = True,
    ):
        if depth > layers:
            raise ValueError("retrieval-enhanced depth J exceeds layer count")
        if depth < 0 or n_prompts < 1:
            raise ValueError("invalid prompt learner shape")
        rng = RngStream(seed, stream_id=2)
        self.prompts = [
            Tensor(rng.normal((dim, n_prompts), INIT_SCALE), requires_grad=True)
            for _ in range(layers)
        ]
        self.blocks = [REConvBlock.init(dim, rng, beta, zero_expand) for _ in range(depth)]

    @property
    def depth(self) -> int:
        return len(self.blocks)

    @property
    def n_prompts(self) -> int:
        return self.prompts[0].shape[1]

    def parameters(self) -> dict[str, Tensor]:
        params = {f"P_I[{i + 1}]": p for i, p in enumerate(self.prompts)}
        for j, b in enumerate(self.blocks):
            for k, t in b.parameters().items():
                params[f"REConv[{j + 1}].{k}"] = t
        return params


def generate_dynamic_prompts(learner: PromptLearner, prompt_input) -> list[Tensor]:
    """One REConv output per retrieval-enhanced layer; empty when ``J == 0``."""
    return [reconv_forward(b, prompt_input) for b in learner.blocks]
