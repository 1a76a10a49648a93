"""Deterministic frozen ViT-style visual encoder with staged outputs.

The encoder stands in for a large pre-trained model: its weights are a
pure function of (config, seed), every matrix drawn from a seeded
generator and scaled by 1/sqrt(fan_in), with a fixed sinusoidal position
table. Nothing in here ever requires gradients. The tokens are patches
only (no class token) and the blocks run in four stages; a caller-supplied
hook can transform the running features between stages, which is how
adapters are inserted without touching the frozen weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ContractError, ShapeError


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 64
    patch_size: int = 8
    dim: int = 64
    stages: int = 4
    blocks_per_stage: int = 2
    heads: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.image_size <= 0 or self.patch_size <= 0:
            raise ConfigError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.stages != 4:
            raise ConfigError("the encoder is defined with exactly 4 stages")
        if self.blocks_per_stage < 1:
            raise ConfigError("blocks_per_stage must be at least 1")
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must fit in an unsigned 64-bit integer")

    @property
    def grid_side(self) -> int:
        return self.image_size // self.patch_size

    @property
    def grid_count(self) -> int:
        return self.grid_side ** 2


@dataclass
class StageFeatures:
    """Raw per-stage grid features; f1..f3 are pre-hook, f_vis is final."""

    f1: Tensor
    f2: Tensor
    f3: Tensor
    f_vis: Tensor

    def levels(self):
        return (self.f1, self.f2, self.f3, self.f_vis)


class _Block:
    __slots__ = ("ln1_g", "ln1_b", "wq", "wk", "wv", "wo",
                 "ln2_g", "ln2_b", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2")


class FrozenBackbone:
    """Immutable encoder weights; shareable across threads for inference."""

    def __init__(self, config: BackboneConfig, dtype, patch_w, pos, stages):
        self.config = config
        self.dtype = dtype
        self.patch_w = patch_w
        self.pos = pos
        self.stages = stages  # list of 4 lists of _Block

    def weight_tensors(self):
        out = [self.patch_w, self.pos]
        for blocks in self.stages:
            for blk in blocks:
                out += [blk.ln1_g, blk.ln1_b, *blk.wq, *blk.wk, *blk.wv, *blk.wo,
                        blk.ln2_g, blk.ln2_b, blk.mlp_w1, blk.mlp_b1, blk.mlp_w2, blk.mlp_b2]
        return out

    def embed(self, image):
        tokens = patch_tokens(image.data if isinstance(image, Tensor) else np.asarray(image),
                              self.config)
        x = ag.matmul(Tensor(tokens.astype(self.dtype)), self.patch_w)
        return ag.add(x, self.pos)

    def run_stage(self, index, x):
        for blk in self.stages[index]:
            x = _block_forward(x, blk, self.config)
        return x


def sinusoidal_table(count, dim):
    """Fixed sine/cosine position encodings, one row per grid token."""
    half = (dim + 1) // 2
    pos = np.arange(count)[:, None].astype(np.float64)
    freq = np.power(10000.0, -2.0 * np.arange(half) / dim)[None, :]
    angles = pos * freq
    table = np.zeros((count, 2 * half))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table[:, :dim]


def patch_tokens(image, config: BackboneConfig):
    """Cut an image into non-overlapping patches, row-major over the grid.

    Accepts (h, w) or (h, w, c) with c in {1, 3}; color channels are
    averaged to one intensity channel before patching.
    """
    arr = np.asarray(image)
    if arr.ndim == 3:
        if arr.shape[2] not in (1, 3):
            raise ShapeError(f"patch_tokens: expected 1 or 3 channels, got {arr.shape[2]}")
        arr = arr.mean(axis=2)
    if arr.ndim != 2:
        raise ShapeError(f"patch_tokens: expected an image, got shape {arr.shape}")
    size = config.image_size
    if arr.shape != (size, size):
        raise ShapeError(f"patch_tokens: image shape {arr.shape} does not match "
                         f"configured size {(size, size)}")
    p = config.patch_size
    g = config.grid_side
    return arr.reshape(g, p, g, p).transpose(0, 2, 1, 3).reshape(g * g, p * p)


def layer_norm(x, gamma=None, beta=None, eps=1e-5):
    """Per-row layer normalization; affine is applied when gamma is given."""
    mu = ag.mean(x, axis=1, keepdims=True)
    centered = ag.add(x, ag.scale(mu, -1.0))
    var = ag.mean(ag.mul(centered, centered), axis=1, keepdims=True)
    # 1/sqrt(var + eps) composed from exp and log keeps the op set small
    rstd = ag.exp(ag.scale(ag.log(ag.add(var, eps)), -0.5))
    normed = ag.mul(centered, rstd)
    if gamma is None:
        return normed
    return ag.add(ag.mul(normed, gamma), beta)


def _block_forward(x, blk, config):
    head_dim = config.dim // config.heads
    att_scale = 1.0 / np.sqrt(head_dim)

    h = layer_norm(x, blk.ln1_g, blk.ln1_b)
    attended = None
    for wq, wk, wv, wo in zip(blk.wq, blk.wk, blk.wv, blk.wo):
        q = ag.matmul(h, wq)
        k = ag.matmul(h, wk)
        v = ag.matmul(h, wv)
        att = ag.softmax_rows(ag.scale(ag.matmul(q, ag.transpose(k)), att_scale))
        head = ag.matmul(ag.matmul(att, v), wo)
        attended = head if attended is None else ag.add(attended, head)
    x = ag.add(x, attended)

    h2 = layer_norm(x, blk.ln2_g, blk.ln2_b)
    hidden = ag.relu(ag.add(ag.matmul(h2, blk.mlp_w1), blk.mlp_b1))
    mlp = ag.add(ag.matmul(hidden, blk.mlp_w2), blk.mlp_b2)
    return ag.add(x, mlp)


def init_backbone(config: BackboneConfig, dtype=np.float32) -> FrozenBackbone:
    """Build the frozen encoder deterministically from (config, seed)."""
    rng = np.random.default_rng(config.seed)
    d = config.dim
    head_dim = d // config.heads
    mlp_dim = 2 * d

    def frozen(arr):
        return Tensor(arr.astype(dtype), requires_grad=False)

    def matrix(rows, cols, fan_in):
        return frozen(rng.standard_normal((rows, cols)) / np.sqrt(fan_in))

    p2 = config.patch_size ** 2
    patch_w = matrix(p2, d, p2)
    pos = frozen(sinusoidal_table(config.grid_count, d))

    stages = []
    for _ in range(config.stages):
        blocks = []
        for _ in range(config.blocks_per_stage):
            blk = _Block()
            blk.ln1_g = frozen(1.0 + 0.02 * rng.standard_normal((1, d)))
            blk.ln1_b = frozen(0.02 * rng.standard_normal((1, d)))
            blk.wq = [matrix(d, head_dim, d) for _ in range(config.heads)]
            blk.wk = [matrix(d, head_dim, d) for _ in range(config.heads)]
            blk.wv = [matrix(d, head_dim, d) for _ in range(config.heads)]
            blk.wo = [matrix(head_dim, d, head_dim) for _ in range(config.heads)]
            blk.ln2_g = frozen(1.0 + 0.02 * rng.standard_normal((1, d)))
            blk.ln2_b = frozen(0.02 * rng.standard_normal((1, d)))
            blk.mlp_w1 = matrix(d, mlp_dim, d)
            blk.mlp_b1 = frozen(np.zeros((1, mlp_dim)))
            blk.mlp_w2 = matrix(mlp_dim, d, mlp_dim)
            blk.mlp_b2 = frozen(np.zeros((1, d)))
            blocks.append(blk)
        stages.append(blocks)
    return FrozenBackbone(config, dtype, patch_w, pos, stages)


def forward_with_hooks(backbone: FrozenBackbone, image, hook=None) -> StageFeatures:
    """Run the encoder, optionally transforming features between stages.

    ``hook(level, features)`` is called after stages 1..3 with the raw
    stage output and must return the (grid, dim) tensor fed to the next
    stage. The returned StageFeatures always hold the raw, pre-hook
    outputs plus the final stage-4 features.
    """
    x = backbone.embed(image)
    raw = []
    for stage_index in range(4):
        x = backbone.run_stage(stage_index, x)
        if stage_index < 3:
            raw.append(x)
            if hook is not None:
                fed = hook(stage_index + 1, x)
                if not isinstance(fed, Tensor) or fed.shape != x.shape:
                    got = fed.shape if isinstance(fed, Tensor) else type(fed).__name__
                    raise ContractError(
                        f"hook at level {stage_index + 1} must return a tensor of "
                        f"shape {x.shape}, got {got}")
                x = fed
    return StageFeatures(raw[0], raw[1], raw[2], x)
