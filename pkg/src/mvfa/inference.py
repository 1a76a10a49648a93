"""Two-branch test-time scoring: text comparison, memory bank, fusion.

The zero-shot branch scores each level's features against the text rows
and averages the four levels; the few-shot branch measures cosine distance
to the nearest row of a per-level memory bank built from normal reference
images. Both produce an image score and a full-resolution map, combined
linearly with weights (beta1, beta2).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .adaptation import adapt_forward, similarity_logits
from .autograd import Tensor, no_grad
from .errors import BankError, ConfigError, NormalizationError
from .fileio import Reader, write_bytes_atomic

BANK_MAGIC = b"MVFA-BANK\0"
BANK_VERSION = 1
MAP_MAGIC = b"MVFA-MAP\0"


@dataclass
class MemoryBank:
    """Per-level stores of unit-norm cls/seg rows from normal references."""

    cls: list  # 4 arrays, each (rows, d) float32
    seg: list


@dataclass
class ZeroShotScores:
    c: float
    smap: np.ndarray
    c_levels: np.ndarray       # (4,)
    s_levels: np.ndarray       # (4, h, w)


@dataclass
class FewShotScores:
    c: float
    smap: np.ndarray
    c_levels: np.ndarray
    s_levels: np.ndarray


@dataclass
class AnomalyResult:
    c_pred: float
    s_pred: np.ndarray
    c_zero: float
    s_zero: np.ndarray
    c_few: float | None
    s_few: np.ndarray | None
    c_levels_zero: np.ndarray
    s_levels_zero: np.ndarray
    c_levels_few: np.ndarray | None
    s_levels_few: np.ndarray | None


def _normalize_rows(arr):
    norms = np.sqrt((arr * arr).sum(axis=1, keepdims=True))
    zero = np.flatnonzero(norms.reshape(-1) == 0)
    if zero.size:
        raise NormalizationError(f"feature row {int(zero[0])} has zero norm")
    return arr / norms


def _upsample(grid_map, out_hw):
    side = int(np.sqrt(grid_map.size))
    grid = grid_map.reshape(side, side)
    return ag.bilinear_upsample(Tensor(grid), out_hw).data


def build_memory_bank(normal_images, backbone, params) -> MemoryBank:
    """Collect normalized per-level features from normal reference images."""
    if not normal_images:
        raise BankError("memory bank needs at least one normal reference image")
    cls_rows = [[] for _ in range(4)]
    seg_rows = [[] for _ in range(4)]
    with no_grad():
        for image in normal_images:
            features, _ = adapt_forward(backbone, params, image)
            for level in range(4):
                cls_rows[level].append(_normalize_rows(
                    features.cls[level].data.astype(np.float32)))
                seg_rows[level].append(_normalize_rows(
                    features.seg[level].data.astype(np.float32)))
    return MemoryBank([np.concatenate(rows) for rows in cls_rows],
                      [np.concatenate(rows) for rows in seg_rows])


def zero_shot(features, f_text: Tensor, tau, out_hw) -> ZeroShotScores:
    """Average per-level text-similarity anomaly scores and maps."""
    c_levels = np.zeros(4)
    s_levels = np.zeros((4,) + tuple(out_hw))
    with no_grad():
        for level in range(4):
            cls_prob = ag.softmax_rows(
                similarity_logits(features.cls[level], f_text, tau)).data[:, 1]
            seg_prob = ag.softmax_rows(
                similarity_logits(features.seg[level], f_text, tau)).data[:, 1]
            c_levels[level] = cls_prob.max()
            s_levels[level] = _upsample(seg_prob, out_hw)
    return ZeroShotScores(float(c_levels.mean()), s_levels.mean(axis=0),
                          c_levels, s_levels)


def _min_cosine_distances(queries, store):
    """Distance 1 - max cosine of each query row against every store row.

    The similarity is computed as an elementwise product reduced over the
    feature axis, which reproduces a per-pair (u * v).sum() bit for bit.
    """
    q = _normalize_rows(queries)
    sims = (q[:, None, :] * store[None, :, :]).sum(axis=2)
    return 1.0 - sims.max(axis=1)


def few_shot(features, bank: MemoryBank, out_hw, normalize_maps=False) -> FewShotScores:
    """Nearest-bank-row cosine distances, position agnostic, per level."""
    if bank is None or any(store.size == 0 for store in bank.cls + bank.seg):
        raise BankError("few-shot scoring requires a non-empty memory bank")
    c_levels = np.zeros(4)
    s_levels = np.zeros((4,) + tuple(out_hw))
    with no_grad():
        for level in range(4):
            cls_dist = _min_cosine_distances(
                features.cls[level].data.astype(np.float32), bank.cls[level])
            seg_dist = _min_cosine_distances(
                features.seg[level].data.astype(np.float32), bank.seg[level])
            c_levels[level] = cls_dist.max()
            s_levels[level] = _upsample(seg_dist, out_hw)
    smap = s_levels.mean(axis=0)
    if normalize_maps:
        lo, hi = smap.min(), smap.max()
        smap = (smap - lo) / (hi - lo) if hi > lo else np.zeros_like(smap)
    return FewShotScores(float(c_levels.mean()), smap, c_levels, s_levels)


def fuse(zero: ZeroShotScores, few: FewShotScores | None, beta1, beta2) -> AnomalyResult:
    """Linear combination of the branches: beta1 * zero + beta2 * few."""
    if beta1 < 0 or beta2 < 0:
        raise ConfigError("fusion weights must be nonnegative")
    if few is None:
        if beta2 != 0:
            raise BankError("beta2 > 0 requires a memory bank")
        return AnomalyResult(beta1 * zero.c, beta1 * zero.smap, zero.c, zero.smap,
                             None, None, zero.c_levels, zero.s_levels, None, None)
    return AnomalyResult(beta1 * zero.c + beta2 * few.c,
                         beta1 * zero.smap + beta2 * few.smap,
                         zero.c, zero.smap, few.c, few.smap,
                         zero.c_levels, zero.s_levels, few.c_levels, few.s_levels)


def score_image(backbone, params, image, f_text, bank=None, beta1=0.5, beta2=0.5,
                tau=0.07, normalize_few=False) -> AnomalyResult:
    """Full two-branch scoring of one image."""
    out_hw = (backbone.config.image_size, backbone.config.image_size)
    with no_grad():
        features, _ = adapt_forward(backbone, params, image)
        zero = zero_shot(features, f_text, tau, out_hw)
        few = None
        if bank is not None:
            few = few_shot(features, bank, out_hw, normalize_maps=normalize_few)
    return fuse(zero, few, beta1, beta2)


# -- memory bank file --------------------------------------------------------
#
# magic "MVFA-BANK\0", u32 version, u8 level count, then per level two
# records (cls first): u8 role (0 = cls, 1 = seg), u32 row count, u32 d,
# 32-bit little-endian rows.

def save_bank(path, bank: MemoryBank):
    chunks = [BANK_MAGIC, struct.pack("<I", BANK_VERSION), struct.pack("<B", 4)]
    for level in range(4):
        for role, store in ((0, bank.cls[level]), (1, bank.seg[level])):
            arr = np.asarray(store, dtype="<f4")
            chunks.append(struct.pack("<BII", role, arr.shape[0], arr.shape[1]))
            chunks.append(arr.tobytes())
    write_bytes_atomic(path, b"".join(chunks))


def load_bank(path) -> MemoryBank:
    with open(path, "rb") as fh:
        reader = Reader(fh.read(), str(path))
    reader.expect(BANK_MAGIC)
    version = reader.u32()
    if version != BANK_VERSION:
        reader.fail(f"unsupported version {version}")
    levels = reader.u8()
    if levels != 4:
        reader.fail(f"expected 4 levels, got {levels}")
    cls, seg = [], []
    for _ in range(levels):
        for expected_role, stores in ((0, cls), (1, seg)):
            role = reader.u8()
            if role != expected_role:
                reader.fail(f"expected role {expected_role}, got {role}")
            rows = reader.u32()
            d = reader.u32()
            data = np.frombuffer(reader.take(4 * rows * d), dtype="<f4")
            stores.append(data.reshape(rows, d).astype(np.float32))
    reader.done()
    return MemoryBank(cls, seg)


# -- anomaly map file --------------------------------------------------------
#
# magic "MVFA-MAP\0", u32 h, u32 w, 32-bit little-endian row-major scores.

def save_map(path, scores):
    arr = np.asarray(scores, dtype="<f4")
    payload = MAP_MAGIC + struct.pack("<II", arr.shape[0], arr.shape[1]) + arr.tobytes()
    write_bytes_atomic(path, payload)


def load_map(path):
    with open(path, "rb") as fh:
        reader = Reader(fh.read(), str(path))
    reader.expect(MAP_MAGIC)
    h = reader.u32()
    w = reader.u32()
    data = np.frombuffer(reader.take(4 * h * w), dtype="<f4")
    reader.done()
    return data.reshape(h, w).astype(np.float32)


def map_to_u8(scores):
    """Min-max scale a score map into 8-bit for PGM rendering."""
    arr = np.asarray(scores, dtype=np.float64)
    lo, hi = arr.min(), arr.max()
    if hi <= lo:
        return np.zeros(arr.shape, dtype=np.uint8)
    return np.round((arr - lo) / (hi - lo) * 255.0).astype(np.uint8)
