"""Residual bottleneck adapters, the final-stage projector, and checkpoints.

Levels 1..3 carry a pair of two-layer bottleneck adapters (one tuned for
image-level classification, one for pixel-level segmentation) that are
mixed residually into the frozen features; the mixed features are fed
forward into the next encoder stage, so all levels train jointly. Level 4
maps the final encoder output through a pair of square projections. These
tensors are the only trainable state.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .backbone import BackboneConfig, FrozenBackbone, StageFeatures, forward_with_hooks
from .errors import ConfigError, FormatError, ShapeError
from .fileio import Reader, write_bytes_atomic

CHECKPOINT_MAGIC = b"MVFA-CKPT\0"
CHECKPOINT_VERSION = 1

ARCH_ADAPTER = "adapter"
ARCH_PROJECTOR = "projector"
STYLE_DUAL = "dual"
STYLE_SINGLE = "single"
BRANCH_FEEDS = ("mean", "cls", "seg")


class Adapter:
    """Two-layer bottleneck transform: relu(f @ down) @ up."""

    def __init__(self, down: Tensor, up: Tensor):
        self.w1 = down
        self.w2 = up


class DualAdapter:
    def __init__(self, cls: Adapter, seg: Adapter):
        self.cls = cls
        self.seg = seg


class Projector:
    def __init__(self, w_cls: Tensor, w_seg: Tensor):
        self.w_cls = w_cls
        self.w_seg = w_seg


@dataclass
class AdaptedFeatures:
    """Per-level classification/segmentation features, levels 1..4."""

    cls: list
    seg: list


class MVFAParams:
    """The trainable state: three dual adapters plus the level-4 projector.

    ``arch`` switches between the default adapter architecture and the
    ablation variant with isolated per-level projectors (no feed-forward of
    adapted features). ``adapter_style`` single aliases the cls/seg branch
    to one shared adapter per level. ``branch_feed`` selects what enters
    the residual mix that feeds the next stage.
    """

    def __init__(self, gamma, arch, adapter_style, branch_feed,
                 adapters=None, projector=None, level_projectors=None):
        if not 0.0 <= gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0, 1], got {gamma}")
        if arch not in (ARCH_ADAPTER, ARCH_PROJECTOR):
            raise ConfigError(f"unknown architecture {arch!r}")
        if adapter_style not in (STYLE_DUAL, STYLE_SINGLE):
            raise ConfigError(f"unknown adapter style {adapter_style!r}")
        if branch_feed not in BRANCH_FEEDS:
            raise ConfigError(f"unknown branch feed {branch_feed!r}")
        self.gamma = float(gamma)
        self.arch = arch
        self.adapter_style = adapter_style
        self.branch_feed = branch_feed
        self.adapters = adapters
        self.projector = projector
        self.level_projectors = level_projectors

    def named_tensors(self):
        """Canonical (name, tensor) list; aliased tensors appear once."""
        out = []
        if self.arch == ARCH_ADAPTER:
            for i, dual in enumerate(self.adapters, start=1):
                if self.adapter_style == STYLE_DUAL:
                    out += [(f"adapter{i}.cls.down", dual.cls.w1),
                            (f"adapter{i}.cls.up", dual.cls.w2),
                            (f"adapter{i}.seg.down", dual.seg.w1),
                            (f"adapter{i}.seg.up", dual.seg.w2)]
                else:
                    out += [(f"adapter{i}.down", dual.cls.w1),
                            (f"adapter{i}.up", dual.cls.w2)]
            out += [("projector.cls", self.projector.w_cls),
                    ("projector.seg", self.projector.w_seg)]
        else:
            for i, proj in enumerate(self.level_projectors, start=1):
                out += [(f"level{i}.cls", proj.w_cls),
                        (f"level{i}.seg", proj.w_seg)]
        return out

    def tensors(self):
        return [t for _, t in self.named_tensors()]


def init_params(dim, seed=0, gamma=0.1, arch=ARCH_ADAPTER, adapter_style=STYLE_DUAL,
                branch_feed="mean", bottleneck=None, dtype=np.float32,
                text_features=None) -> MVFAParams:
    """Seeded initialization of the trainable tensors.

    Adapter down-projections start random at 1/sqrt(dim) scale and
    up-projections start at zero, so an untrained adapter contributes
    nothing and the mixed features equal (1 - gamma) times the frozen
    ones. Projections are random at 1/sqrt(dim) scale (a zero projector
    would produce unnormalizable all-zero rows).

    When ``text_features`` (the 2 x dim text matrix) is given, projection
    columns are orthogonalized against the text rows, so every projected
    feature starts with zero similarity to both rows: the model begins
    calibrated instead of confidently wrong, which matters at small step
    budgets.
    """
    if bottleneck is None:
        bottleneck = dim // 4
    if not 0 < bottleneck < dim:
        raise ConfigError(f"bottleneck width must be in (0, dim), got {bottleneck}")
    rng = np.random.default_rng(seed)

    text_complement = None
    if text_features is not None:
        rows = (text_features.data if isinstance(text_features, Tensor)
                else np.asarray(text_features)).astype(np.float64)
        basis, _ = np.linalg.qr(rows.T)
        text_complement = np.eye(dim) - basis @ basis.T

    def rand(rows, cols):
        return Tensor((rng.standard_normal((rows, cols)) / np.sqrt(dim)).astype(dtype),
                      requires_grad=True)

    def zero(rows, cols):
        return Tensor(np.zeros((rows, cols), dtype=dtype), requires_grad=True)

    def projection():
        w = rand(dim, dim)
        if text_complement is not None:
            w.data = (w.data.astype(np.float64) @ text_complement).astype(dtype)
        return w

    def adapter():
        return Adapter(rand(dim, bottleneck), zero(bottleneck, dim))

    if arch == ARCH_PROJECTOR:
        level_projectors = [Projector(projection(), projection()) for _ in range(4)]
        return MVFAParams(gamma, arch, adapter_style, branch_feed,
                          level_projectors=level_projectors)

    adapters = []
    for _ in range(3):
        if adapter_style == STYLE_DUAL:
            adapters.append(DualAdapter(adapter(), adapter()))
        else:
            shared = adapter()
            adapters.append(DualAdapter(shared, shared))
    projector = Projector(projection(), projection())
    return MVFAParams(gamma, arch, adapter_style, branch_feed,
                      adapters=adapters, projector=projector)


def apply_adapter(f: Tensor, a: Adapter) -> Tensor:
    """Bottleneck transform relu(f @ down) @ up."""
    return ag.matmul(ag.relu(ag.matmul(f, a.w1)), a.w2)


def residual_mix(f: Tensor, adapted: Tensor, gamma) -> Tensor:
    """gamma * adapted + (1 - gamma) * f."""
    if not 0.0 <= gamma <= 1.0:
        raise ConfigError(f"gamma must lie in [0, 1], got {gamma}")
    if f.shape != adapted.shape:
        raise ShapeError(f"residual_mix: shapes {f.shape} and {adapted.shape} differ")
    return ag.add(ag.scale(adapted, gamma), ag.scale(f, 1.0 - gamma))


def adapt_forward(backbone: FrozenBackbone, params: MVFAParams, image):
    """Run the encoder with adapters installed.

    Returns (AdaptedFeatures, StageFeatures). In adapter mode levels 1..3
    produce residually mixed cls/seg features and the next stage receives
    the branch-feed mix; level 4 is the projector applied to the final
    features. In projector mode the encoder runs untouched and every level
    gets its own isolated projection pair.
    """
    if params.arch == ARCH_PROJECTOR:
        stage = forward_with_hooks(backbone, image, None)
        cls, seg = [], []
        for f, proj in zip(stage.levels(), params.level_projectors):
            cls.append(ag.matmul(f, proj.w_cls))
            seg.append(ag.matmul(f, proj.w_seg))
        return AdaptedFeatures(cls, seg), stage

    gamma = params.gamma
    mixed = {}

    def hook(level, f):
        dual = params.adapters[level - 1]
        cls_adapted = apply_adapter(f, dual.cls)
        if params.adapter_style == STYLE_SINGLE:
            seg_adapted = cls_adapted
        else:
            seg_adapted = apply_adapter(f, dual.seg)
        mixed[level] = (residual_mix(f, cls_adapted, gamma),
                        residual_mix(f, seg_adapted, gamma))
        if params.branch_feed == "cls":
            feed = cls_adapted
        elif params.branch_feed == "seg":
            feed = seg_adapted
        else:
            feed = ag.scale(ag.add(cls_adapted, seg_adapted), 0.5)
        return residual_mix(f, feed, gamma)

    stage = forward_with_hooks(backbone, image, hook)
    cls = [mixed[1][0], mixed[2][0], mixed[3][0],
           ag.matmul(stage.f_vis, params.projector.w_cls)]
    seg = [mixed[1][1], mixed[2][1], mixed[3][1],
           ag.matmul(stage.f_vis, params.projector.w_seg)]
    return AdaptedFeatures(cls, seg), stage


def similarity_logits(f: Tensor, f_text: Tensor, tau) -> Tensor:
    """Cosine logits of grid features against the two text rows.

    Both operands are row-normalized; the product is scaled by 1/tau.
    """
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    fn = ag.l2norm_rows(f)
    tn = ag.l2norm_rows(f_text)
    return ag.scale(ag.matmul(fn, ag.transpose(tn)), 1.0 / tau)


# -- checkpoint format -------------------------------------------------------
#
# magic "MVFA-CKPT\0", u32 version, u32 x 6 backbone config fields
# (image_size, patch_size, dim, stages, blocks_per_stage, heads), u64 seed,
# u32 tensor count, then per tensor: u16 name length, UTF-8 name, u8 rank,
# u32 dims, 32-bit little-endian values. The trainable tensors plus a
# rank-0 "gamma" entry are stored; the architecture is recovered from the
# tensor names.

def save_checkpoint(path, config: BackboneConfig, params: MVFAParams):
    entries = params.named_tensors() + [("gamma", Tensor(np.float32(params.gamma)))]
    chunks = [CHECKPOINT_MAGIC,
              struct.pack("<I", CHECKPOINT_VERSION),
              struct.pack("<6IQ", config.image_size, config.patch_size, config.dim,
                          config.stages, config.blocks_per_stage, config.heads,
                          config.seed),
              struct.pack("<I", len(entries))]
    for name, tensor in entries:
        raw = name.encode("utf-8")
        arr = np.asarray(tensor.data, dtype="<f4")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    write_bytes_atomic(path, b"".join(chunks))


def _read_entries(reader: Reader):
    count = reader.u32()
    entries = {}
    for _ in range(count):
        name = reader.take(reader.u16()).decode("utf-8")
        rank = reader.u8()
        shape = tuple(reader.u32() for _ in range(rank))
        n = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(reader.take(4 * n), dtype="<f4").reshape(shape)
        entries[name] = values.astype(np.float32)
    return entries


def load_checkpoint(path, branch_feed="mean"):
    """Read a checkpoint back into (BackboneConfig, MVFAParams)."""
    with open(path, "rb") as fh:
        reader = Reader(fh.read(), str(path))
    reader.expect(CHECKPOINT_MAGIC)
    version = reader.u32()
    if version != CHECKPOINT_VERSION:
        reader.fail(f"unsupported version {version}")
    image_size, patch_size, dim, stages, blocks, heads = (
        reader.u32() for _ in range(6))
    seed = reader.u64()
    config = BackboneConfig(image_size=image_size, patch_size=patch_size, dim=dim,
                            stages=stages, blocks_per_stage=blocks, heads=heads,
                            seed=seed)
    entries = _read_entries(reader)
    reader.done()

    if "gamma" not in entries:
        raise FormatError(f"{path}: missing gamma entry")
    gamma = float(entries.pop("gamma"))

    def trainable(name):
        if name not in entries:
            raise FormatError(f"{path}: missing tensor {name!r}")
        return Tensor(entries.pop(name), requires_grad=True)

    if any(name.startswith("level") for name in entries):
        projs = [Projector(trainable(f"level{i}.cls"), trainable(f"level{i}.seg"))
                 for i in range(1, 5)]
        params = MVFAParams(gamma, ARCH_PROJECTOR, STYLE_DUAL, branch_feed,
                            level_projectors=projs)
    else:
        dual = "adapter1.cls.down" in entries
        adapters = []
        for i in range(1, 4):
            if dual:
                adapters.append(DualAdapter(
                    Adapter(trainable(f"adapter{i}.cls.down"), trainable(f"adapter{i}.cls.up")),
                    Adapter(trainable(f"adapter{i}.seg.down"), trainable(f"adapter{i}.seg.up"))))
            else:
                shared = Adapter(trainable(f"adapter{i}.down"), trainable(f"adapter{i}.up"))
                adapters.append(DualAdapter(shared, shared))
        projector = Projector(trainable("projector.cls"), trainable("projector.seg"))
        params = MVFAParams(gamma, ARCH_ADAPTER, STYLE_DUAL if dual else STYLE_SINGLE,
                            branch_feed, adapters=adapters, projector=projector)
    if entries:
        raise FormatError(f"{path}: unexpected tensors {sorted(entries)}")
    return config, params
