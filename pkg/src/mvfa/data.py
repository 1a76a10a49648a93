"""Synthetic multi-texture defect data, PGM image I/O, manifests and splits.

Normal images are band-limited seeded noise with a per-modality spectral
profile; anomalous images add elliptical blobs or strokes whose support
becomes the ground-truth mask. Everything is a pure function of the
config, so regenerating a dataset reproduces it byte for byte. Samples are
listed in JSON-lines manifests (keys: image, mask, label, modality) with
paths relative to the manifest file; generation writes separate train and
test manifests so no test image can leak into training or the memory
bank.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, FormatError, ManifestError
from .fileio import write_bytes_atomic, write_text_atomic


# -- PGM ----------------------------------------------------------------------

def write_pgm(path, image):
    """Write an 8-bit grayscale image as binary PGM (P5, maxval 255)."""
    arr = np.asarray(image)
    if arr.ndim != 2 or arr.dtype != np.uint8:
        raise FormatError(f"write_pgm: expected a 2-D uint8 array, got "
                          f"{arr.dtype} shape {arr.shape}")
    h, w = arr.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    write_bytes_atomic(path, header + arr.tobytes())


def read_pgm(path):
    """Read a binary PGM written by :func:`write_pgm`; strict P5/255 only."""
    with open(path, "rb") as fh:
        payload = fh.read()

    def fail(offset, message):
        raise FormatError(f"{path}: {message} at byte {offset}")

    if not payload.startswith(b"P5\n"):
        fail(0, "expected magic 'P5'")
    dims_end = payload.find(b"\n", 3)
    if dims_end < 0:
        fail(3, "unterminated dimensions line")
    parts = payload[3:dims_end].split()
    if len(parts) != 2:
        fail(3, "expected '<width> <height>'")
    try:
        w, h = int(parts[0]), int(parts[1])
    except ValueError:
        fail(3, "dimensions are not integers")
    if w <= 0 or h <= 0:
        fail(3, "dimensions must be positive")
    maxval_end = payload.find(b"\n", dims_end + 1)
    if maxval_end < 0:
        fail(dims_end + 1, "unterminated maxval line")
    if payload[dims_end + 1:maxval_end] != b"255":
        fail(dims_end + 1, "maxval must be 255")
    body = payload[maxval_end + 1:]
    if len(body) != w * h:
        fail(maxval_end + 1, f"expected {w * h} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)


# -- synthetic generation -----------------------------------------------------

@dataclass(frozen=True)
class ModalityProfile:
    """Spectral texture profile; masks=False withholds segmentation masks.

    Defects in a modality share one intensity polarity (dark or bright
    lesions), the way a given imaging modality renders its pathology.
    """

    name: str
    base_freq: float
    contrast: float
    noise: float
    polarity: int = -1
    masks: bool = True

    def __post_init__(self):
        if self.polarity not in (-1, 1):
            raise ConfigError(f"polarity must be -1 or 1, got {self.polarity}")


DEFAULT_MODALITIES = (
    ModalityProfile("texture-a", base_freq=3.0, contrast=0.50, noise=0.03, polarity=-1),
    ModalityProfile("texture-b", base_freq=7.0, contrast=0.40, noise=0.04, polarity=-1),
    ModalityProfile("texture-c", base_freq=12.0, contrast=0.10, noise=0.015, polarity=-1),
)


@dataclass
class SynthConfig:
    modalities: tuple = DEFAULT_MODALITIES
    image_size: int = 64
    defect_count: tuple = (1, 3)
    defect_radius: tuple = (6.0, 10.0)
    defect_delta: float = 0.6
    benign_count: tuple = (0, 1)
    benign_radius: tuple = (6.0, 10.0)
    benign_delta: float = 0.6
    train_normals: int = 200
    train_anomalies: int = 32
    test_normals: int = 50
    test_anomalies: int = 50
    seed: int = 42

    def __post_init__(self):
        counts = (self.train_normals, self.train_anomalies,
                  self.test_normals, self.test_anomalies)
        if min(counts) < 1:
            raise ConfigError("all sample counts must be at least 1")
        if self.image_size < 8:
            raise ConfigError("image_size must be at least 8")
        if not self.modalities:
            raise ConfigError("need at least one modality profile")
        if self.defect_radius[0] <= 0 or self.defect_radius[0] > self.defect_radius[1]:
            raise ConfigError(f"bad defect radius range {self.defect_radius}")
        if 2 * (self.defect_radius[1] + 1) >= self.image_size:
            raise ConfigError(f"defect radius {self.defect_radius[1]} leaves no room "
                              f"in a {self.image_size}px image")
        if self.defect_count[0] < 1 or self.defect_count[0] > self.defect_count[1]:
            raise ConfigError(f"bad defect count range {self.defect_count}")

    @classmethod
    def from_dict(cls, raw: dict) -> "SynthConfig":
        raw = dict(raw)
        if "modalities" in raw:
            raw["modalities"] = tuple(ModalityProfile(**m) for m in raw["modalities"])
        for key in ("defect_count", "defect_radius", "benign_count", "benign_radius"):
            if key in raw:
                raw[key] = tuple(raw[key])
        return cls(**raw)


def _rng(*key):
    return np.random.default_rng(np.random.SeedSequence(list(key)))


def synth_normal_field(rng, size, profile: ModalityProfile):
    """Band-limited noise texture in [0, 1] with the profile's spectrum."""
    white = rng.standard_normal((size, size))
    spectrum = np.fft.rfft2(white)
    fy = np.fft.fftfreq(size)[:, None] * size
    fx = np.fft.rfftfreq(size)[None, :] * size
    radius = np.sqrt(fy * fy + fx * fx)
    spectrum *= np.exp(-0.5 * (radius / profile.base_freq) ** 2)
    field = np.fft.irfft2(spectrum, s=(size, size))
    field = (field - field.mean()) / (field.std() + 1e-12)
    image = 0.5 + 0.5 * profile.contrast * field
    image += profile.noise * rng.standard_normal((size, size))
    return np.clip(image, 0.0, 1.0)


def _ellipse_support(size, rng, radius_range):
    """Boolean support of one random rotated ellipse (thin ones look like strokes)."""
    rx = rng.uniform(*radius_range)
    ry = rx * rng.uniform(0.25, 1.0)
    theta = rng.uniform(0.0, np.pi)
    margin = radius_range[1] + 1.0
    cy = rng.uniform(margin, size - margin)
    cx = rng.uniform(margin, size - margin)
    yy, xx = np.mgrid[0:size, 0:size]
    dy, dx = yy - cy, xx - cx
    u = np.cos(theta) * dx + np.sin(theta) * dy
    v = -np.sin(theta) * dx + np.cos(theta) * dy
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def add_benign_structures(rng, image, config: SynthConfig, polarity=1):
    """Overlay benign blobs; they are normal anatomy, present in every image.

    A handful of reference images cannot cover their variety, so memory
    distance alone misreads them, while their consistent polarity keeps
    them recognizable as harmless.
    """
    out = image.copy()
    count = int(rng.integers(config.benign_count[0], config.benign_count[1] + 1))
    for _ in range(count):
        support = _ellipse_support(image.shape[0], rng, config.benign_radius)
        out[support] += float(polarity) * config.benign_delta * rng.uniform(0.75, 1.0)
    return np.clip(out, 0.0, 1.0)


def add_defects(rng, image, config: SynthConfig, polarity=-1, benign=False):
    """Insert defect-slot blobs; returns (image, mask).

    Normal samples draw the same number of slot structures with the
    opposite (benign) polarity and an empty mask, so the two classes share
    one structure-count and saliency distribution and differ only in
    polarity, which a nearest-reference comparison cannot see.
    """
    out = image.copy()
    mask = np.zeros(image.shape, dtype=bool)
    count = int(rng.integers(config.defect_count[0], config.defect_count[1] + 1))
    for _ in range(count):
        support = _ellipse_support(image.shape[0], rng, config.defect_radius)
        out[support] += float(polarity) * config.defect_delta * rng.uniform(0.75, 1.0)
        if not benign:
            mask |= support
    return np.clip(out, 0.0, 1.0), mask


def quantize(image):
    return np.round(np.asarray(image) * 255.0).astype(np.uint8)


def _synth_sample(config, modality_index, split_code, anomalous, index):
    profile = config.modalities[modality_index]
    rng = _rng(config.seed, modality_index, split_code, int(anomalous), index)
    base = synth_normal_field(rng, config.image_size, profile)
    base = add_benign_structures(rng, base, config, polarity=-profile.polarity)
    if not anomalous:
        slotted, _ = add_defects(rng, base, config, polarity=-profile.polarity,
                                 benign=True)
        return quantize(slotted), np.zeros(base.shape, dtype=bool)
    defected, mask = add_defects(rng, base, config, polarity=profile.polarity)
    image = quantize(defected)
    inside = np.abs(image.astype(np.int16) - quantize(base).astype(np.int16))[mask]
    outside = np.abs(image.astype(np.int16) - quantize(base).astype(np.int16))[~mask]
    if inside.mean() <= outside.mean():
        raise DataError(f"defect vanished in {profile.name} sample {index}")
    return image, mask


def gen_dataset(config: SynthConfig, out_dir):
    """Write images, masks and the train/test manifests; fully deterministic.

    Returns (train_manifest_path, test_manifest_path).
    """
    out_dir = os.fspath(out_dir)
    manifests = {"train": [], "test": []}
    for split_code, split in enumerate(("train", "test")):
        for modality_index, profile in enumerate(config.modalities):
            directory = os.path.join(out_dir, profile.name, split)
            os.makedirs(directory, exist_ok=True)
            if split == "train":
                n_normal, n_anomalous = config.train_normals, config.train_anomalies
            else:
                n_normal, n_anomalous = config.test_normals, config.test_anomalies
            for anomalous, total in ((False, n_normal), (True, n_anomalous)):
                kind = "anom" if anomalous else "normal"
                for index in range(total):
                    image, mask = _synth_sample(config, modality_index, split_code,
                                                anomalous, index)
                    rel = f"{profile.name}/{split}/{kind}_{index:04d}.pgm"
                    write_pgm(os.path.join(out_dir, rel), image)
                    mask_rel = None
                    if profile.masks:
                        mask_rel = f"{profile.name}/{split}/{kind}_{index:04d}_mask.pgm"
                        write_pgm(os.path.join(out_dir, mask_rel),
                                  mask.astype(np.uint8) * 255)
                    manifests[split].append({"image": rel, "mask": mask_rel,
                                             "label": int(anomalous),
                                             "modality": profile.name})
    paths = {}
    for split, rows in manifests.items():
        path = os.path.join(out_dir, f"{split}.jsonl")
        write_text_atomic(path, "".join(json.dumps(row) + "\n" for row in rows))
        paths[split] = path
    return paths["train"], paths["test"]


# -- manifests and splits -----------------------------------------------------

@dataclass(frozen=True)
class Sample:
    image: str
    label: int
    mask: str | None
    modality: str


@dataclass
class LoadedSample:
    image: np.ndarray          # float32 in [-1, 1], zero-centered
    label: int
    mask: np.ndarray | None    # float32 in {0, 1}
    modality: str
    path: str


def load_manifest(path, check_masks=True):
    """Parse a JSON-lines manifest into samples with absolute paths.

    With ``check_masks`` the masks are read and the "label 1 iff the mask
    has a positive pixel" rule plus the image/mask dimension agreement are
    enforced, naming the offending line.
    """
    base = os.path.dirname(os.path.abspath(os.fspath(path)))
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}: line {lineno}: invalid JSON ({exc})") from None
            try:
                image, label = row["image"], row["label"]
                mask, modality = row["mask"], row["modality"]
            except KeyError as exc:
                raise ManifestError(f"{path}: line {lineno}: missing key {exc}") from None
            if label not in (0, 1):
                raise ManifestError(f"{path}: line {lineno}: label must be 0 or 1")
            if not isinstance(modality, str) or not modality:
                raise ManifestError(f"{path}: line {lineno}: modality must be a "
                                    f"nonempty string")
            image_path = os.path.join(base, image)
            mask_path = os.path.join(base, mask) if mask is not None else None
            if check_masks and mask_path is not None:
                mask_pixels = read_pgm(mask_path)
                image_pixels = read_pgm(image_path)
                if mask_pixels.shape != image_pixels.shape:
                    raise ManifestError(f"{path}: line {lineno}: mask shape "
                                        f"{mask_pixels.shape} does not match image "
                                        f"shape {image_pixels.shape}")
                if bool((mask_pixels > 0).any()) != bool(label):
                    raise ManifestError(f"{path}: line {lineno}: label {label} is "
                                        f"inconsistent with the mask content")
            samples.append(Sample(image_path, int(label), mask_path, modality))
    return samples


def load_sample(sample: Sample) -> LoadedSample:
    # centered pixels keep patch features from sharing one dominant
    # brightness direction, which would crush cosine contrast downstream
    image = read_pgm(sample.image).astype(np.float32) / 255.0 * 2.0 - 1.0
    mask = None
    if sample.mask is not None:
        mask = (read_pgm(sample.mask) > 0).astype(np.float32)
    return LoadedSample(image, sample.label, mask, sample.modality, sample.image)


def load_samples(samples):
    return [load_sample(s) for s in samples]


def _require_modality(samples, target, where):
    known = sorted({s.modality for s in samples})
    if target not in known:
        raise ManifestError(f"unknown modality {target!r} in {where}; "
                            f"available: {known}")


def zero_shot_split(train_samples, test_samples, target):
    """Leave-one-out: train on every other modality, test on the target."""
    _require_modality(test_samples, target, "test manifest")
    train = [s for s in train_samples if s.modality != target]
    test = [s for s in test_samples if s.modality == target]
    if not train:
        raise DataError("zero-shot split left an empty training set")
    return train, test


def few_shot_split(train_samples, test_samples, target, k, seed):
    """Pick k anomalous plus k normal target samples; the normals feed the bank.

    Returns (train, bank_normals, test). The selection is seeded and
    independent of manifest ordering.
    """
    if k < 1:
        raise ConfigError(f"k must be at least 1, got {k}")
    _require_modality(train_samples, target, "train manifest")
    pool_pos = sorted((s for s in train_samples if s.modality == target and s.label == 1),
                      key=lambda s: s.image)
    pool_neg = sorted((s for s in train_samples if s.modality == target and s.label == 0),
                      key=lambda s: s.image)
    if k > len(pool_pos) or k > len(pool_neg):
        raise DataError(f"k={k} exceeds the available labeled samples "
                        f"({len(pool_pos)} anomalous, {len(pool_neg)} normal)")
    rng = _rng(seed, len(pool_pos), len(pool_neg))
    chosen_pos = [pool_pos[i] for i in sorted(rng.choice(len(pool_pos), k, replace=False))]
    chosen_neg = [pool_neg[i] for i in sorted(rng.choice(len(pool_neg), k, replace=False))]
    test = [s for s in test_samples if s.modality == target]
    return chosen_pos + chosen_neg, chosen_neg, test
