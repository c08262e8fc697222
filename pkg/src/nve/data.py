"""Dataset bookkeeping, split protocol, and synthetic task generators.

The split protocol: a seeded 80/20 train/test partition, then a fresh
20% validation slice cut from the training set at every epoch. Sizes
round down; permutations come from seeded generators so every split is
reproducible from (plan, epoch) alone.

Synthetic volumes stand in for real scans: control-class samples are
smooth random blob fields, patient-class samples get a localized
intensity attenuation inside a fixed centered ellipsoid. A separate
multi-class 2-D texture task provides a pretraining corpus shaped
exactly like the sliced volume input.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .volume import (
    Volume,
    gaussian_taps,
    read_volume,
    write_volume,
    _smooth_axis,
)

LABEL_INDEX = {"pd": 0, "hc": 1}

# relative ellipsoid semi-axis: pi/6 * 0.457^3 of the box is ~5% by volume
ELLIPSOID_FACTOR = 0.457
FIELD_SIGMA_VOXELS = 2.0
STREAM_CORRELATION = 0.6


@dataclass(frozen=True)
class Dataset:
    samples: tuple  # of (gm: Volume, wm: Volume, label: str)
    name: str = "dataset"

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        for i, (gm, wm, label) in enumerate(self.samples):
            if label not in LABEL_INDEX:
                raise DataError(
                    f"sample {i}: label '{label}' not in {sorted(LABEL_INDEX)}"
                )
            if gm.dims != wm.dims:
                raise DataError(
                    f"sample {i}: gm dims {gm.dims} != wm dims {wm.dims}"
                )

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def labels(self):
        return [label for _, _, label in self.samples]

    def subset(self, indices, name=None):
        picked = tuple(self.samples[int(i)] for i in indices)
        return Dataset(picked, name or self.name)


@dataclass(frozen=True)
class SplitPlan:
    seed: int
    train_fraction: float = 0.8
    val_fraction_of_train: float = 0.2

    def __post_init__(self):
        for label, value in (("train_fraction", self.train_fraction),
                             ("val_fraction_of_train",
                              self.val_fraction_of_train)):
            if not 0 < value < 1:
                raise ConfigError(f"{label} must be in (0, 1), got {value}")


@dataclass(frozen=True)
class BalanceReport:
    counts: dict
    ratio: float
    flagged: bool


def check_balance(d: Dataset, threshold: float = 1.2) -> BalanceReport:
    """Per-class counts and majority/minority ratio, flagged past threshold."""
    if len(d) == 0:
        raise DataError("cannot balance-check an empty dataset")
    counts = {label: 0 for label in LABEL_INDEX}
    for label in d.labels:
        counts[label] += 1
    smallest, largest = min(counts.values()), max(counts.values())
    ratio = float("inf") if smallest == 0 else largest / smallest
    return BalanceReport(counts=counts, ratio=ratio, flagged=ratio > threshold)


def split_train_test(d: Dataset, plan: SplitPlan):
    """Seed-determined permutation split; train gets floor(fraction * n)."""
    n = len(d)
    if n < 2:
        raise DataError(f"need at least 2 samples to split, got {n}")
    k = int(plan.train_fraction * n)
    perm = np.random.default_rng([plan.seed, 0]).permutation(n)
    return (d.subset(perm[:k], f"{d.name}/train"),
            d.subset(perm[k:], f"{d.name}/test"))


def epoch_validation_indices(m: int, plan: SplitPlan, epoch: int):
    """(fit, val) index arrays into a training set of m samples."""
    if m < 2:
        raise DataError(f"need at least 2 samples to split, got {m}")
    v = int(plan.val_fraction_of_train * m)
    perm = np.random.default_rng([plan.seed, epoch, 0]).permutation(m)
    return perm[: m - v], perm[m - v:]


def split_epoch_validation(train: Dataset, plan: SplitPlan, epoch: int):
    """Fresh (seed, epoch)-determined validation slice, floor(fraction * m)."""
    fit, val = epoch_validation_indices(len(train), plan, epoch)
    return (train.subset(fit, f"{train.name}/fit"),
            train.subset(val, f"{train.name}/val"))


@dataclass(frozen=True)
class SyntheticTaskSpec:
    dims: tuple = (16, 20, 16)  # (X, Y, Z)
    n_per_class: int = 30
    class_effect: tuple = (0.5, 0.8)  # attenuation strength range per sample
    noise_sigma: float = 0.02
    n_proxy_classes: int = 4
    slice_k: int = 8

    def __post_init__(self):
        x, y, z = (int(d) for d in self.dims)
        if min(x, y, z) < 4:
            raise ConfigError(f"dims too small to hold an effect region: {self.dims}")
        object.__setattr__(self, "dims", (x, y, z))
        if self.n_per_class < 1:
            raise ConfigError(f"n_per_class must be >= 1, got {self.n_per_class}")
        lo, hi = self.class_effect
        if not 0 <= lo <= hi <= 1:
            raise ConfigError(
                f"class_effect must satisfy 0 <= lo <= hi <= 1, got {self.class_effect}"
            )
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.n_proxy_classes < 2:
            raise ConfigError(
                f"n_proxy_classes must be >= 2, got {self.n_proxy_classes}"
            )
        if not 1 <= self.slice_k <= z:
            raise ConfigError(
                f"slice_k must be in [1, {z}], got {self.slice_k}"
            )


def effect_mask(dims):
    """Centered ellipsoid covering ~5% of the box, as a (Z, Y, X) bool mask."""
    x, y, z = dims
    zc, yc, xc = (z - 1) / 2, (y - 1) / 2, (x - 1) / 2
    zz, yy, xx = np.mgrid[0:z, 0:y, 0:x].astype(np.float64)
    rz, ry, rx = (ELLIPSOID_FACTOR * d / 2 for d in (z, y, x))
    dist = ((zz - zc) / rz) ** 2 + ((yy - yc) / ry) ** 2 + ((xx - xc) / rx) ** 2
    return dist <= 1.0


def _blob_field(rng, shape_zyx):
    """Smooth random field normalized to [0, 1]."""
    taps = gaussian_taps(FIELD_SIGMA_VOXELS)
    out = rng.uniform(0.0, 1.0, size=shape_zyx)
    for axis in range(3):
        out = _smooth_axis(out, taps, axis)
    lo, hi = out.min(), out.max()
    return (out - lo) / (hi - lo) if hi > lo else np.zeros_like(out)


def generate_classification_task(spec: SyntheticTaskSpec, seed) -> Dataset:
    """Balanced two-class volume dataset, bitwise-determined by (spec, seed)."""
    rng = np.random.default_rng(seed)
    x, y, z = spec.dims
    shape = (z, y, x)
    mask = effect_mask(spec.dims)
    samples = []
    for label in ("pd", "hc"):
        for _ in range(spec.n_per_class):
            shared = _blob_field(rng, shape)
            fields = {}
            for tissue in ("gm", "wm"):
                own = _blob_field(rng, shape)
                fields[tissue] = (STREAM_CORRELATION * shared
                                  + (1 - STREAM_CORRELATION) * own)
            strength = rng.uniform(*spec.class_effect) if label == "pd" else 0.0
            volumes = {}
            for tissue, data in fields.items():
                if strength:
                    data = data.copy()
                    data[mask] *= 1.0 - strength
                if spec.noise_sigma:
                    data = data + rng.normal(0.0, spec.noise_sigma, shape)
                volumes[tissue] = Volume(
                    values=np.clip(data, 0.0, 1.0).astype(np.float32),
                    voxel_mm=(1.5, 1.5, 1.5), tissue=tissue, label=label,
                )
            samples.append((volumes["gm"], volumes["wm"], label))
    return Dataset(tuple(samples), name=f"synthetic-{seed}")


@dataclass(frozen=True)
class ProxyDataset:
    images: np.ndarray  # (N, K, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    n_classes: int


def _grating(rng, k, h, w, axis):
    cycles = rng.uniform(2.0, 4.0)
    phase = rng.uniform(0.0, 2 * np.pi)
    length = h if axis == 0 else w
    ramp = np.arange(length) * (2 * np.pi * cycles / length) + phase
    wave = np.sin(ramp) * rng.uniform(0.25, 0.45)
    plane = wave[:, None] + np.zeros((1, w)) if axis == 0 \
        else np.zeros((h, 1)) + wave[None, :]
    return 1.0 + np.broadcast_to(plane, (k, h, w))


def _blob_modulation(rng, k, h, w, bright):
    # hard-edged ellipsoids at matched extent and strength: the sharp
    # boundary step is the local feature that carries over to attenuated
    # regions cut into otherwise smooth volumes
    mod = np.ones((k, h, w))
    zz, yy, xx = np.mgrid[0:k, 0:h, 0:w].astype(np.float64)
    for _ in range(int(rng.integers(1, 3))):
        cz = rng.uniform(0.2 * k, 0.8 * k)
        cy = rng.uniform(0.2 * h, 0.8 * h)
        cx = rng.uniform(0.2 * w, 0.8 * w)
        rz = rng.uniform(1.5, max(2.5, 0.3 * k))
        ry, rx = rng.uniform(2.5, 5.5), rng.uniform(2.5, 5.5)
        dist = (((zz - cz) / rz) ** 2 + ((yy - cy) / ry) ** 2
                + ((xx - cx) / rx) ** 2)
        strength = rng.uniform(0.35, 0.65)
        mod[dist <= 1.0] *= (1.0 + strength) if bright else (1.0 - strength)
    return mod


def _checkerboard(rng, k, h, w):
    cell = int(rng.integers(2, 5))
    off_y, off_x = int(rng.integers(cell)), int(rng.integers(cell))
    yy, xx = np.mgrid[0:h, 0:w]
    board = (((yy + off_y) // cell + (xx + off_x) // cell) % 2).astype(np.float64)
    amp = rng.uniform(0.25, 0.45)
    return 1.0 + np.broadcast_to((board * 2.0 - 1.0) * amp, (k, h, w))


def _diagonal_grating(rng, k, h, w):
    cycles = rng.uniform(2.0, 4.0)
    phase = rng.uniform(0.0, 2 * np.pi)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    ramp = (yy + xx) * (2 * np.pi * cycles / (h + w)) + phase
    amp = rng.uniform(0.25, 0.45)
    return 1.0 + np.broadcast_to(np.sin(ramp) * amp, (k, h, w))


_PROXY_GENERATORS = (
    # the untouched-field class makes "pattern present vs absent" part of
    # the pretraining signal, which is the contrast the volumes carry
    lambda rng, k, h, w: np.ones((k, h, w)),
    lambda rng, k, h, w: _blob_modulation(rng, k, h, w, bright=False),
    lambda rng, k, h, w: _blob_modulation(rng, k, h, w, bright=True),
    lambda rng, k, h, w: _grating(rng, k, h, w, axis=0),
    lambda rng, k, h, w: _grating(rng, k, h, w, axis=1),
    _checkerboard,
    _diagonal_grating,
)


def generate_proxy_pretraining_task(spec: SyntheticTaskSpec, seed) -> ProxyDataset:
    """Texture classes as K-channel 2-D images matching the sliced volume shape.

    Every class is a multiplicative pattern (or no pattern at all) over the
    same smooth random fields the volume generator uses, so backbones
    pretrained here see the background statistics they will meet again
    after slicing real volumes.
    """
    if spec.n_proxy_classes > len(_PROXY_GENERATORS):
        raise ConfigError(
            f"at most {len(_PROXY_GENERATORS)} proxy classes available, "
            f"asked for {spec.n_proxy_classes}"
        )
    rng = np.random.default_rng(seed)
    x, y, _ = spec.dims
    h, w, k = y, x, spec.slice_k
    images, labels = [], []
    for class_idx in range(spec.n_proxy_classes):
        make = _PROXY_GENERATORS[class_idx]
        for _ in range(spec.n_per_class):
            field = _blob_field(rng, (k, h, w))
            # same noise level as the volume task, so pretrained filters
            # are calibrated to the conditions they will fine-tune under
            img = field * make(rng, k, h, w) \
                + rng.normal(0.0, max(spec.noise_sigma, 0.02), (k, h, w))
            # remap every image to a shared mean and spread: class identity
            # must live in local structure, not in global intensity stats
            img = 0.5 + 0.15 * (img - img.mean()) / max(img.std(), 1e-6)
            images.append(np.clip(img, 0.0, 1.0).astype(np.float32))
            labels.append(class_idx)
    return ProxyDataset(
        images=np.stack(images),
        labels=np.asarray(labels, dtype=np.int64),
        n_classes=spec.n_proxy_classes,
    )


def save_dataset(d: Dataset, directory):
    """Persist as native volume files plus a one-line-per-sample manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (gm, wm, label) in enumerate(d.samples):
        gm_name, wm_name = f"{i:04d}_gm.nvol", f"{i:04d}_wm.nvol"
        write_volume(directory / gm_name, gm)
        write_volume(directory / wm_name, wm)
        lines.append(f"{gm_name},{wm_name},{label}")
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    manifest = directory / "manifest.txt"
    if not manifest.exists():
        raise DataError(f"no manifest.txt in {directory}")
    samples = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise DataError(
                f"{manifest}:{lineno}: expected 'gm,wm,label', got '{line}'"
            )
        gm_name, wm_name, label = parts
        samples.append((read_volume(directory / gm_name),
                        read_volume(directory / wm_name), label))
    return Dataset(tuple(samples), name=directory.name)
