"""Volumes, clinical records, preprocessing, dose statistics, file formats,
and a seeded synthetic dataset generator with planted class signal.

All preprocessing functions are pure and operate in float64; the on-disk
volume format is 32-bit. Statistics objects (intensity landmarks, clinical
means/stds) must be fitted on training data only and carried to validation
and test subjects.
"""

from __future__ import annotations

import csv
import json
import math
import os
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, ContractError, FormatError
from .kernels import piecewise_map
from .metrics import roc_auc
from .seeding import rng_for

CHANNEL_NAMES = ("t1ce", "flair")

GENDERS = ("Male", "Female", "Unknown")
IDH_STATUSES = ("Mutant", "Wildtype", "Unknown")
MGMT_STATUSES = ("Methylated", "Unmethylated", "Unknown")

CONTINUOUS_FEATURES = (
    "age_years",
    "days_to_progression",
    "dose_mean_gy",
    "dose_min_gy",
    "dose_median_gy",
    "dose_d98_gy",
)
CATEGORICAL_FEATURES = {
    "gender": GENDERS,
    "idh": IDH_STATUSES,
    "mgmt": MGMT_STATUSES,
}

CSV_COLUMNS = (
    "subject_id", "age_years", "gender", "idh", "mgmt", "days_to_progression",
    "dose_mean_gy", "dose_min_gy", "dose_median_gy", "dose_d98_gy", "label",
)

STD_EPS = 1e-8
LANDMARK_PERCENTILES = np.arange(0.0, 101.0, 10.0)  # deciles 0..100


@dataclass
class VolumeSample:
    """One subject's image data: C×D×H×W grid plus optional mask/dose planes."""

    subject_id: str
    grid: np.ndarray  # (C, D, H, W) float
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    channels: tuple[str, ...] | None = None  # None -> t1ce/flair or generic names
    mask: np.ndarray | None = None  # (D, H, W), nonzero = lesion
    dose: np.ndarray | None = None  # (D, H, W), Gy

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.ndim != 4:
            raise ContractError(f"volume grid must be C×D×H×W, got shape {self.grid.shape}")
        if self.channels is None:
            c = self.grid.shape[0]
            self.channels = CHANNEL_NAMES if c == 2 else tuple(f"ch{i}" for i in range(c))
        if len(self.channels) != self.grid.shape[0]:
            raise ContractError(
                f"{len(self.channels)} channel names for {self.grid.shape[0]} channels"
            )
        if any(s <= 0 for s in self.spacing_mm):
            raise ContractError(f"spacing must be positive, got {self.spacing_mm}")
        spatial = self.grid.shape[1:]
        for name in ("mask", "dose"):
            plane = getattr(self, name)
            if plane is not None:
                plane = np.asarray(plane, dtype=np.float64)
                if plane.shape != spatial:
                    raise ContractError(f"{name} shape {plane.shape} != spatial extents {spatial}")
                setattr(self, name, plane)

    @property
    def extents(self) -> tuple[int, int, int]:
        return self.grid.shape[1:]


@dataclass
class ClinicalRecord:
    subject_id: str
    age_years: float
    gender: str
    idh: str
    mgmt: str
    days_to_progression: float
    dose_mean_gy: float
    dose_min_gy: float
    dose_median_gy: float
    dose_d98_gy: float
    label: int | None = None  # 1 = true progression, 0 = pseudoprogression

    def continuous_values(self) -> list[float]:
        return [float(getattr(self, name)) for name in CONTINUOUS_FEATURES]


@dataclass
class FeatureMatrix:
    """Numeric per-subject features after normalization/encoding."""

    values: np.ndarray  # (n_subjects, n_columns)
    columns: list[str]
    kept: np.ndarray  # bool per column; False = dropped (e.g. collinear)

    def selected(self) -> np.ndarray:
        return self.values[:, self.kept]

    def selected_columns(self) -> list[str]:
        return [c for c, k in zip(self.columns, self.kept) if k]


# --------------------------------------------------------------- geometry

def _axis_window(size: int, target: int) -> tuple[slice, slice]:
    """(source slice, destination slice) for one axis of center crop/pad."""
    if size >= target:
        start = (size - target) // 2
        return slice(start, start + target), slice(0, target)
    start = (target - size) // 2
    return slice(0, size), slice(start, start + size)


def _crop_or_pad_plane(plane: np.ndarray, target: tuple[int, int, int]) -> np.ndarray:
    out = np.zeros(target, dtype=plane.dtype)
    src = []
    dst = []
    for size, tgt in zip(plane.shape, target):
        s, d = _axis_window(size, tgt)
        src.append(s)
        dst.append(d)
    out[tuple(dst)] = plane[tuple(src)]
    return out


def crop_or_pad(sample: VolumeSample, target: tuple[int, int, int]) -> VolumeSample:
    """Center-crop larger axes, symmetrically zero-pad smaller ones.

    Odd differences put the extra voxel after the center. Mask and dose
    planes follow the same window.
    """
    if any(t <= 0 for t in target):
        raise ContractError(f"target extents must be positive, got {target}")
    grid = np.stack([_crop_or_pad_plane(ch, tuple(target)) for ch in sample.grid])
    mask = _crop_or_pad_plane(sample.mask, tuple(target)) if sample.mask is not None else None
    dose = _crop_or_pad_plane(sample.dose, tuple(target)) if sample.dose is not None else None
    return replace(sample, grid=grid, mask=mask, dose=dose)


# --------------------------------------------- histogram standardization

@dataclass
class LandmarkModel:
    """Per-channel decile intensity landmarks averaged over a training corpus.

    Landmarks are percentiles 0,10,...,100 of foreground voxels
    (intensity > 0). Mapping a new volume sends its own deciles onto these.
    """

    landmarks: np.ndarray  # (C, 11)
    channels: tuple[str, ...]


def _channel_landmarks(channel: np.ndarray) -> np.ndarray | None:
    fg = channel[channel > 0]
    if fg.size < 2:
        return None
    marks = np.percentile(fg, LANDMARK_PERCENTILES)
    if not (np.diff(marks) > 0).all():
        return None  # too degenerate for a monotone map
    return marks


def fit_landmarks(volumes: list[VolumeSample]) -> LandmarkModel:
    if not volumes:
        raise ContractError("fit_landmarks needs at least one volume")
    channels = volumes[0].channels
    per_channel = []
    for c in range(len(channels)):
        marks = [_channel_landmarks(v.grid[c]) for v in volumes]
        usable = [m for m in marks if m is not None]
        if not usable:
            raise ContractError(f"channel {channels[c]!r}: no volume has usable foreground")
        per_channel.append(np.mean(usable, axis=0))
    return LandmarkModel(np.stack(per_channel), channels)


def histogram_standardize(sample: VolumeSample, model: LandmarkModel) -> VolumeSample:
    """Piecewise-linearly map each channel's foreground deciles onto the model's.

    Background (intensity <= 0) is untouched. A channel whose own landmarks
    are degenerate (constant or near-constant foreground) passes through
    with a warning.
    """
    grid = sample.grid.copy()
    for c in range(grid.shape[0]):
        src = _channel_landmarks(grid[c])
        if src is None:
            warnings.warn(f"histogram_standardize: degenerate channel {c}, passing through")
            continue
        fg = grid[c] > 0
        mapped = piecewise_map(grid[c][fg].ravel(), src, model.landmarks[c])
        grid[c][fg] = mapped
    return replace(sample, grid=grid)


def znormalize_channels(sample: VolumeSample, eps: float = STD_EPS) -> VolumeSample:
    """Per channel: subtract mean, divide by max(population std, eps)."""
    if eps <= 0:
        raise ContractError(f"eps must be > 0, got {eps}")
    grid = sample.grid.copy()
    for c in range(grid.shape[0]):
        mu = grid[c].mean()
        sd = grid[c].std()
        grid[c] = (grid[c] - mu) / max(sd, eps)
    return replace(sample, grid=grid)


# ------------------------------------------------------- clinical encoding

@dataclass
class ClinicalStats:
    """Training-split statistics needed to encode any record consistently."""

    mean: dict[str, float]
    std: dict[str, float]  # population std, floored at STD_EPS


def fit_clinical_stats(records: list[ClinicalRecord]) -> ClinicalStats:
    if not records:
        raise ContractError("fit_clinical_stats needs records")
    table = np.array([r.continuous_values() for r in records])
    mean = {}
    std = {}
    for j, name in enumerate(CONTINUOUS_FEATURES):
        mean[name] = float(table[:, j].mean())
        std[name] = float(max(table[:, j].std(), STD_EPS))
    return ClinicalStats(mean, std)


def clinical_columns() -> list[str]:
    """Deterministic column order: continuous features, then one-hot groups."""
    cols = list(CONTINUOUS_FEATURES)
    for feat, cats in CATEGORICAL_FEATURES.items():
        cols.extend(f"{feat}_{c}" for c in cats)
    return cols


def encode_clinical(records: list[ClinicalRecord], stats: ClinicalStats) -> FeatureMatrix:
    """Standardize continuous features with training statistics; one-hot the
    categoricals with Unknown as an explicit category. Unseen category
    values map to Unknown with a warning.
    """
    cols = clinical_columns()
    rows = []
    for r in records:
        row = [
            (float(getattr(r, name)) - stats.mean[name]) / stats.std[name]
            for name in CONTINUOUS_FEATURES
        ]
        for feat, cats in CATEGORICAL_FEATURES.items():
            value = getattr(r, feat)
            if value not in cats:
                warnings.warn(f"{feat}={value!r} not in {cats}; mapping to Unknown")
                value = "Unknown"
            row.extend(1.0 if value == c else 0.0 for c in cats)
        rows.append(row)
    values = np.array(rows, dtype=np.float64)
    return FeatureMatrix(values, cols, np.ones(len(cols), dtype=bool))


def drop_collinear(matrix: FeatureMatrix, threshold: float = 0.95) -> FeatureMatrix:
    """Greedy left-to-right scan: drop any column correlating at |r| >=
    threshold with an already-kept column. Zero-variance columns are
    dropped with a warning.
    """
    if not (0.0 < threshold <= 1.0):
        raise ContractError(f"threshold must be in (0, 1], got {threshold}")
    values = matrix.values
    kept_idx: list[int] = []
    kept = np.zeros(len(matrix.columns), dtype=bool)
    for j in range(values.shape[1]):
        col = values[:, j]
        sd = col.std()
        if sd < STD_EPS:
            warnings.warn(f"drop_collinear: zero-variance column {matrix.columns[j]!r} dropped")
            continue
        collides = False
        for i in kept_idx:
            other = values[:, i]
            r = float(np.corrcoef(col, other)[0, 1])
            if abs(r) >= threshold:
                collides = True
                break
        if not collides:
            kept_idx.append(j)
            kept[j] = True
    return FeatureMatrix(values, list(matrix.columns), kept)


# ----------------------------------------------------------- dose metrics

def dose_statistics(dose: np.ndarray, mask: np.ndarray) -> dict[str, float]:
    """Mean/min/median/D98 of dose over lesion voxels.

    D98 — the dose at least 98% of the lesion receives — is the
    nearest-rank 2nd percentile: sort ascending, take rank ceil(0.02*n)
    (1-indexed). No interpolation, so results are exactly reproducible.
    """
    dose = np.asarray(dose, dtype=np.float64)
    mask = np.asarray(mask)
    if dose.shape != mask.shape:
        raise ContractError(f"dose shape {dose.shape} != mask shape {mask.shape}")
    values = dose[mask > 0]
    if values.size == 0:
        raise ContractError("dose_statistics: empty lesion mask")
    ordered = np.sort(values)
    rank = max(1, math.ceil(0.02 * values.size))
    return {
        "mean": float(values.mean()),
        "min": float(ordered[0]),
        "median": float(np.median(values)),
        "d98": float(ordered[rank - 1]),
    }


# ------------------------------------------------------------- file format

def _paths(path: str) -> tuple[str, str]:
    base = path
    for suffix in (".vol.json", ".vol.bin"):
        if base.endswith(suffix):
            base = base[: -len(suffix)]
    return base + ".vol.json", base + ".vol.bin"


def store_volume(sample: VolumeSample, path: str) -> None:
    """Write ``<path>.vol.json`` (header) + ``<path>.vol.bin`` (payload).

    Payload is little-endian float32, C-order: channels first, then the
    mask plane, then the dose plane, each full-grid, in that order when
    present.
    """
    header_path, bin_path = _paths(path)
    header = {
        "shape": list(sample.grid.shape),
        "dtype": "f32le",
        "spacing_mm": list(sample.spacing_mm),
        "channels": list(sample.channels),
        "extras": {"mask": sample.mask is not None, "dose": sample.dose is not None},
    }
    parts = [sample.grid.astype("<f4")]
    if sample.mask is not None:
        parts.append(sample.mask[None].astype("<f4"))
    if sample.dose is not None:
        parts.append(sample.dose[None].astype("<f4"))
    payload = np.concatenate(parts, axis=0).tobytes(order="C")
    with open(header_path, "w") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(bin_path, "wb") as fh:
        fh.write(payload)


def load_volume(path: str) -> VolumeSample:
    header_path, bin_path = _paths(path)
    with open(header_path) as fh:
        header = json.load(fh)
    c, d, h, w = header["shape"]
    extras = header.get("extras", {})
    n_planes = c + int(bool(extras.get("mask"))) + int(bool(extras.get("dose")))
    expected = n_planes * d * h * w * 4
    with open(bin_path, "rb") as fh:
        payload = fh.read()
    if len(payload) != expected:
        raise FormatError(
            f"{bin_path}: expected {expected} payload bytes, found {len(payload)}"
        )
    planes = np.frombuffer(payload, dtype="<f4").reshape(n_planes, d, h, w)
    idx = c
    mask = dose = None
    if extras.get("mask"):
        mask = planes[idx].astype(np.float64)
        idx += 1
    if extras.get("dose"):
        dose = planes[idx].astype(np.float64)
    subject_id = os.path.basename(header_path)[: -len(".vol.json")]
    return VolumeSample(
        subject_id=subject_id,
        grid=planes[:c].astype(np.float64),
        spacing_mm=tuple(header["spacing_mm"]),
        channels=tuple(header["channels"]),
        mask=mask,
        dose=dose,
    )


def write_clinical_csv(records: list[ClinicalRecord], path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in records:
            label = {1: "TP", 0: "PsP", None: ""}[r.label]
            writer.writerow([
                r.subject_id, repr(r.age_years), r.gender, r.idh, r.mgmt,
                repr(r.days_to_progression), repr(r.dose_mean_gy), repr(r.dose_min_gy),
                repr(r.dose_median_gy), repr(r.dose_d98_gy), label,
            ])


def read_clinical_csv(path: str) -> list[ClinicalRecord]:
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != list(CSV_COLUMNS):
            raise FormatError(f"{path}: expected columns {CSV_COLUMNS}, got {reader.fieldnames}")
        for row in reader:
            label_text = row["label"].strip()
            if label_text == "":
                label = None
            elif label_text in ("TP", "PsP"):
                label = 1 if label_text == "TP" else 0
            else:
                raise FormatError(f"{path}: bad label {label_text!r} (want TP, PsP, or empty)")
            records.append(ClinicalRecord(
                subject_id=row["subject_id"],
                age_years=float(row["age_years"]),
                gender=row["gender"],
                idh=row["idh"],
                mgmt=row["mgmt"],
                days_to_progression=float(row["days_to_progression"]),
                dose_mean_gy=float(row["dose_mean_gy"]),
                dose_min_gy=float(row["dose_min_gy"]),
                dose_median_gy=float(row["dose_median_gy"]),
                dose_d98_gy=float(row["dose_d98_gy"]),
                label=label,
            ))
    return records


# -------------------------------------------------------------- datasets

@dataclass
class Dataset:
    volumes: list[VolumeSample]
    records: list[ClinicalRecord]

    def __post_init__(self):
        vol_ids = [v.subject_id for v in self.volumes]
        rec_ids = [r.subject_id for r in self.records]
        if vol_ids != rec_ids:
            raise ContractError("volumes and records must align by subject_id")

    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records])

    def __len__(self) -> int:
        return len(self.records)


def save_dataset(ds: Dataset, out_dir: str) -> None:
    vol_dir = os.path.join(out_dir, "volumes")
    os.makedirs(vol_dir, exist_ok=True)
    for v in ds.volumes:
        store_volume(v, os.path.join(vol_dir, v.subject_id))
    write_clinical_csv(ds.records, os.path.join(out_dir, "clinical.csv"))


def load_dataset(in_dir: str) -> Dataset:
    records = read_clinical_csv(os.path.join(in_dir, "clinical.csv"))
    volumes = [load_volume(os.path.join(in_dir, "volumes", r.subject_id)) for r in records]
    return Dataset(volumes, records)


# ------------------------------------------------------ synthetic corpus

@dataclass
class SynthConfig:
    """Knobs for the synthetic stand-in corpus.

    ``signal`` scales every planted class difference; at 0 the label is
    independent of all features. The planted effect strengths are ordered:
    time-to-progression strongest, then lesion min-dose/D98, then MGMT,
    then IDH; age and gender carry none.
    """

    n_subjects: int = 60
    tp_fraction: float = 34.0 / 59.0  # observed class balance in the modeled cohort
    extent: int = 32
    channels: int = 2
    signal: float = 1.0
    min_folds: int = 5

    def __post_init__(self):
        if self.n_subjects < 2 * self.min_folds:
            raise ConfigError(
                f"n_subjects={self.n_subjects} too small for {self.min_folds}-fold splits"
            )
        if not (0.0 < self.tp_fraction < 1.0):
            raise ConfigError(f"tp_fraction must be in (0,1), got {self.tp_fraction}")
        if self.signal < 0:
            raise ConfigError(f"signal must be >= 0, got {self.signal}")


def _smooth_field(shape: tuple[int, int, int], rng: np.random.Generator, n_modes: int = 6) -> np.ndarray:
    """Band-limited random field from a small sum of cosine modes.

    Closed-form (no convolution), so identical on every compute backend.
    """
    d, h, w = shape
    zz, yy, xx = np.meshgrid(
        np.linspace(-1, 1, d), np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij"
    )
    out = np.zeros(shape)
    for _ in range(n_modes):
        freq = rng.uniform(0.5, 2.5, size=3)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.5, 1.0)
        out += amp * np.cos(2 * np.pi * (freq[0] * zz + freq[1] * yy + freq[2] * xx) + phase)
    return out / math.sqrt(n_modes)


def _ellipsoid(shape, center, radii) -> np.ndarray:
    d, h, w = shape
    zz, yy, xx = np.meshgrid(
        np.linspace(-1, 1, d), np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij"
    )
    q = (
        ((zz - center[0]) / radii[0]) ** 2
        + ((yy - center[1]) / radii[1]) ** 2
        + ((xx - center[2]) / radii[2]) ** 2
    )
    return q <= 1.0


def _gaussian_ball(shape, center, sigma) -> np.ndarray:
    d, h, w = shape
    zz, yy, xx = np.meshgrid(
        np.linspace(-1, 1, d), np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij"
    )
    r2 = (zz - center[0]) ** 2 + (yy - center[1]) ** 2 + (xx - center[2]) ** 2
    return np.exp(-r2 / (2 * sigma * sigma))


def synth_generate(config: SynthConfig, seed: int) -> Dataset:
    """Deterministic synthetic cohort with class signal scaled by ``config.signal``.

    True-progression subjects get a brighter lesion blob, shorter
    time-to-progression, and a dose field whose peak sits farther from the
    lesion (lower min dose and D98). Pseudoprogression subjects get the
    opposite shifts. Generation self-checks that time-to-progression alone
    separates the classes (AUC > 0.5) whenever signal > 0.
    """
    n = config.n_subjects
    n_tp = int(math.floor(n * config.tp_fraction))
    labels = np.array([1] * n_tp + [0] * (n - n_tp))
    labels = labels[rng_for(seed, "synth", "label-order").permutation(n)]
    shape = (config.extent,) * 3
    s = config.signal

    volumes: list[VolumeSample] = []
    records: list[ClinicalRecord] = []
    for i in range(n):
        sid = f"synth{i:04d}"
        rng = rng_for(seed, "synth", "subject", i)
        label = int(labels[i])

        brain = _ellipsoid(shape, (0.0, 0.0, 0.0), (0.80, 0.85, 0.90))
        grid = np.zeros((config.channels,) + shape)
        for c in range(config.channels):
            base = 1.0 + 0.35 * _smooth_field(shape, rng)
            grid[c] = np.clip(base, 0.05, None) * brain

        # lesion: random center well inside the brain, moderate size
        # (radii floored at 1.5 voxel spacings so coarse grids keep a lesion)
        center = rng.uniform(-0.35, 0.35, size=3)
        radii = np.maximum(rng.uniform(0.16, 0.24, size=3), 3.0 / config.extent)
        lesion = _ellipsoid(shape, center, radii) & brain
        if not lesion.any():
            nearest = tuple(
                int(round((c + 1) / 2 * (config.extent - 1))) for c in center
            )
            lesion[nearest] = True
        blob = _gaussian_ball(shape, center, float(radii.mean()) / 1.5)
        brightness = s * (1.0 if label == 1 else 0.25)
        grid[0] += brightness * blob * lesion  # contrast channel lights up
        grid[1] += 0.5 * brightness * blob * lesion

        # dose field: peak offset from the lesion; farther for TP on average.
        # The offset length is jittered per subject so the derived dose
        # statistics overlap between classes and stay weaker than the
        # time-to-progression signal.
        offset_dir = rng.standard_normal(3)
        offset_dir /= np.linalg.norm(offset_dir)
        offset_len = 0.10 + (0.25 * s if label == 1 else 0.05 * s)
        offset_len = max(0.02, offset_len + rng.normal(0.0, 0.12 * max(s, 0.5)))
        dose_center = center + offset_dir * offset_len
        dose = 60.0 * _gaussian_ball(shape, dose_center, 0.45)

        stats = dose_statistics(dose, lesion)

        ttp_mu = math.log(150.0) + (-0.9 * s if label == 1 else 0.9 * s)
        ttp = float(np.exp(rng.normal(ttp_mu, 0.45)))
        age = float(rng.normal(60.0, 10.0))
        gender = GENDERS[int(rng.integers(0, 2))]
        p_meth = 0.5 - (0.20 * min(s, 1.0) if label == 1 else -0.20 * min(s, 1.0))
        mgmt = "Methylated" if rng.uniform() < p_meth else "Unmethylated"
        p_mut = 0.5 - (0.10 * min(s, 1.0) if label == 1 else -0.10 * min(s, 1.0))
        idh = "Mutant" if rng.uniform() < p_mut else "Wildtype"

        volumes.append(VolumeSample(
            subject_id=sid, grid=grid, mask=lesion.astype(np.float64), dose=dose,
        ))
        records.append(ClinicalRecord(
            subject_id=sid, age_years=age, gender=gender, idh=idh, mgmt=mgmt,
            days_to_progression=ttp,
            dose_mean_gy=stats["mean"], dose_min_gy=stats["min"],
            dose_median_gy=stats["median"], dose_d98_gy=stats["d98"],
            label=label,
        ))

    ds = Dataset(volumes, records)
    if s > 0:
        scores = [-r.days_to_progression for r in records]  # shorter time -> progression
        auc = roc_auc(scores, labels).auc
        if auc <= 0.5:
            raise ContractError(
                f"planted time-to-progression signal failed its separation check (AUC {auc:.3f})"
            )
    return ds
