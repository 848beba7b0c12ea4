"""Volume data model, MVOL container format, normalization, and synthetic corpora.

A Volume is a four-modality 3D intensity array (T1, T1CE, T2, FLAIR). Synthetic
corpora simulate two acquisition domains that share anatomy but differ in
bias-field amplitude, contrast curve, and noise level: domain A draws those
scanner parameters from wide distributions, domain B from narrow ones.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import ConfigError, CorruptionError, DegenerateInputError, FormatError

MODALITIES = ("T1", "T1CE", "T2", "FLAIR")
N_MODALITIES = 4

MVOL_MAGIC = b"MVOL"

FOREGROUND_THRESHOLD = 0.05


class NormState(str, Enum):
    RAW = "raw"
    ZSCORED = "zscored"


class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


SPLIT_FRACTIONS = {Split.TRAIN: 0.70, Split.VAL: 0.15, Split.TEST: 0.15}


@dataclass
class Volume:
    """A 4-modality intensity volume, indexed [modality, z, y, x].

    ``norm_params`` holds the per-modality (mean, std) recorded at z-scoring
    time so the transform can be inverted; it is None while raw.
    """

    data: np.ndarray
    modality_names: tuple = MODALITIES
    norm_state: NormState = NormState.RAW
    norm_params: tuple | None = None
    subject_id: str = ""

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 4 or self.data.shape[0] != N_MODALITIES:
            raise ConfigError(f"volume data must be (4, D, H, W), got {self.data.shape}")
        if min(self.data.shape[1:]) < 3:
            raise ConfigError(f"spatial dims must each be >= 3, got {self.data.shape[1:]}")
        if len(self.modality_names) != N_MODALITIES:
            raise ConfigError("exactly 4 modality names required")
        if not np.isfinite(self.data).all():
            raise ConfigError("volume contains non-finite values")
        self.norm_state = NormState(self.norm_state)
        if self.norm_state is NormState.ZSCORED and self.norm_params is None:
            raise ConfigError("z-scored volume must carry norm_params")

    @property
    def dims(self):
        return self.data.shape

    def slice_at(self, z: int) -> np.ndarray:
        """All-modality axial slice, shape (4, H, W)."""
        d = self.data.shape[1]
        if not 0 <= z < d:
            raise IndexError(f"slice index {z} out of range [0, {d})")
        return self.data[:, z]


def map_slice_unit_interval(sl: np.ndarray) -> np.ndarray:
    """Map a single (4, H, W) slice into [0, 1] for thresholding.

    Uses the slice's own min/max, with the lower bound floored at 0 and the
    range floored at 1.0 so constant slices stay well-defined: an all-zero
    slice maps to 0, an all-ones slice to 1.
    """
    lo = min(float(sl.min()), 0.0)
    hi = max(float(sl.max()), lo + 1.0)
    return (sl - lo) / (hi - lo)


def foreground_slice(v: Volume, z: int) -> bool:
    """True iff the mean mapped intensity of the 4-modality slice is >= 0.05."""
    sl = v.slice_at(z)
    return float(map_slice_unit_interval(sl).mean()) >= FOREGROUND_THRESHOLD


def zscore_normalize(v: Volume) -> Volume:
    """Per-modality z-scoring over the nonzero mask (raw intensity > 0).

    Background voxels stay exactly 0. Population moments are used; the
    recorded (mean, std) pairs allow inversion via zscore_denormalize.
    """
    if v.norm_state is not NormState.RAW:
        raise ValueError("volume is already z-scored")
    out = np.zeros_like(v.data)
    params = []
    for m in range(N_MODALITIES):
        chan = v.data[m]
        mask = chan > 0
        if not mask.any():
            raise DegenerateInputError(f"modality {v.modality_names[m]} has empty mask")
        mean = float(chan[mask].mean())
        std = float(chan[mask].std())
        if std <= 0:
            raise DegenerateInputError(
                f"modality {v.modality_names[m]} has zero variance over its mask"
            )
        out[m][mask] = (chan[mask] - mean) / std
        params.append((mean, std))
    return Volume(
        data=out,
        modality_names=v.modality_names,
        norm_state=NormState.ZSCORED,
        norm_params=tuple(params),
        subject_id=v.subject_id,
    )


def zscore_denormalize(v: Volume) -> Volume:
    """Invert zscore_normalize using the recorded per-modality (mean, std)."""
    if v.norm_state is not NormState.ZSCORED:
        raise ValueError("volume is not z-scored")
    out = np.zeros_like(v.data)
    for m in range(N_MODALITIES):
        mean, std = v.norm_params[m]
        mask = v.data[m] != 0
        out[m][mask] = v.data[m][mask] * std + mean
    return Volume(
        data=out,
        modality_names=v.modality_names,
        norm_state=NormState.RAW,
        norm_params=None,
        subject_id=v.subject_id,
    )


# --------------------------------------------------------------------------
# MVOL container
# --------------------------------------------------------------------------


def save_volume(v: Volume, path) -> None:
    """Write a volume in MVOL format (magic, u32 header length, JSON, f32 payload)."""
    m, d, h, w = v.dims
    if v.norm_params is not None:
        params = [[float(a), float(b)] for a, b in v.norm_params]
    else:
        params = [[0.0, 1.0]] * N_MODALITIES
    header = {
        "dims": [m, d, h, w],
        "modalities": list(v.modality_names),
        "norm_state": v.norm_state.value,
        "norm_params": params,
        "subject_id": v.subject_id,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = np.ascontiguousarray(v.data, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(MVOL_MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        f.write(payload)


def load_volume(path) -> Volume:
    """Read an MVOL file; raises FormatError / CorruptionError on bad input."""
    blob = Path(path).read_bytes()
    if len(blob) < 8 or blob[:4] != MVOL_MAGIC:
        raise FormatError(f"{path}: not an MVOL file (bad magic)")
    (header_len,) = struct.unpack("<I", blob[4:8])
    if len(blob) < 8 + header_len:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[8 : 8 + header_len].decode("utf-8"))
        dims = [int(x) for x in header["dims"]]
        modalities = tuple(header["modalities"])
        norm_state = NormState(header["norm_state"])
        raw_params = header["norm_params"]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed header ({exc})") from exc
    if len(dims) != 4:
        raise FormatError(f"{path}: dims must have 4 entries, got {dims}")
    expected = int(np.prod(dims)) * 4
    payload = blob[8 + header_len :]
    if len(payload) != expected:
        raise CorruptionError(
            f"{path}: payload is {len(payload)} bytes, header declares {expected}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    norm_params = None
    if norm_state is NormState.ZSCORED:
        norm_params = tuple((float(a), float(b)) for a, b in raw_params)
    return Volume(
        data=data,
        modality_names=modalities,
        norm_state=norm_state,
        norm_params=norm_params,
        subject_id=header.get("subject_id", ""),
    )


# --------------------------------------------------------------------------
# Synthetic two-domain corpora
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthDomainConfig:
    """Controls the simulated scanner shift between the two domains.

    The spread parameter scales both the width of the per-subject scanner
    parameter distributions and their offset from the neutral settings, so
    equal spreads produce statistically identical domains while the default
    asymmetry (wide A, narrow B) produces clearly separable ones.
    """

    n_subjects: int = 24
    dims: tuple = (8, 64, 64)
    domain_a_spread: float = 1.0
    domain_b_spread: float = 0.25
    bias_field_order: int = 3
    lesion_count_range: tuple = (1, 3)
    seed: int = 0

    def validate(self) -> None:
        if self.n_subjects < 1:
            raise ConfigError("n_subjects must be >= 1")
        d, h, w = self.dims
        if d < 8 or h < 32 or w < 32:
            raise ConfigError(f"dims must be >= (8, 32, 32), got {self.dims}")
        if not self.domain_a_spread > self.domain_b_spread > 0:
            raise ConfigError("require domain_a_spread > domain_b_spread > 0")
        if self.bias_field_order < 1:
            raise ConfigError("bias_field_order must be >= 1")
        lo, hi = self.lesion_count_range
        if lo < 0 or hi < lo:
            raise ConfigError(f"bad lesion_count_range {self.lesion_count_range}")


@dataclass
class Corpus:
    """A set of same-shape volumes from one domain with per-volume split labels."""

    volumes: list
    domain_label: str
    splits: list = field(default_factory=list)

    def __post_init__(self):
        if self.domain_label not in ("A", "B"):
            raise ConfigError(f"domain_label must be 'A' or 'B', got {self.domain_label!r}")
        if not self.splits:
            self.splits = [Split.TRAIN] * len(self.volumes)
        self.splits = [Split(s) for s in self.splits]
        if len(self.splits) != len(self.volumes):
            raise ConfigError("splits must align with volumes")
        if self.volumes:
            dims = self.volumes[0].dims
            state = self.volumes[0].norm_state
            for v in self.volumes:
                if v.dims != dims or v.norm_state != state:
                    raise ConfigError("corpus volumes must share dims and norm_state")

    def __len__(self):
        return len(self.volumes)

    def select(self, split) -> "Corpus":
        split = Split(split)
        vols = [v for v, s in zip(self.volumes, self.splits) if s is split]
        return Corpus(volumes=vols, domain_label=self.domain_label, splits=[split] * len(vols))

    def map_volumes(self, fn) -> "Corpus":
        return Corpus(
            volumes=[fn(v) for v in self.volumes],
            domain_label=self.domain_label,
            splits=list(self.splits),
        )


def assign_splits(n: int):
    """70/15/15 split sizes; |train| = round(0.70 n), remainder goes to test."""
    n_train = int(round(SPLIT_FRACTIONS[Split.TRAIN] * n))
    n_val = int(round(SPLIT_FRACTIONS[Split.VAL] * n))
    n_train = min(n_train, n)
    n_val = min(n_val, n - n_train)
    return (
        [Split.TRAIN] * n_train
        + [Split.VAL] * n_val
        + [Split.TEST] * (n - n_train - n_val)
    )


def _normalized_grid(dims):
    d, h, w = dims
    zz = np.linspace(-1.0, 1.0, d)[:, None, None]
    yy = np.linspace(-1.0, 1.0, h)[None, :, None]
    xx = np.linspace(-1.0, 1.0, w)[None, None, :]
    return zz, yy, xx


def _anatomy_template(rng: np.random.Generator, dims, lesion_count_range) -> np.ndarray:
    """Shared anatomical template: concentric smooth structures plus lesions.

    Subject-to-subject variation (ellipsoid radii, contrast jitter, lesion
    placement) is domain-independent by construction.
    """
    zz, yy, xx = _normalized_grid(dims)
    radii = 0.85 + 0.08 * rng.standard_normal(3)
    r = np.sqrt((zz / radii[0]) ** 2 + (yy / radii[1]) ** 2 + (xx / radii[2]) ** 2)
    mask = r < 1.0

    core = np.exp(-((r / 0.25) ** 2))
    wm = np.exp(-(((r - 0.45) / 0.20) ** 2))
    gm = np.exp(-(((r - 0.80) / 0.12) ** 2))

    # rows: (base, wm, gm, core) weights per modality
    mixing = np.array(
        [
            [0.15, 0.80, 0.45, 0.10],  # T1
            [0.15, 0.75, 0.40, 0.15],  # T1CE
            [0.20, 0.30, 0.50, 0.95],  # T2
            [0.20, 0.45, 0.70, 0.15],  # FLAIR
        ]
    )
    mixing = mixing * (1.0 + 0.08 * rng.standard_normal(mixing.shape))
    vol = np.zeros((N_MODALITIES, *dims), dtype=np.float64)
    for m in range(N_MODALITIES):
        b, w_wm, w_gm, w_core = mixing[m]
        vol[m] = (b + w_wm * wm + w_gm * gm + w_core * core) * mask

    d, h, w = dims
    n_lesions = int(rng.integers(lesion_count_range[0], lesion_count_range[1] + 1))
    lesion_gain = np.array([-0.15, 0.30, 0.55, 0.65])
    for _ in range(n_lesions):
        # rejection-free placement: sample inside the central ellipsoid
        cz, cy, cx = (rng.uniform(-0.55, 0.55) for _ in range(3))
        sz = rng.uniform(0.25, 0.55)
        sy = rng.uniform(0.08, 0.18)
        sx = rng.uniform(0.08, 0.18)
        amp = rng.uniform(0.6, 1.2)
        blob = np.exp(
            -(((zz - cz) / sz) ** 2 + ((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2)
        )
        for m in range(N_MODALITIES):
            vol[m] += lesion_gain[m] * amp * blob * mask
    return np.clip(vol, 0.0, None)


def _bias_field(rng: np.random.Generator, dims, order: int, spread: float) -> np.ndarray:
    """Smooth multiplicative field: exponentiated random polynomial in (x, y, z).

    The constant term gets a spread-proportional positive offset so stronger
    scanner drift (domain A) also shifts the mean gain, not just its variance.
    """
    zz, yy, xx = _normalized_grid(dims)
    poly = np.zeros(dims, dtype=np.float64)
    poly += 0.12 * spread + 0.12 * spread * rng.standard_normal()
    for i in range(order + 1):
        for j in range(order + 1 - i):
            for k in range(order + 1 - i - j):
                deg = i + j + k
                if deg == 0:
                    continue
                coeff = rng.standard_normal() * 0.22 * spread / deg
                poly += coeff * (zz**i) * (yy**j) * (xx**k)
    return np.exp(poly)


def _apply_scanner_effects(
    template: np.ndarray, rng: np.random.Generator, cfg: SynthDomainConfig, spread: float
) -> np.ndarray:
    """Bias field x gamma contrast remap + in-mask additive Gaussian noise."""
    mask = template.sum(axis=0) > 0
    out = template * _bias_field(rng, cfg.dims, cfg.bias_field_order, spread)[None]
    for m in range(N_MODALITIES):
        gamma = np.exp(0.20 * spread + 0.25 * spread * rng.standard_normal())
        ref = out[m].max()
        if ref > 0:
            out[m] = ref * (out[m] / ref) ** gamma
    sigma = 0.075 * spread * (0.5 + rng.uniform())
    noise = sigma * rng.standard_normal(out.shape)
    out += noise * mask[None]
    return np.clip(out, 0.0, None)


def synth_domain_pair(cfg: SynthDomainConfig):
    """Deterministically generate (Corpus A, Corpus B) from the config seed."""
    cfg.validate()
    corpora = []
    for domain, spread, domain_key in (
        ("A", cfg.domain_a_spread, 0),
        ("B", cfg.domain_b_spread, 1),
    ):
        volumes = []
        for subj in range(cfg.n_subjects):
            seq = np.random.SeedSequence(
                entropy=cfg.seed, spawn_key=(domain_key, subj)
            )
            rng = np.random.default_rng(seq)
            template = _anatomy_template(rng, cfg.dims, cfg.lesion_count_range)
            data = _apply_scanner_effects(template, rng, cfg, spread)
            volumes.append(
                Volume(data=data.astype(np.float32), subject_id=f"{domain}{subj:03d}")
            )
        corpora.append(
            Corpus(volumes=volumes, domain_label=domain, splits=assign_splits(cfg.n_subjects))
        )
    return corpora[0], corpora[1]


# --------------------------------------------------------------------------
# Corpus directory layout used by the CLI
# --------------------------------------------------------------------------


def save_corpus(corpus: Corpus, root) -> None:
    root = Path(root)
    for split in Split:
        (root / split.value).mkdir(parents=True, exist_ok=True)
    for vol, split in zip(corpus.volumes, corpus.splits):
        save_volume(vol, root / split.value / f"{vol.subject_id or 'vol'}.mvol")
    (root / "domain.json").write_text(
        json.dumps({"domain_label": corpus.domain_label}, sort_keys=True)
    )


def load_corpus(root, split=None) -> Corpus:
    root = Path(root)
    meta = json.loads((root / "domain.json").read_text())
    volumes, splits = [], []
    wanted = [Split(split)] if split is not None else list(Split)
    for sp in wanted:
        sub = root / sp.value
        if not sub.is_dir():
            continue
        for f in sorted(sub.glob("*.mvol")):
            volumes.append(load_volume(f))
            splits.append(sp)
    return Corpus(volumes=volumes, domain_label=meta["domain_label"], splits=splits)
