"""Synthetic multi-speaker, multi-style corpus and the two augmentations.

Features are log-amplitude, mel-like ``[T, F]`` matrices built from

* a speaker spectral envelope (zero-mean over bins) and pitch offset,
* a per-token spectral pattern and duration (shared by all speakers),
* a harmonic peak comb that follows a pitch track,
* a style-dependent pitch base/range, energy level and tempo,
* small additive noise.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from slf.errors import ConfigurationError, ContractViolation

FEATURE_MAGIC = b"SLF1"
FEATURE_VERSION = 1
MANIFEST_FIELDS = ("utt_id", "speaker_id", "style_factor", "token_ids", "feature_path")


@dataclass
class Utterance:
    utt_id: str
    token_ids: List[int]
    speaker_id: int
    features: np.ndarray
    # Ground-truth style, for evaluation only; no training loss may read it.
    style_factor: int

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class StyleProfile:
    pitch_shift: float
    pitch_range: float
    energy: float
    tempo: float


DEFAULT_STYLES = (
    StyleProfile(pitch_shift=0.0, pitch_range=1.0, energy=0.0, tempo=1.0),    # neutral
    StyleProfile(pitch_shift=5.0, pitch_range=3.0, energy=0.6, tempo=0.75),   # bright / fast
    StyleProfile(pitch_shift=-4.0, pitch_range=0.5, energy=-0.6, tempo=1.35), # low / slow
    StyleProfile(pitch_shift=2.0, pitch_range=2.0, energy=1.2, tempo=1.0),    # loud
)


@dataclass
class CorpusSpec:
    n_speakers: int = 6
    n_neutral_speakers: int = 2
    n_styles: int = 4
    utterances_per_cell: int = 50
    frames_range: Tuple[int, int] = (12, 120)
    tokens_range: Tuple[int, int] = (7, 11)
    n_tokens: int = 24
    n_mels: int = 80
    speaker_envelope_scale: float = 1.0
    speaker_pitch_scale: float = 3.0
    noise_std: float = 0.05
    seed: int = 0

    def __post_init__(self):
        self.frames_range = tuple(self.frames_range)
        self.tokens_range = tuple(self.tokens_range)

    def validate(self):
        if self.n_speakers < 1 or self.n_styles < 1 or self.utterances_per_cell < 1:
            raise ConfigurationError("corpus needs at least one speaker, style and utterance per cell")
        if not 0 <= self.n_neutral_speakers <= self.n_speakers:
            raise ConfigurationError("n_neutral_speakers must be within [0, n_speakers]")
        if self.n_styles > len(DEFAULT_STYLES):
            raise ConfigurationError(f"at most {len(DEFAULT_STYLES)} synthetic styles are defined")
        lo, hi = self.frames_range
        if not 1 <= lo <= hi:
            raise ConfigurationError(f"invalid frames_range {self.frames_range}")
        tlo, thi = self.tokens_range
        if not 1 <= tlo <= thi:
            raise ConfigurationError(f"invalid tokens_range {self.tokens_range}")
        if self.n_mels < 16:
            raise ConfigurationError("need at least 16 feature bins")

    def expected_count(self) -> int:
        full = self.n_speakers - self.n_neutral_speakers
        return (full * self.n_styles + self.n_neutral_speakers) * self.utterances_per_cell

    def to_dict(self):
        d = asdict(self)
        d["frames_range"] = list(self.frames_range)
        d["tokens_range"] = list(self.tokens_range)
        return d


def _smooth_curve(rng, n, n_components=4, scale=1.0):
    x = np.linspace(0.0, 1.0, n)
    curve = np.zeros(n)
    for k in range(1, n_components + 1):
        curve += rng.normal() / k * np.cos(np.pi * k * x + rng.uniform(0, 2 * np.pi))
    curve -= curve.mean()
    return scale * curve / (np.abs(curve).max() + 1e-9)


def _harmonics(f0_bins: np.ndarray, n_mels: int, width: float = 1.2) -> np.ndarray:
    """Harmonic peak comb for a pitch track ``[T]`` given in bin units."""
    bins = np.arange(n_mels)[None, None, :]
    h = np.arange(1, 8)[None, :, None]
    centers = f0_bins[:, None, None] * h
    amp = 1.5 / h ** 0.7
    comb = amp * np.exp(-0.5 * ((bins - centers) / width) ** 2)
    return comb.sum(axis=1)


class _Voices:
    """Fixed random tables (speakers, tokens) derived from the corpus seed."""

    def __init__(self, spec: CorpusSpec):
        rng = np.random.default_rng([spec.seed, 7])
        self.envelopes = np.stack([
            _smooth_curve(rng, spec.n_mels, scale=spec.speaker_envelope_scale)
            for _ in range(spec.n_speakers)
        ])
        self.pitch_offsets = rng.uniform(-1.0, 1.0, spec.n_speakers) * spec.speaker_pitch_scale
        self.token_patterns = np.stack([
            _smooth_curve(rng, spec.n_mels, n_components=8, scale=0.8) for _ in range(spec.n_tokens)
        ])
        self.token_durations = rng.integers(3, 6, spec.n_tokens)


def _render(spec, voices, rng, speaker, style, tokens):
    profile = DEFAULT_STYLES[style]
    tempo = profile.tempo * (1.0 + 0.04 * rng.normal())
    durations = np.maximum(1, np.round(voices.token_durations[tokens] * tempo)).astype(int)
    frame_tokens = np.repeat(tokens, durations)
    lo, hi = spec.frames_range
    if frame_tokens.size < lo:
        frame_tokens = np.concatenate([frame_tokens, np.repeat(frame_tokens[-1:], lo - frame_tokens.size)])
    frame_tokens = frame_tokens[:hi]
    t = np.arange(frame_tokens.size)
    base = 8.0 + voices.pitch_offsets[speaker] + profile.pitch_shift + 0.7 * rng.normal()
    period = rng.uniform(18.0, 30.0) * tempo
    f0 = base + profile.pitch_range * np.sin(2 * np.pi * t / period + rng.uniform(0, 2 * np.pi))
    energy = profile.energy + 0.08 * rng.normal()
    feats = (
        voices.envelopes[speaker][None, :]
        + voices.token_patterns[frame_tokens]
        + _harmonics(np.maximum(f0, 2.0), spec.n_mels)
        + energy
        + spec.noise_std * rng.normal(size=(frame_tokens.size, spec.n_mels))
    )
    return feats.astype(np.float32)


def corpus_layout(spec: CorpusSpec):
    """Ordered (speaker, style) cells; neutral-only speakers are the last ones."""
    full = spec.n_speakers - spec.n_neutral_speakers
    cells = []
    for speaker in range(spec.n_speakers):
        styles = range(spec.n_styles) if speaker < full else [0]
        cells.extend((speaker, style) for style in styles)
    return cells


def generate_corpus(spec: CorpusSpec) -> List[Utterance]:
    """Deterministic synthetic corpus (per ``spec.seed``)."""
    spec.validate()
    voices = _Voices(spec)
    utterances = []
    for speaker, style in corpus_layout(spec):
        for i in range(spec.utterances_per_cell):
            rng = np.random.default_rng([spec.seed, speaker, style, i])
            n_tok = int(rng.integers(spec.tokens_range[0], spec.tokens_range[1] + 1))
            tokens = rng.integers(0, spec.n_tokens, n_tok)
            feats = _render(spec, voices, rng, speaker, style, tokens)
            utterances.append(Utterance(
                utt_id=f"spk{speaker:02d}_sty{style}_{i:04d}",
                token_ids=[int(x) for x in tokens],
                speaker_id=speaker,
                features=feats,
                style_factor=style,
            ))
    return utterances


def crop_invariant(features: np.ndarray, window: int = 300, rng: Optional[np.random.Generator] = None,
                   offset: Optional[int] = None):
    """Random contiguous ``window``-frame slice; short inputs are returned whole.

    Returns:
        (cropped features, start offset)
    """
    if window < 1:
        raise ContractViolation(f"crop window must be >= 1, got {window}")
    t = features.shape[0]
    if t <= window:
        return features, 0
    if offset is None:
        rng = rng if rng is not None else np.random.default_rng()
        offset = int(rng.integers(0, t - window + 1))
    offset = min(max(int(offset), 0), t - window)
    return features[offset:offset + window], offset


@dataclass
class AugmentRanges:
    pitch_shift_bins: Tuple[int, int] = (-4, 4)
    energy_offset: Tuple[float, float] = (-0.7, 0.7)
    duration_factor: Tuple[float, float] = (0.8, 1.25)
    min_perturbation: bool = True

    def __post_init__(self):
        self.pitch_shift_bins = tuple(self.pitch_shift_bins)
        self.energy_offset = tuple(self.energy_offset)
        self.duration_factor = tuple(self.duration_factor)


def sample_augmentation(ranges: AugmentRanges, rng: np.random.Generator):
    """Draw (bin shift, energy offset, duration factor), never the identity."""
    while True:
        k = int(rng.integers(ranges.pitch_shift_bins[0], ranges.pitch_shift_bins[1] + 1))
        offset = float(rng.uniform(*ranges.energy_offset))
        factor = float(rng.uniform(*ranges.duration_factor))
        if not ranges.min_perturbation or (k, offset, factor) != (0, 0.0, 1.0):
            return k, offset, factor


def shift_bins(features: np.ndarray, k: int) -> np.ndarray:
    """Shift along frequency by ``k`` bins, replicating the edge rows."""
    if k == 0:
        return features.copy()
    f = features.shape[1]
    src = np.clip(np.arange(f) - k, 0, f - 1)
    return features[:, src]


def resample_time(features: np.ndarray, factor: float) -> np.ndarray:
    """Linear time resampling to ``round(T * factor)`` frames."""
    t = features.shape[0]
    n_out = max(1, int(round(t * factor)))
    if n_out == t:
        return features.copy()
    pos = np.arange(n_out) * (t - 1) / max(n_out - 1, 1) if n_out > 1 else np.zeros(1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, t - 1)
    w = (pos - lo)[:, None]
    return ((1.0 - w) * features[lo] + w * features[hi]).astype(features.dtype)


def apply_augmentation(features: np.ndarray, k: int, offset: float, factor: float) -> np.ndarray:
    out = shift_bins(features, k)
    out = out + np.asarray(offset, dtype=features.dtype)
    return resample_time(out, factor)


def augment_contrastive(features: np.ndarray, ranges: AugmentRanges, rng: np.random.Generator) -> np.ndarray:
    """Pitch (bin shift), energy (additive) and duration (resampling) perturbation."""
    k, offset, factor = sample_augmentation(ranges, rng)
    return apply_augmentation(features, k, offset, factor)


def write_features(path, features: np.ndarray):
    features = np.ascontiguousarray(features, dtype="<f4")
    t, f = features.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", FEATURE_VERSION, t, f))
        fh.write(features.tobytes(order="C"))


def read_features(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != FEATURE_MAGIC:
        raise ConfigurationError(f"{path}: not a feature file (bad magic)")
    version, t, f = struct.unpack("<III", blob[4:16])
    if version != FEATURE_VERSION:
        raise ConfigurationError(f"{path}: unsupported feature version {version}")
    payload = blob[16:]
    if len(payload) != 4 * t * f:
        raise ConfigurationError(f"{path}: truncated payload")
    return np.frombuffer(payload, dtype="<f4").reshape(t, f).astype(np.float32)


def write_corpus(utterances: Sequence[Utterance], out_dir, force: bool = False) -> Path:
    """Write feature files and a tab-separated manifest; returns manifest path."""
    out_dir = Path(out_dir)
    manifest = out_dir / "manifest.tsv"
    if manifest.exists() and not force:
        raise FileExistsError(f"{manifest} exists; pass --force to overwrite")
    feat_dir = out_dir / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    with open(manifest, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for utt in utterances:
            rel = f"features/{utt.utt_id}.slf"
            write_features(out_dir / rel, utt.features)
            w.writerow([utt.utt_id, utt.speaker_id, utt.style_factor,
                        " ".join(str(t) for t in utt.token_ids), rel])
    return manifest


def read_corpus(manifest) -> List[Utterance]:
    """Load a manifest written by :func:`write_corpus` or by an external tool."""
    manifest = Path(manifest)
    utterances = []
    with open(manifest, newline="") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        missing = set(MANIFEST_FIELDS) - set(reader.fieldnames or [])
        if missing:
            raise ConfigurationError(f"{manifest}: missing columns {sorted(missing)}")
        for row in reader:
            path = Path(row["feature_path"])
            if not path.is_absolute():
                path = manifest.parent / path
            utterances.append(Utterance(
                utt_id=row["utt_id"],
                token_ids=[int(t) for t in row["token_ids"].split()],
                speaker_id=int(row["speaker_id"]),
                features=read_features(path),
                style_factor=int(row["style_factor"]),
            ))
    return utterances


def summary_statistics(features: np.ndarray) -> np.ndarray:
    """(mean log-energy, spectral-centroid track variance, frame count)."""
    power = np.exp(features)
    bins = np.arange(features.shape[1])
    centroid = (power * bins).sum(axis=1) / power.sum(axis=1)
    return np.array([features.mean(), centroid.var(), float(features.shape[0])])
