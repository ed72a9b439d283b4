"""Run configuration: every field has a default and round-trips through YAML."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml

from slf.datagen import AugmentRanges, CorpusSpec
from slf.encoder import EncoderConfig
from slf.errors import ConfigurationError
from slf.numerics import KLAnneal, LossWeights, default_stages
from slf.synthesis import DecoderConfig, TrainOptions


@dataclass
class WeightsConfig:
    alpha: float = 1e-3
    beta: float = 0.02
    gamma: float = 1.0
    delta: float = 1.0
    # desk-scale calibration: the summed 64-dim commitment and the Gram
    # distances of a small encoder are far smaller than unit scale
    zeta: float = 0.004
    kl_margin: float = 0.5
    contrast_margin: float = 0.05
    kl_anneal_start: Optional[int] = None
    kl_anneal_ramp: int = 200
    # spec+stop, then commitment, kl, spk, cycle, contrast
    stage_thresholds: List[int] = field(default_factory=lambda: [0, 50, 100, 150, 200, 250])


@dataclass
class AblationConfig:
    swbn: bool = True
    dat: bool = True
    contrastive: bool = True
    kl: bool = True


ABLATION_ROWS = {
    "none": AblationConfig(),
    "no_dat": AblationConfig(dat=False),
    "no_contrastive": AblationConfig(contrastive=False),
    "no_swbn": AblationConfig(swbn=False),
    "all": AblationConfig(swbn=False, dat=False, contrastive=False, kl=False),
}
ABLATION_LABELS = {
    "none": "None",
    "no_dat": "w/o Speaker DAT",
    "no_contrastive": "w/o Contrastive Cycle Consistency Loss",
    "no_swbn": "w/o Speaker-wise Batch Normalization",
    "all": "All",
}


@dataclass
class TrainConfig:
    steps: int = 600
    speakers_per_batch: int = 4
    utterances_per_speaker: int = 4
    learning_rate: float = 2e-3
    grad_clip: float = 1.0
    checkpoint_every: int = 200
    crop_window: int = 32
    aligned_crops: bool = True
    gram_source: str = "frames"
    grl_scale: float = 1.0
    stop_pos_weight: float = 1.0
    swbn_momentum: float = 0.1
    swbn_eps: float = 1e-5
    codebook_decay: float = 0.9
    codebook_eps: float = 1e-5
    use_ema: bool = True


@dataclass
class EmbedConfig:
    n_balanced: int = 500


@dataclass
class RunConfig:
    variant: str = "qvae"
    seed: int = 0
    out_dir: str = "runs/default"
    num_codes: int = 32
    corpus: CorpusSpec = field(default_factory=lambda: CorpusSpec(tokens_range=(8, 10)))
    encoder: EncoderConfig = field(default_factory=EncoderConfig.small)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    weights: WeightsConfig = field(default_factory=WeightsConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentRanges = field(default_factory=AugmentRanges)
    embed: EmbedConfig = field(default_factory=EmbedConfig)

    def __post_init__(self):
        if self.variant not in ("vae", "qvae"):
            raise ConfigurationError(f"variant must be vae or qvae, got {self.variant!r}")
        self.encoder.variant = self.variant
        self.encoder.num_codes = self.num_codes
        self.encoder.use_swbn = self.ablation.swbn
        self.encoder.n_mels = self.corpus.n_mels

    # -- derived objects -------------------------------------------------------

    def loss_weights(self) -> LossWeights:
        w = self.weights
        lw = LossWeights(
            alpha=w.alpha, beta=w.beta, gamma=w.gamma, delta=w.delta, zeta=w.zeta,
            kl_margin=w.kl_margin, contrast_margin=w.contrast_margin,
            kl_anneal=KLAnneal(start=w.kl_anneal_start, ramp=w.kl_anneal_ramp),
            stages=default_stages(w.stage_thresholds),
        )
        drop = []
        if not self.ablation.dat:
            drop.append("spk")
        if not self.ablation.contrastive:
            drop += ["cycle", "contrast"]
        if not self.ablation.kl:
            drop.append("kl")
        if self.variant == "vae":
            drop.append("commitment")
        return lw.without(*drop) if drop else lw

    def train_options(self) -> TrainOptions:
        t = self.train
        return TrainOptions(crop_window=t.crop_window, aligned_crops=t.aligned_crops, augment=self.augment,
                            gram_source=t.gram_source, grl_scale=t.grl_scale, stop_pos_weight=t.stop_pos_weight)

    def with_ablation(self, row: str) -> "RunConfig":
        if row not in ABLATION_ROWS:
            raise ConfigurationError(f"unknown ablation row {row!r}")
        return from_dict({**to_dict(self), "ablation": asdict(ABLATION_ROWS[row])})

    def updated(self, **changes) -> "RunConfig":
        return from_dict({**to_dict(self), **changes})


def to_dict(cfg: RunConfig) -> Dict[str, Any]:
    d = asdict(cfg)
    d["corpus"] = cfg.corpus.to_dict()
    d["encoder"] = cfg.encoder.to_dict()
    for key in ("pitch_shift_bins", "energy_offset", "duration_factor"):
        d["augment"][key] = list(d["augment"][key])
    return d


def _build(cls, data):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigurationError(f"expected a mapping for {cls.__name__}, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigurationError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**data)


def from_dict(data: Dict[str, Any]) -> RunConfig:
    if not isinstance(data or {}, dict):
        raise ConfigurationError("configuration must be a mapping")
    data = dict(data or {})
    nested = {
        "corpus": CorpusSpec,
        "encoder": EncoderConfig,
        "decoder": DecoderConfig,
        "weights": WeightsConfig,
        "ablation": AblationConfig,
        "train": TrainConfig,
        "augment": AugmentRanges,
        "embed": EmbedConfig,
    }
    defaults = RunConfig()
    kwargs = {}
    for key, value in data.items():
        if key in nested:
            if value is not None and not isinstance(value, dict):
                raise ConfigurationError(f"section {key!r} must be a mapping, got {type(value).__name__}")
            base = to_dict(defaults)[key]
            merged = {**base, **(value or {})}
            kwargs[key] = _build(nested[key], merged)
        elif key in {f.name for f in fields(RunConfig)}:
            kwargs[key] = value
        else:
            raise ConfigurationError(f"unknown config key {key!r}")
    return RunConfig(**kwargs)


def dumps(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def loads(text: str) -> RunConfig:
    return from_dict(yaml.safe_load(text) or {})


def load(path) -> RunConfig:
    return loads(Path(path).read_text())


def save(cfg: RunConfig, path) -> None:
    Path(path).write_text(dumps(cfg))
