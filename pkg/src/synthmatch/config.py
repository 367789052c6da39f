"""Dataclass configs for features, model, training, and dataset generation.

Configs load strictly from JSON: unknown keys are rejected so typos fail
loudly.  ``config_hash`` fingerprints a resolved config; it is embedded in
generated outputs so results can be traced back to their settings.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields, is_dataclass

from .dsp import DEFAULT_CQT_FMIN
from .synth import DEFAULT_SAMPLE_RATE, MidiNote


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureConfig:
    """Model-input feature transforms (not the evaluation metric)."""

    stft_window: int = 1024
    stft_hop: int = 256
    mel_window: int = 1024
    mel_hop: int = 256
    mel_bands: int = 64
    cqt_fmin: float = DEFAULT_CQT_FMIN
    cqt_bins_per_octave: int = 12
    cqt_octaves: int = 7
    cqt_hop: int = 512
    mfcc_window: int = 1024
    mfcc_hop: int = 256
    mfcc_bands: int = 64
    mfcc_coeffs: int = 13
    stats_frame: int = 1024
    stats_hop: int = 256
    log_floor: float = 1e-10
    raw_frames: bool = False
    raw_hop: int = 512


@dataclass(frozen=True)
class MfccdConfig:
    """The evaluation metric's MFCC settings; 13 bands canonical, 40 optional.

    Distances are only comparable under identical settings, so this stays
    separate from the model-input FeatureConfig.
    """

    coeffs: int = 13
    bands: int = 64
    window: int = 1024
    hop: int = 256
    log_floor: float = 1e-10

    def kwargs(self) -> dict:
        return {
            "n_mfcc": self.coeffs,
            "n_mels": self.bands,
            "window": self.window,
            "hop": self.hop,
            "log_floor": self.log_floor,
        }


@dataclass(frozen=True)
class ModelConfig:
    """Estimator architecture: per-modality backbones, grouped classifier."""

    modalities: tuple[str, ...] = ("stft", "mel", "cqt", "mfcc", "stats")
    conv_dim: int = 64
    seq_dim: int = 32
    stats_dim: int = 32
    raw_dim: int = 32
    conv_channels: tuple[int, int] = (4, 8)
    group_hidden: int = 64
    head_hidden: int = 32
    masked_layers: int = 1
    pdc_enabled: bool = True
    pdc_primes: int = 4
    pdc_symmetric: bool = True
    pdc_per_channel: bool = False  # default: one filter shared across channels
    activation: str = "relu"

    def backbone_dim(self, modality: str) -> int:
        if modality in ("stft", "mel", "cqt"):
            return self.conv_dim
        if modality == "mfcc":
            return self.seq_dim
        if modality == "stats":
            return self.stats_dim
        if modality == "raw":
            return self.raw_dim
        raise ConfigError(f"unknown modality {modality!r}")

    @property
    def global_dim(self) -> int:
        if not self.modalities:
            raise ConfigError("at least one modality must be enabled")
        return sum(self.backbone_dim(m) for m in self.modalities)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    warmup_epochs: int = 4
    peak_lr: float = 2e-4
    weight_decay: float = 1e-4
    virtual_batch: int = 64
    physical_batch: int = 16
    clip_norm: float = 1.0
    noise_std: float = 0.01
    label_sigma0: float = 1.0
    use_weights: bool = True
    # importance weights are clipped to this range after mean-1 normalization;
    # raw ratios span ~4 orders of magnitude and would starve the quiet
    # parameters of any gradient (0 disables the bound)
    weight_clip: tuple[float, float] = (0.25, 4.0)
    loss_mode: str = "ce"  # "ce" | "mse"
    early_stop_patience: int = 8
    swa_tail: int = 0


@dataclass(frozen=True)
class DatasetConfig:
    n_seed: int = 64
    n_augmented: int = 192
    n_random: int = 64
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    audible_rms: float = 0.01
    retry_cap: int = 100
    compute_weights: bool = False
    weight_splits: tuple[str, ...] = ("train", "val")
    seed_jitter: int = 3


@dataclass(frozen=True)
class GlobalConfig:
    space: str = "fm2-toy"
    seed: int = 0
    sample_rate: int = DEFAULT_SAMPLE_RATE
    note: MidiNote = field(default_factory=MidiNote)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    mfccd: MfccdConfig = field(default_factory=MfccdConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)


def _from_dict(cls, data):
    if not isinstance(data, dict):
        raise ConfigError(f"{cls.__name__}: expected an object, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{cls.__name__}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        ftype = known[name].type
        origin = ftype if isinstance(ftype, type) else None
        if origin is None and isinstance(ftype, str):
            # string annotations from __future__ import; resolve the common ones
            origin = _ANNOTATED.get(ftype)
        if origin is not None and is_dataclass(origin):
            kwargs[name] = _from_dict(origin, value)
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{cls.__name__}: {exc}")


_ANNOTATED = {
    "MidiNote": MidiNote,
    "FeatureConfig": FeatureConfig,
    "MfccdConfig": MfccdConfig,
    "ModelConfig": ModelConfig,
    "TrainConfig": TrainConfig,
    "DatasetConfig": DatasetConfig,
}


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def global_config_from_dict(data: dict) -> GlobalConfig:
    return _from_dict(GlobalConfig, data)


def load_global_config(path) -> GlobalConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})")
    return global_config_from_dict(data)


def save_config(path, cfg) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")


def config_hash(cfg) -> str:
    blob = json.dumps(to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


# ---------------------------------------------------------------------------
# Profiles


def toy_feature_config() -> FeatureConfig:
    """Smaller transforms for the 2-operator desk experiments."""
    return FeatureConfig(
        stft_window=512,
        stft_hop=512,
        mel_window=1024,
        mel_hop=512,
        mel_bands=40,
        cqt_hop=1024,
        mfcc_window=1024,
        mfcc_hop=512,
        mfcc_bands=40,
        stats_frame=1024,
        stats_hop=512,
    )


def toy_global_config(seed: int = 0) -> GlobalConfig:
    """Desk-scale 2-operator experiment: 1280 records, ~5 min of training.

    The small virtual batch matters here: at a thousand training samples
    the full-scale default batch of 64 leaves too few optimizer steps to
    learn anything beyond the label marginals.
    """
    return GlobalConfig(
        space="fm2-toy",
        seed=seed,
        features=toy_feature_config(),
        model=ModelConfig(conv_channels=(6, 12)),
        train=TrainConfig(
            epochs=40,
            warmup_epochs=3,
            peak_lr=1e-3,
            virtual_batch=16,
            physical_batch=16,
            early_stop_patience=20,
        ),
        dataset=DatasetConfig(
            n_seed=256, n_augmented=896, n_random=128, compute_weights=True
        ),
    )


def ablation_global_config(seed: int = 0) -> GlobalConfig:
    """Reduced toy setup for the ablation harness: comparisons, not records."""
    base = toy_global_config(seed)
    return dataclasses.replace(
        base,
        dataset=DatasetConfig(n_seed=48, n_augmented=96, n_random=16,
                              compute_weights=True),
        train=dataclasses.replace(base.train, epochs=12, early_stop_patience=8),
    )


def large_model_config() -> ModelConfig:
    """Full-scale architecture profile: 512-dim conv backbones, 128-dim
    sequence/stats/waveform backbones; the global feature size is the sum
    of the per-backbone output dims (3*512 + 3*128)."""
    return ModelConfig(
        modalities=("stft", "mel", "cqt", "mfcc", "stats", "raw"),
        conv_dim=512,
        seq_dim=128,
        stats_dim=128,
        raw_dim=128,
        conv_channels=(8, 16),
        group_hidden=64,
        head_hidden=64,
        masked_layers=2,
    )
