"""Training and inference for the multi-modal parameter estimator.

Covers the full path: audio -> multi-modal feature bundle -> network ->
per-parameter class predictions, plus the training-side techniques
(Gaussian label smoothing, perturbation-based importance weights, AdamW
with warmup-cosine schedule, gradient accumulation/clipping, input noise,
early stopping, snapshot averaging).  Training is single threaded and
seeded: identical runs produce byte-identical checkpoints.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import arrayio, dsp, nn, wavio
from .config import (
    ConfigError,
    FeatureConfig,
    GlobalConfig,
    MfccdConfig,
    ModelConfig,
    TrainConfig,
    config_hash,
    global_config_from_dict,
    to_dict,
)
from .model import EstimatorModel
from .synth import (
    AudioBuffer,
    MidiNote,
    ParameterSpace,
    Preset,
    get_space,
    read_preset,
    render,
)

SPECTRAL_MODALITIES = ("stft", "mel", "cqt")
_LOG_OFFSET = 1e-5


# ---------------------------------------------------------------------------
# Feature bundles


@dataclass
class FeatureBundle:
    """All model inputs derived from one audio buffer."""

    stft: dsp.Spectrogram
    mel: dsp.Spectrogram
    cqt: dsp.Spectrogram
    mfcc: dsp.MfccMatrix
    stats: dsp.StatTracks
    raw_frames: np.ndarray | None = None


def extract_bundle(audio: AudioBuffer, cfg: FeatureConfig) -> FeatureBundle:
    x = audio.samples
    sr = audio.sample_rate
    raw = None
    if cfg.raw_frames:
        n_frames = x.size // cfg.raw_hop
        raw = x[: n_frames * cfg.raw_hop].reshape(n_frames, cfg.raw_hop)
    return FeatureBundle(
        stft=dsp.stft_spectrogram(x, sr, cfg.stft_window, cfg.stft_hop),
        mel=dsp.mel_spectrogram(x, sr, cfg.mel_bands, cfg.mel_window, cfg.mel_hop),
        cqt=dsp.cqt_chromagram(
            x, sr,
            dsp.CqtConfig(cfg.cqt_fmin, cfg.cqt_bins_per_octave, cfg.cqt_octaves, cfg.cqt_hop),
        ),
        mfcc=dsp.mfcc(x, sr, cfg.mfcc_coeffs, cfg.mfcc_bands, cfg.mfcc_window,
                      cfg.mfcc_hop, cfg.log_floor),
        stats=dsp.statistical_features(x, cfg.stats_frame, cfg.stats_hop),
        raw_frames=raw,
    )


def bundle_to_arrays(bundle: FeatureBundle) -> dict[str, np.ndarray]:
    """Model-input layout: spectrograms (1,K,T), mfcc (T,D), stats (4,T)."""
    arrays = {
        "stft": bundle.stft.data.astype(np.float32),
        "mel": bundle.mel.data.astype(np.float32),
        "cqt": bundle.cqt.data.astype(np.float32),
        "mfcc": bundle.mfcc.coeffs.T.astype(np.float32),
        "stats": bundle.stats.stacked().astype(np.float32),
    }
    if bundle.raw_frames is not None:
        arrays["raw"] = bundle.raw_frames.astype(np.float32)
    return arrays


def feature_shapes(cfg: FeatureConfig, num_samples: int) -> dict[str, tuple]:
    """Expected per-modality array shapes for audio of ``num_samples`` samples."""

    def frames(window, hop):
        if num_samples < window:
            raise ConfigError(f"audio shorter than a {window}-sample window")
        return (num_samples - window) // hop + 1

    shapes = {
        "stft": (cfg.stft_window // 2 + 1, frames(cfg.stft_window, cfg.stft_hop)),
        "mel": (cfg.mel_bands, frames(cfg.mel_window, cfg.mel_hop)),
        "cqt": (cfg.cqt_bins_per_octave * cfg.cqt_octaves, 1 + (num_samples - 1) // cfg.cqt_hop),
        "mfcc": (frames(cfg.mfcc_window, cfg.mfcc_hop), cfg.mfcc_coeffs),
        "stats": (4, frames(cfg.stats_frame, cfg.stats_hop)),
    }
    if cfg.raw_frames:
        shapes["raw"] = (num_samples // cfg.raw_hop, cfg.raw_hop)
    return shapes


@dataclass
class FeatureNormalizer:
    """Log-compresses spectral inputs, then standardizes per bin/coeff/track."""

    means: dict[str, np.ndarray] = field(default_factory=dict)
    stds: dict[str, np.ndarray] = field(default_factory=dict)

    @staticmethod
    def _compress(modality: str, x: np.ndarray) -> np.ndarray:
        if modality in SPECTRAL_MODALITIES:
            return np.log(x + _LOG_OFFSET)
        return x

    @staticmethod
    def _axes(modality: str, ndim: int) -> tuple:
        if modality in SPECTRAL_MODALITIES:  # (N,1,K,T) -> per bin
            return (0, 1, 3)
        if modality == "mfcc":  # (N,T,D) -> per coefficient
            return (0, 1)
        if modality == "stats":  # (N,4,T) -> per track
            return (0, 2)
        return tuple(range(ndim))  # raw: global scalar

    def fit(self, arrays: dict[str, np.ndarray]) -> "FeatureNormalizer":
        for m, x in arrays.items():
            c = self._compress(m, x.astype(np.float64))
            axes = self._axes(m, x.ndim)
            mean = c.mean(axis=axes, keepdims=True)[0]
            std = np.maximum(c.std(axis=axes, keepdims=True)[0], 1e-6)
            self.means[m] = mean.astype(np.float32)
            self.stds[m] = std.astype(np.float32)
        return self

    def transform(self, modality: str, x: np.ndarray) -> np.ndarray:
        c = self._compress(modality, x.astype(np.float32))
        return (c - self.means[modality]) / self.stds[modality]

    def transform_all(self, arrays: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        return {m: self.transform(m, x) for m, x in arrays.items()}

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for m in self.means:
            out[f"norm/{m}/mean"] = self.means[m]
            out[f"norm/{m}/std"] = self.stds[m]
        return out

    @classmethod
    def from_state(cls, arrays: dict[str, np.ndarray]) -> "FeatureNormalizer":
        norm = cls()
        for name, arr in arrays.items():
            if not name.startswith("norm/"):
                continue
            _, modality, kind = name.split("/")
            (norm.means if kind == "mean" else norm.stds)[modality] = arr
        return norm


# ---------------------------------------------------------------------------
# Label smoothing


def label_smooth(class_index: int, num_classes: int, sigma0: float) -> np.ndarray:
    """Gaussian-smoothed one-hot target, truncated to the class range and
    renormalized; sigma is measured in class-index units."""
    if not 0 <= class_index < num_classes:
        raise ValueError(f"class {class_index} outside 0..{num_classes - 1}")
    if sigma0 < 0:
        raise ValueError("sigma0 must be >= 0")
    if sigma0 == 0:
        target = np.zeros(num_classes)
        target[class_index] = 1.0
        return target
    k = np.arange(num_classes)
    # tiny sigma can overflow the squared argument; the limit is a one-hot
    with np.errstate(over="ignore"):
        target = np.exp(-0.5 * ((k - class_index) / sigma0) ** 2)
    return target / target.sum()


def smoothing_matrix(num_classes: int, sigma0: float) -> np.ndarray:
    """Row c = label_smooth(c); precomputed lookup for batch targets."""
    return np.stack([label_smooth(c, num_classes, sigma0) for c in range(num_classes)])


# ---------------------------------------------------------------------------
# Gradient-inspired importance weights


def gradient_weights(
    preset: Preset,
    note: MidiNote,
    sample_rate: int,
    mfccd_cfg: MfccdConfig = MfccdConfig(),
    perturb_classes: int = 1,
) -> dict[str, float]:
    """Per-parameter importance: audio-space change per parameter-space change.

    Each non-fixed parameter is nudged by +-perturb_classes classes (one
    sided at range ends), both presets are rendered, and the weight is the
    mean of MFCC distance divided by the squared normalized parameter step.
    Parameters with no audible effect get exactly zero.
    """
    kw = mfccd_cfg.kwargs()
    base = render(preset, note, sample_rate)
    base_mfcc = dsp.mfcc(base.samples, sample_rate, **kw).coeffs
    weights: dict[str, float] = {}
    for desc in preset.space.non_fixed:
        idx = preset.get(desc.name)
        deltas = [d for d in (perturb_classes, -perturb_classes)
                  if 0 <= idx + d < desc.class_count]
        ratios = []
        for delta in deltas:
            perturbed = preset.with_classes({desc.name: idx + delta})
            audio = render(perturbed, note, sample_rate)
            coeffs = dsp.mfcc(audio.samples, sample_rate, **kw).coeffs
            dist = float(np.mean(np.sum(np.square(coeffs - base_mfcc), axis=0)))
            step = delta / max(desc.class_count - 1, 1)
            ratios.append(dist / (step * step))
        weights[desc.name] = float(np.mean(ratios)) if ratios else 0.0
    return weights


def normalize_weights(weights: np.ndarray,
                      clip: tuple[float, float] | None = None) -> np.ndarray:
    """Scale each row to mean 1; all-zero rows stay zero.

    With ``clip`` the normalized values are bounded and renormalized, so a
    single dominant parameter cannot absorb all of the loss.
    """
    out = weights.astype(np.float64).copy()

    def mean_one(w):
        means = w.mean(axis=-1, keepdims=True)
        nz = means[..., 0] > 0
        w[nz] /= means[nz]
        return w

    out = mean_one(out)
    if clip and clip[1] > 0:
        nz = out.mean(axis=-1) > 0
        out[nz] = np.clip(out[nz], clip[0], clip[1])
        out = mean_one(out)
    return out.astype(np.float32)


# ---------------------------------------------------------------------------
# Loss


def head_loss_and_grads(
    model: EstimatorModel,
    logits: dict[str, np.ndarray],
    targets: np.ndarray,
    weights: np.ndarray,
    sigma0: float,
    divisor: float,
    mode: str = "ce",
    smoothing_cache: dict | None = None,
):
    """Loss summed over this micro-batch divided by ``divisor``; grads to match.

    ``targets``/``weights`` are (N, H) in model head order.  Continuous
    heads use Gaussian-smoothed targets, categorical heads one-hot.  The
    "mse" mode regresses the softmax-expected class center instead.
    """
    if smoothing_cache is None:
        smoothing_cache = {}
    total = 0.0
    grads: dict[str, np.ndarray] = {}
    for h, name in enumerate(model.head_names):
        z = logits[name]
        k = model.head_classes[name]
        w = weights[:, h]
        cls = targets[:, h]
        kind = model.space.descriptor(name).kind
        sig = sigma0 if kind == "continuous" else 0.0
        key = (k, sig)
        if key not in smoothing_cache:
            smoothing_cache[key] = smoothing_matrix(k, sig).astype(np.float64)
        target_probs = smoothing_cache[key][cls]
        if mode == "ce":
            loss_vec, gunit = nn.cross_entropy_with_logits(z.astype(np.float64), target_probs)
            total += float(np.sum(w * loss_vec)) / divisor
            grads[name] = ((w[:, None] * gunit) / divisor).astype(z.dtype)
        elif mode == "mse":
            centers = np.arange(k, dtype=np.float64) / max(k - 1, 1)
            p = nn.softmax(z.astype(np.float64))
            pred = p @ centers
            true = centers[cls]
            diff = pred - true
            total += float(np.sum(w * diff * diff)) / divisor
            gz = (2.0 * (w * diff))[:, None] * p * (centers[None, :] - pred[:, None])
            grads[name] = (gz / divisor).astype(z.dtype)
        else:
            raise ConfigError(f"unknown loss mode {mode!r}")
    return total, grads


# ---------------------------------------------------------------------------
# Training data access


@dataclass
class SplitData:
    ids: list[str]
    arrays: dict[str, np.ndarray]
    targets: np.ndarray  # (N, H) int64
    weights: np.ndarray  # (N, H) float32, mean 1 per row (or all zero)

    def __len__(self):
        return self.targets.shape[0]

    def take(self, idx) -> dict[str, np.ndarray]:
        return {m: x[idx] for m, x in self.arrays.items()}


def load_split(records, space: ParameterSpace, cfg: FeatureConfig,
               dataset_dir, use_weights: bool,
               weight_clip: tuple[float, float] | None = None) -> SplitData:
    """Read audio, extract feature arrays, and assemble targets/weights."""
    head_names = [d.name for d in space.non_fixed]
    arrays: dict[str, list] = {}
    targets = np.zeros((len(records), len(head_names)), dtype=np.int64)
    weights = np.ones((len(records), len(head_names)), dtype=np.float32)
    ids = []
    for i, rec in enumerate(records):
        samples, sr = wavio.read_wav(os.path.join(dataset_dir, rec.audio_path))
        bundle = extract_bundle(AudioBuffer(samples, sr), cfg)
        for m, arr in bundle_to_arrays(bundle).items():
            arrays.setdefault(m, []).append(arr)
        preset = read_preset(os.path.join(dataset_dir, rec.preset_path), space)
        for h, name in enumerate(head_names):
            targets[i, h] = preset.get(name)
        if use_weights and rec.weights_path:
            with open(os.path.join(dataset_dir, rec.weights_path), "r", encoding="utf-8") as fh:
                wdoc = json.load(fh)
            for h, name in enumerate(head_names):
                weights[i, h] = float(wdoc.get(name, 0.0))
        ids.append(rec.id)
    stacked = {m: np.stack(v) for m, v in arrays.items()}
    return SplitData(ids, stacked, targets, normalize_weights(weights, weight_clip))


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class TrainedModel:
    model: EstimatorModel
    normalizer: FeatureNormalizer
    space: ParameterSpace
    note: MidiNote
    sample_rate: int
    cfg: GlobalConfig


def _evaluate(model, norm, split: SplitData, batch: int, sigma0: float, mode: str,
              cache: dict) -> tuple[float, float]:
    """(mean unweighted loss, mean top-1 accuracy) over a split."""
    n = len(split)
    ones = np.ones_like(split.weights)
    total = 0.0
    correct = 0
    count = 0
    for start in range(0, n, batch):
        idx = slice(start, min(start + batch, n))
        arrays = {m: norm.transform(m, x[idx]) for m, x in split.arrays.items()}
        logits = model.forward(arrays)
        bsz = split.targets[idx].shape[0]
        loss, _ = head_loss_and_grads(
            model, logits, split.targets[idx], ones[idx], sigma0,
            divisor=bsz * len(model.head_names), mode=mode, smoothing_cache=cache,
        )
        total += loss * bsz
        for h, name in enumerate(model.head_names):
            correct += int(np.sum(np.argmax(logits[name], axis=1) == split.targets[idx][:, h]))
            count += bsz
    return total / n, correct / max(count, 1)


def train_model(
    dataset_dir,
    cfg: GlobalConfig,
    out_dir,
    seed: int | None = None,
) -> dict:
    """Train on a generated dataset directory; write a checkpoint to out_dir.

    Returns the training history.  Deterministic for a fixed seed: the
    checkpoint bytes are identical across reruns.
    """
    from .dataset import load_manifest

    seed = cfg.seed if seed is None else seed
    tc = cfg.train
    manifest = load_manifest(dataset_dir)
    space = get_space(manifest.space_id)
    train_recs = [r for r in manifest.records if r.split == "train"]
    val_recs = [r for r in manifest.records if r.split == "val"]
    if not train_recs:
        raise ConfigError("dataset has no training records")

    train_data = load_split(train_recs, space, cfg.features, dataset_dir,
                            tc.use_weights, tc.weight_clip)
    val_data = load_split(val_recs, space, cfg.features, dataset_dir, False) if val_recs else None

    shapes = {m: x.shape[2:] if m in SPECTRAL_MODALITIES else x.shape[1:]
              for m, x in train_data.arrays.items()}
    model = EstimatorModel(cfg.model, cfg.features, space, shapes, seed=seed)
    norm = FeatureNormalizer().fit(train_data.arrays)

    # normalize once; noise is added per batch on copies
    prepped = norm.transform_all(train_data.arrays)
    val_prepped = None
    if val_data is not None:
        val_view = SplitData(val_data.ids, norm.transform_all(val_data.arrays),
                             val_data.targets, val_data.weights)
        val_prepped = val_view

    params = model.parameters()
    opt = nn.adamw_init(params, weight_decay=tc.weight_decay)
    n_train = len(train_data)
    steps_per_epoch = max(1, math.ceil(n_train / tc.virtual_batch))
    total_steps = tc.epochs * steps_per_epoch
    warmup_steps = tc.warmup_epochs * steps_per_epoch

    ss = np.random.SeedSequence([seed, 0x5EED])
    shuffle_rng, noise_rng = [np.random.default_rng(s) for s in ss.spawn(2)]
    smoothing_cache: dict = {}
    history = []
    best_val = math.inf
    best_params = None
    since_best = 0
    snapshots: list[dict[str, np.ndarray]] = []
    step = 0
    h_count = len(model.head_names)

    for epoch in range(tc.epochs):
        perm = shuffle_rng.permutation(n_train)
        epoch_loss = 0.0
        for vstart in range(0, n_train, tc.virtual_batch):
            vidx = perm[vstart : vstart + tc.virtual_batch]
            lr = nn.warmup_cosine_lr(step, total_steps, warmup_steps, tc.peak_lr)
            model.zero_grads()
            vloss = 0.0
            divisor = float(len(vidx) * h_count)
            for mstart in range(0, len(vidx), tc.physical_batch):
                midx = vidx[mstart : mstart + tc.physical_batch]
                batch = {m: nn.add_gaussian_noise(x[midx], tc.noise_std, noise_rng)
                         for m, x in prepped.items()}
                logits = model.forward(batch)
                loss, head_grads = head_loss_and_grads(
                    model, logits, train_data.targets[midx], train_data.weights[midx],
                    tc.label_sigma0, divisor, tc.loss_mode, smoothing_cache,
                )
                model.backward(head_grads)
                vloss += loss
            grads = model.gradients()
            nn.clip_global_norm(grads, tc.clip_norm)
            nn.adamw_step(opt, params, grads, lr)
            step += 1
            epoch_loss += vloss * len(vidx)
        entry = {
            "epoch": epoch,
            "train_loss": epoch_loss / n_train,
            "lr": nn.warmup_cosine_lr(step - 1, total_steps, warmup_steps, tc.peak_lr),
        }
        if val_prepped is not None:
            # val arrays were normalized up front, so transform is identity here
            val_loss, val_acc = _evaluate(
                model, _IdentityNorm(), val_prepped,
                tc.physical_batch, tc.label_sigma0, tc.loss_mode, smoothing_cache,
            )
            entry["val_loss"] = val_loss
            entry["val_accuracy"] = val_acc
            monitored = val_loss
        else:
            monitored = entry["train_loss"]
        history.append(entry)
        if tc.swa_tail > 0:
            snapshots.append({k: v.copy() for k, v in params.items()})
            snapshots = snapshots[-tc.swa_tail :]
        if monitored < best_val:
            best_val = monitored
            best_params = {k: v.copy() for k, v in params.items()}
            since_best = 0
        else:
            since_best += 1
            if tc.early_stop_patience > 0 and since_best >= tc.early_stop_patience:
                break

    if tc.swa_tail > 0 and snapshots:
        final = {k: np.mean([s[k] for s in snapshots], axis=0).astype(params[k].dtype)
                 for k in params}
        model.set_parameters(final)
    elif best_params is not None:
        model.set_parameters(best_params)

    trained = TrainedModel(model, norm, space, cfg.note, cfg.sample_rate, cfg)
    save_model(out_dir, trained, opt, history, seed)
    return {"history": history, "model_dir": str(out_dir)}


class _IdentityNorm:
    """Stand-in normalizer for arrays that were already transformed."""

    def transform(self, modality, x):
        return x


def save_model(out_dir, trained: TrainedModel, opt: nn.OptimizerState,
               history: list, seed: int) -> None:
    os.makedirs(out_dir, exist_ok=True)
    arrays = dict(trained.model.parameters())
    arrays.update(trained.normalizer.state_arrays())
    arrayio.save_arrays(os.path.join(out_dir, "params.bin"), arrays)
    moments = {f"m/{k}": v for k, v in opt.m.items()}
    moments.update({f"v/{k}": v for k, v in opt.v.items()})
    arrayio.save_arrays(os.path.join(out_dir, "moments.bin"), moments)
    chash = config_hash(trained.cfg)
    meta = {
        "config": to_dict(trained.cfg),
        "config_hash": chash,
        "feature_shapes": {m: list(s) for m, s in trained.model.feature_shapes.items()},
        "param_count": trained.model.param_count(),
    }
    with open(os.path.join(out_dir, "model.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    state = {
        "step": opt.step,
        "moments_file": "moments.bin",
        "seed": seed,
        "config_hash": chash,
    }
    with open(os.path.join(out_dir, "state.json"), "w", encoding="utf-8") as fh:
        json.dump(state, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "history.json"), "w", encoding="utf-8") as fh:
        json.dump(history, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(model_dir) -> TrainedModel:
    with open(os.path.join(model_dir, "model.json"), "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    cfg = global_config_from_dict(meta["config"])
    space = get_space(cfg.space)
    shapes = {m: tuple(s) for m, s in meta["feature_shapes"].items()}
    model = EstimatorModel(cfg.model, cfg.features, space, shapes, seed=0)
    arrays = arrayio.load_arrays(os.path.join(model_dir, "params.bin"))
    norm = FeatureNormalizer.from_state(arrays)
    model.set_parameters({k: v for k, v in arrays.items() if not k.startswith("norm/")})
    return TrainedModel(model, norm, space, cfg.note, cfg.sample_rate, cfg)


def estimate(trained: TrainedModel, audio: AudioBuffer) -> Preset:
    """Argmax class per parameter; fixed parameters filled from the space."""
    bundle = extract_bundle(audio, trained.cfg.features)
    arrays = bundle_to_arrays(bundle)
    batch = {m: trained.normalizer.transform(m, x[None]) for m, x in arrays.items()}
    logits = trained.model.forward(batch)
    space = trained.space
    idx = np.zeros(len(space), dtype=np.int64)
    for i, d in enumerate(space.descriptors):
        if d.kind == "fixed":
            idx[i] = d.fixed_value
        else:
            idx[i] = int(np.argmax(logits[d.name][0]))
    return Preset(space, idx)
