"""Dataset generation: seeds, augmentations, random presets, manifests.

Three record sources mirror a realistic preset corpus at desk scale:

* seed: drawn from a committed catalog of hand-designed presets grouped
  into themes (a stand-in for presets collected in the wild), with small
  per-parameter jitter so one theme yields many nearby seeds;
* augmented: a seed with one operator's whole parameter group resampled
  uniformly (rotating through operators), inheriting the seed's theme;
* random: uniform over the whole space, no theme.

Themes are partitioned across train/val/test *before* any augmentation so
no theme ever spans two splits; random records never enter the test
split.  Every record must clear an RMS audibility threshold, with a
bounded number of resampling retries.  Generation is deterministic for a
fixed config and seed.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import wavio
from .config import DatasetConfig, MfccdConfig
from .estimator import gradient_weights
from .synth import (
    AudioBuffer,
    MidiNote,
    ParameterSpace,
    Preset,
    get_space,
    is_audible,
    preset_from_values,
    read_preset,
    render,
    write_preset,
)

SPLITS = ("train", "val", "test")


class DatasetError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Seed catalog


@dataclass(frozen=True)
class ThemeTemplate:
    """A hand-designed base preset; seeds are small jitters around it."""

    name: str
    values: dict[str, float]  # continuous in [0,1], categoricals as class ids


def _toy_theme(name, r1, l1, a1, d1, s1, r2, l2, a2, d2, s2):
    return ThemeTemplate(name, {
        "op1_ratio_coarse": r1, "op1_level": l1, "op1_attack": a1,
        "op1_decay": d1, "op1_sustain": s1,
        "op2_ratio_coarse": r2, "op2_level": l2, "op2_attack": a2,
        "op2_decay": d2, "op2_sustain": s2,
    })


_TOY_THEMES = (
    _toy_theme("pure", 1, 0.90, 0.02, 0.10, 0.85, 1, 0.00, 0.00, 0.00, 1.00),
    _toy_theme("organ", 1, 0.80, 0.06, 0.10, 0.90, 2, 0.30, 0.06, 0.20, 0.80),
    _toy_theme("brightorgan", 1, 0.75, 0.05, 0.15, 0.85, 3, 0.55, 0.05, 0.25, 0.70),
    _toy_theme("bell", 1, 0.85, 0.00, 0.70, 0.25, 14, 0.60, 0.00, 0.50, 0.10),
    _toy_theme("pluck", 2, 0.85, 0.00, 0.30, 0.15, 5, 0.50, 0.00, 0.25, 0.10),
    _toy_theme("brass", 1, 0.80, 0.20, 0.20, 0.80, 1, 0.70, 0.25, 0.20, 0.75),
    _toy_theme("reed", 2, 0.70, 0.10, 0.10, 0.85, 2, 0.55, 0.10, 0.15, 0.80),
    _toy_theme("sub", 0, 0.90, 0.03, 0.10, 0.95, 1, 0.20, 0.05, 0.10, 0.90),
    _toy_theme("growl", 1, 0.85, 0.05, 0.15, 0.80, 0, 0.80, 0.05, 0.20, 0.85),
    _toy_theme("glass", 3, 0.75, 0.02, 0.45, 0.40, 11, 0.35, 0.00, 0.35, 0.30),
    _toy_theme("metal", 2, 0.80, 0.00, 0.50, 0.30, 19, 0.50, 0.00, 0.40, 0.25),
    _toy_theme("buzz", 1, 0.85, 0.02, 0.10, 0.90, 1, 0.95, 0.02, 0.10, 0.90),
    _toy_theme("pad", 1, 0.70, 0.50, 0.30, 0.90, 2, 0.35, 0.55, 0.30, 0.85),
    _toy_theme("keys", 1, 0.85, 0.01, 0.40, 0.55, 4, 0.45, 0.01, 0.30, 0.40),
    _toy_theme("noisy", 2, 0.80, 0.03, 0.20, 0.80, 29, 0.90, 0.03, 0.25, 0.75),
    _toy_theme("horn", 1, 0.75, 0.15, 0.15, 0.85, 1, 0.45, 0.18, 0.15, 0.80),
    _toy_theme("chime", 4, 0.80, 0.00, 0.55, 0.35, 7, 0.40, 0.00, 0.45, 0.20),
)


def _pair_theme(name, values):
    base = {
        "op1_ratio_coarse": 1, "op1_ratio_fine": 0.0, "op1_detune": 0.5,
        "op1_level": 0.8, "op1_attack": 0.02, "op1_decay": 0.2,
        "op1_sustain": 0.8, "op1_release": 0.3,
        "op2_ratio_coarse": 1, "op2_ratio_fine": 0.0, "op2_detune": 0.5,
        "op2_level": 0.4, "op2_attack": 0.02, "op2_decay": 0.2,
        "op2_sustain": 0.8, "op2_release": 0.3,
        "feedback": 0.0,
    }
    base.update(values)
    return ThemeTemplate(name, base)


_FM2_THEMES = (
    _pair_theme("epiano", {"op2_ratio_coarse": 14, "op2_level": 0.35, "op2_sustain": 0.2}),
    _pair_theme("wood", {"op2_ratio_coarse": 3, "op2_level": 0.5, "feedback": 0.2}),
    _pair_theme("square", {"op2_ratio_coarse": 2, "op2_level": 0.75, "feedback": 0.4}),
    _pair_theme("hollow", {"op2_ratio_coarse": 5, "op2_level": 0.45}),
)


def _six_theme(name, algorithm, overrides):
    base = {}
    for op in range(1, 7):
        base.update({
            f"op{op}_ratio_coarse": 1, f"op{op}_ratio_fine": 0.0,
            f"op{op}_detune": 0.5, f"op{op}_level": 0.0,
            f"op{op}_attack": 0.02, f"op{op}_decay": 0.2,
            f"op{op}_sustain": 0.8, f"op{op}_release": 0.3,
        })
    base["feedback"] = 0.0
    base.update(overrides)
    return ThemeTemplate(name, base)


_FM6_PAIRS_THEMES = (
    _six_theme("tines", 3, {"op1_level": 0.8, "op2_level": 0.4, "op2_ratio_coarse": 14,
                            "op3_level": 0.5, "op4_level": 0.3,
                            "op5_level": 0.4, "op6_level": 0.2, "op6_ratio_coarse": 2}),
    _six_theme("fullorgan", 3, {"op1_level": 0.7, "op2_level": 0.3, "op2_ratio_coarse": 2,
                                "op3_level": 0.6, "op3_ratio_coarse": 2, "op4_level": 0.25,
                                "op5_level": 0.5, "op5_ratio_coarse": 4, "op6_level": 0.2}),
    _six_theme("bellchoir", 3, {"op1_level": 0.75, "op2_level": 0.55, "op2_ratio_coarse": 11,
                                "op3_level": 0.55, "op4_level": 0.45, "op4_ratio_coarse": 7,
                                "op5_level": 0.35, "op6_level": 0.3, "op6_ratio_coarse": 5,
                                "op1_decay": 0.6, "op1_sustain": 0.3}),
    _six_theme("softpad", 3, {"op1_level": 0.6, "op2_level": 0.2,
                              "op3_level": 0.55, "op4_level": 0.15,
                              "op5_level": 0.45, "op5_ratio_coarse": 2, "op6_level": 0.1,
                              "op1_attack": 0.4, "op3_attack": 0.5, "op5_attack": 0.6}),
)

_FM6_STACK_THEMES = (
    _six_theme("lead", 2, {"op1_level": 0.85, "op2_level": 0.5,
                           "op3_level": 0.3, "op4_level": 0.2}),
    _six_theme("growlbass", 2, {"op1_level": 0.9, "op1_ratio_coarse": 0,
                                "op2_level": 0.6, "op3_level": 0.4, "feedback": 0.3}),
)

_FM6_ADDITIVE_THEMES = (
    _six_theme("drawbars", 1, {"op1_level": 0.5, "op2_level": 0.35, "op2_ratio_coarse": 2,
                               "op3_level": 0.25, "op3_ratio_coarse": 3,
                               "op4_level": 0.2, "op4_ratio_coarse": 4,
                               "op5_level": 0.15, "op5_ratio_coarse": 6,
                               "op6_level": 0.1, "op6_ratio_coarse": 8}),
    _six_theme("detuned", 1, {"op1_level": 0.45, "op2_level": 0.45, "op2_detune": 0.8,
                              "op3_level": 0.3, "op3_detune": 0.2}),
)

CATALOGS: dict[str, tuple[ThemeTemplate, ...]] = {
    "fm2-toy": _TOY_THEMES,
    "fm2": _FM2_THEMES,
    "fm6-pairs": _FM6_PAIRS_THEMES,
    "fm6-stack": _FM6_STACK_THEMES,
    "fm6-additive": _FM6_ADDITIVE_THEMES,
}


# ---------------------------------------------------------------------------
# Sampling operations


def sample_random_preset(space: ParameterSpace, rng: np.random.Generator) -> Preset:
    """Uniform class index per non-fixed descriptor."""
    idx = np.zeros(len(space), dtype=np.int64)
    for i, d in enumerate(space.descriptors):
        idx[i] = d.fixed_value if d.kind == "fixed" else rng.integers(d.class_count)
    return Preset(space, idx)


def augment_preset(preset: Preset, free_params: tuple[str, ...],
                   rng: np.random.Generator) -> Preset:
    """Resample only the named parameters uniformly; theme is inherited."""
    updates = {}
    for name in free_params:
        d = preset.space.descriptor(name)
        if d.kind == "fixed":
            raise DatasetError(f"cannot augment fixed parameter {name!r}")
        updates[name] = int(rng.integers(d.class_count))
    return preset.with_classes(updates)


def sample_seed(template: ThemeTemplate, space: ParameterSpace,
                rng: np.random.Generator, jitter: int) -> Preset:
    """Jitter the template's continuous parameters by up to +-jitter classes."""
    base = preset_from_values(space, template.values, theme=template.name)
    if jitter <= 0:
        return base
    updates = {}
    for d in space.descriptors:
        if d.kind != "continuous":
            continue
        idx = base.get(d.name) + int(rng.integers(-jitter, jitter + 1))
        updates[d.name] = int(np.clip(idx, 0, d.class_count - 1))
    return base.with_classes(updates)


# ---------------------------------------------------------------------------
# Manifest


@dataclass
class ManifestRecord:
    id: str
    preset_path: str
    audio_path: str
    theme: str | None
    split: str
    source: str  # "seed" | "augmented" | "random"
    weights_path: str | None = None


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    config: dict

    @property
    def space_id(self) -> str:
        return self.config["space"]

    def by_split(self, split: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == split]


def _largest_remainder(total: int, fractions) -> list[int]:
    """Integer allocation of ``total`` by fractions; remainders win in order
    of size, ties broken by position."""
    raw = [total * f for f in fractions]
    counts = [int(x) for x in raw]
    rem = total - sum(counts)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in range(rem):
        counts[order[i]] += 1
    return counts


def _partition_themes(themes, fractions, rng,
                      required=(False, False, False)) -> dict[str, list[ThemeTemplate]]:
    pool = list(themes)
    perm = rng.permutation(len(pool))
    pool = [pool[i] for i in perm]
    counts = _largest_remainder(len(pool), fractions)
    # every split that will hold seeds needs at least one theme
    for i, must in enumerate(required):
        if must and counts[i] == 0:
            donor = max(range(len(counts)), key=lambda j: counts[j])
            if counts[donor] <= (1 if required[donor] else 0):
                raise DatasetError(
                    f"catalog too small to give every split a theme: {counts}"
                )
            counts[donor] -= 1
            counts[i] += 1
    out = {}
    start = 0
    for split, c in zip(SPLITS, counts):
        out[split] = pool[start : start + c]
        start += c
    return out


def _operator_groups(space: ParameterSpace) -> list[tuple[str, ...]]:
    groups = []
    for op in range(1, space.num_operators + 1):
        names = tuple(d.name for d in space.non_fixed if d.group == f"op{op}")
        if names:
            groups.append(names)
    return groups


def build_dataset(
    cfg: DatasetConfig,
    space_id: str,
    note: MidiNote,
    sample_rate: int,
    out_dir,
    seed: int,
    catalog: tuple[ThemeTemplate, ...] | None = None,
    mfccd_cfg: MfccdConfig = MfccdConfig(),
    extra_config: dict | None = None,
) -> DatasetManifest:
    """Generate presets/audio/weights and write the manifest tree."""
    space = get_space(space_id)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDA7A]))
    total = cfg.n_seed + cfg.n_augmented + cfg.n_random
    if total < 1:
        raise DatasetError("dataset would be empty")
    if abs(sum(cfg.split) - 1.0) > 1e-9 or any(f < 0 for f in cfg.split):
        raise DatasetError(f"split fractions must be non-negative and sum to 1: {cfg.split}")

    quotas = _largest_remainder(total, cfg.split)
    seed_counts = _largest_remainder(cfg.n_seed, cfg.split)
    trainval = cfg.split[0] + cfg.split[1]
    if cfg.n_random and trainval <= 0:
        raise DatasetError("random records need a train or val fraction")
    rand_counts = _largest_remainder(
        cfg.n_random, (cfg.split[0] / trainval, cfg.split[1] / trainval) if trainval else (0, 0)
    ) + [0]
    # random stays out of test; cap train/val at what their quotas leave room
    # for (seeds already placed) and spill the overflow to the other split
    for i, j in ((0, 1), (1, 0)):
        room = quotas[i] - seed_counts[i]
        if rand_counts[i] > room:
            rand_counts[j] += rand_counts[i] - room
            rand_counts[i] = room

    def recompute_augs():
        return [q - s - r for q, s, r in zip(quotas, seed_counts, rand_counts)]

    aug_counts = recompute_augs()
    # every split that carries augmentations needs at least one seed to
    # augment; borrow one from the split with the most (its quota slot
    # flips from an augmentation to a seed, keeping all totals intact)
    for _ in range(len(SPLITS)):
        needy = [i for i in range(len(SPLITS))
                 if aug_counts[i] > 0 and seed_counts[i] == 0]
        if not needy:
            break
        for i in needy:
            donor = max(range(len(SPLITS)), key=lambda j: seed_counts[j])
            if seed_counts[donor] < 1 or donor == i:
                raise DatasetError(
                    f"split quotas {quotas} require augmentations in a split "
                    f"with no seeds; increase n_seed or adjust fractions"
                )
            seed_counts[donor] -= 1
            seed_counts[i] += 1
            aug_counts = recompute_augs()
    if any(a < 0 for a in aug_counts) or any(s < 0 for s in seed_counts):
        raise DatasetError(
            f"source counts {cfg.n_seed}/{cfg.n_augmented}/{cfg.n_random} cannot fill "
            f"split quotas {quotas}; adjust counts or fractions"
        )

    if cfg.n_seed or cfg.n_augmented:
        if catalog is None:
            catalog = CATALOGS.get(space_id)
        if not catalog:
            raise DatasetError(f"no theme catalog for space {space_id!r}")
        needed = sum(1 for c in seed_counts if c > 0)
        if len(catalog) < needed:
            raise DatasetError(f"catalog has {len(catalog)} themes, need >= {needed}")
        themes = _partition_themes(
            catalog, cfg.split, rng, required=tuple(c > 0 for c in seed_counts)
        )
    else:
        themes = {s: [] for s in SPLITS}

    os.makedirs(out_dir, exist_ok=True)
    for sub in ("presets", "audio") + (("weights",) if cfg.compute_weights else ()):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)

    def keep_trying(make_preset) -> tuple[Preset, AudioBuffer]:
        for _ in range(cfg.retry_cap):
            preset = make_preset()
            audio = render(preset, note, sample_rate)
            if is_audible(audio, cfg.audible_rms):
                return preset, audio
        raise DatasetError(
            f"retry cap {cfg.retry_cap} exhausted: space {space_id!r} keeps "
            f"rendering below RMS {cfg.audible_rms}"
        )

    records: list[ManifestRecord] = []
    seeds_by_split: dict[str, list[Preset]] = {s: [] for s in SPLITS}
    groups = _operator_groups(space)

    def emit(preset: Preset, audio: AudioBuffer, split: str, source: str) -> None:
        rid = f"r{len(records):05d}"
        preset_path = f"presets/{rid}.json"
        audio_path = f"audio/{rid}.wav"
        write_preset(os.path.join(out_dir, preset_path), preset)
        wavio.write_wav(os.path.join(out_dir, audio_path), audio.samples, sample_rate)
        records.append(ManifestRecord(rid, preset_path, audio_path, preset.theme, split, source))

    for split, count in zip(SPLITS, seed_counts):
        pool = themes[split]
        if count > 0 and not pool:
            raise DatasetError(f"no themes allocated to split {split!r}")
        for i in range(count):
            template = pool[i % len(pool)]
            preset, audio = keep_trying(
                lambda t=template: sample_seed(t, space, rng, cfg.seed_jitter)
            )
            seeds_by_split[split].append(preset)
            emit(preset, audio, split, "seed")

    for split, count in zip(SPLITS, aug_counts):
        bases = seeds_by_split[split]
        if count > 0 and not bases:
            raise DatasetError(f"split {split!r} has augmentations but no seeds")
        for i in range(count):
            base = bases[i % len(bases)]
            free = groups[(i // len(bases)) % len(groups)] if groups else ()
            preset, audio = keep_trying(
                lambda b=base, f=free: augment_preset(b, f, rng)
            )
            emit(preset, audio, split, "augmented")

    for split, count in zip(SPLITS, rand_counts):
        for _ in range(count):
            preset, audio = keep_trying(lambda: sample_random_preset(space, rng))
            emit(preset, audio, split, "random")

    if cfg.compute_weights:
        for rec in records:
            if rec.split not in cfg.weight_splits:
                continue
            preset = read_preset(os.path.join(out_dir, rec.preset_path), space)
            weights = gradient_weights(preset, note, sample_rate, mfccd_cfg)
            rec.weights_path = f"weights/{rec.id}.json"
            with open(os.path.join(out_dir, rec.weights_path), "w", encoding="utf-8") as fh:
                json.dump(weights, fh, indent=2, sort_keys=True)
                fh.write("\n")

    snapshot = {
        "space": space_id,
        "note": {
            "pitch": note.pitch, "velocity": note.velocity,
            "sustain_beats": note.sustain_beats, "total_beats": note.total_beats,
            "tempo_bpm": note.tempo_bpm,
        },
        "sample_rate": sample_rate,
        "seed": seed,
        "audible_rms": cfg.audible_rms,
        "counts": {"seed": cfg.n_seed, "augmented": cfg.n_augmented, "random": cfg.n_random},
        "split": list(cfg.split),
        "mfccd": mfccd_cfg.kwargs(),
    }
    if extra_config:
        snapshot.update(extra_config)
    manifest = DatasetManifest(records, snapshot)
    _write_manifest(out_dir, manifest)
    return manifest


def _write_manifest(out_dir, manifest: DatasetManifest) -> None:
    with open(os.path.join(out_dir, "dataset.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest.config, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "manifest.jsonl"), "w", encoding="utf-8") as fh:
        for rec in manifest.records:
            fh.write(json.dumps({
                "id": rec.id,
                "preset_path": rec.preset_path,
                "audio_path": rec.audio_path,
                "theme": rec.theme,
                "split": rec.split,
                "source": rec.source,
                "weights_path": rec.weights_path,
            }, sort_keys=True))
            fh.write("\n")


def load_manifest(dataset_dir) -> DatasetManifest:
    cfg_path = os.path.join(dataset_dir, "dataset.json")
    man_path = os.path.join(dataset_dir, "manifest.jsonl")
    if not os.path.exists(man_path):
        raise DatasetError(f"{dataset_dir}: no manifest.jsonl")
    with open(cfg_path, "r", encoding="utf-8") as fh:
        config = json.load(fh)
    records = []
    with open(man_path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            doc = json.loads(line)
            records.append(ManifestRecord(**doc))
    return DatasetManifest(records, config)


def verify_dataset(dataset_dir) -> list[str]:
    """Run every manifest invariant; returns a list of problems (empty = ok)."""
    issues: list[str] = []
    try:
        manifest = load_manifest(dataset_dir)
    except (OSError, ValueError, DatasetError) as exc:
        return [f"cannot load manifest: {exc}"]
    space = get_space(manifest.space_id)
    threshold = manifest.config.get("audible_rms", 0.01)

    ids = [r.id for r in manifest.records]
    if len(set(ids)) != len(ids):
        issues.append("duplicate record ids")

    themes_by_split: dict[str, set] = {s: set() for s in SPLITS}
    for rec in manifest.records:
        if rec.split not in SPLITS:
            issues.append(f"{rec.id}: unknown split {rec.split!r}")
            continue
        if rec.theme is not None:
            themes_by_split[rec.split].add(rec.theme)
        for rel in (rec.preset_path, rec.audio_path, rec.weights_path):
            if rel and not os.path.exists(os.path.join(dataset_dir, rel)):
                issues.append(f"{rec.id}: missing file {rel}")
        try:
            read_preset(os.path.join(dataset_dir, rec.preset_path), space)
        except Exception as exc:
            issues.append(f"{rec.id}: bad preset ({exc})")
            continue
        try:
            samples, sr = wavio.read_wav(os.path.join(dataset_dir, rec.audio_path))
        except Exception as exc:
            issues.append(f"{rec.id}: bad audio ({exc})")
            continue
        if not is_audible(AudioBuffer(samples, sr), threshold):
            issues.append(f"{rec.id}: audio below audibility threshold {threshold}")
        if rec.weights_path:
            try:
                with open(os.path.join(dataset_dir, rec.weights_path), "r",
                          encoding="utf-8") as fh:
                    doc = json.load(fh)
                bad = [k for k in doc if k not in space.names]
                if bad:
                    issues.append(f"{rec.id}: weights name unknown params {bad}")
            except Exception as exc:
                issues.append(f"{rec.id}: bad weights ({exc})")

    trainval = themes_by_split["train"] | themes_by_split["val"]
    leaked = trainval & themes_by_split["test"]
    if leaked:
        issues.append(f"themes leak into test: {sorted(leaked)}")
    shared = themes_by_split["train"] & themes_by_split["val"]
    if shared:
        issues.append(f"themes shared between train and val: {sorted(shared)}")
    return issues
