import json
import os
from collections import Counter

import numpy as np
import pytest

from synthmatch.config import DatasetConfig
from synthmatch.dataset import (
    CATALOGS,
    DatasetError,
    augment_preset,
    build_dataset,
    load_manifest,
    sample_random_preset,
    sample_seed,
    verify_dataset,
)
from synthmatch.synth import (
    MidiNote,
    ParameterDescriptor,
    ParameterSpace,
    get_space,
    preset_from_values,
    read_preset,
)

SR = 16000
NOTE = MidiNote(sustain_beats=1.0, total_beats=2.0)


class TestSampling:
    def test_fixed_descriptors_held(self, toy_space):
        rng = np.random.default_rng(0)
        for _ in range(50):
            p = sample_random_preset(toy_space, rng)
            assert p.get("algorithm") == toy_space.descriptor("algorithm").fixed_value
            assert p.get("output") == toy_space.classes - 1

    def test_draws_rarely_collide(self, toy_space):
        rng = np.random.default_rng(1)
        seen = {tuple(sample_random_preset(toy_space, rng).class_indices)
                for _ in range(100)}
        assert len(seen) == 100

    def test_bounds_hold(self, toy_space):
        rng = np.random.default_rng(2)
        for _ in range(1000):
            p = sample_random_preset(toy_space, rng)
            for d, idx in zip(toy_space.descriptors, p.class_indices):
                assert 0 <= idx < d.class_count


class TestAugment:
    def test_empty_free_set_is_identity(self, toy_space, pair_preset):
        rng = np.random.default_rng(3)
        out = augment_preset(pair_preset, (), rng)
        assert np.array_equal(out.class_indices, pair_preset.class_indices)

    def test_single_free_param(self, toy_space, pair_preset):
        rng = np.random.default_rng(4)
        out = augment_preset(pair_preset, ("op1_level",), rng)
        diff = out.class_indices != pair_preset.class_indices
        assert diff.sum() <= 1

    def test_theme_inherited_and_valid(self, toy_space):
        rng = np.random.default_rng(5)
        base = preset_from_values(toy_space, {"op1_level": 0.5}, theme="organ")
        group = tuple(d.name for d in toy_space.non_fixed if d.group == "op2")
        for _ in range(100):
            out = augment_preset(base, group, rng)
            assert out.theme == "organ"
            out.validate()

    def test_fixed_param_rejected(self, toy_space, pair_preset):
        rng = np.random.default_rng(6)
        with pytest.raises(DatasetError):
            augment_preset(pair_preset, ("algorithm",), rng)


class TestSeedCatalog:
    def test_all_catalog_entries_valid_and_audible(self):
        from synthmatch.synth import is_audible, render

        for space_id, catalog in CATALOGS.items():
            space = get_space(space_id)
            for template in catalog:
                preset = preset_from_values(space, template.values, theme=template.name)
                audio = render(preset, NOTE, SR)
                assert is_audible(audio, 0.01), (space_id, template.name)

    def test_jitter_stays_in_bounds(self, toy_space):
        rng = np.random.default_rng(7)
        template = CATALOGS["fm2-toy"][0]
        for _ in range(50):
            sample_seed(template, toy_space, rng, jitter=5).validate()

    def test_jitter_keeps_categoricals(self, toy_space):
        rng = np.random.default_rng(8)
        template = CATALOGS["fm2-toy"][3]
        base = preset_from_values(toy_space, template.values)
        for _ in range(20):
            seed = sample_seed(template, toy_space, rng, jitter=3)
            assert seed.get("op1_ratio_coarse") == base.get("op1_ratio_coarse")
            assert seed.get("op2_ratio_coarse") == base.get("op2_ratio_coarse")


@pytest.fixture(scope="module")
def built(tmp_path_factory):
    out = tmp_path_factory.mktemp("toyds")
    cfg = DatasetConfig(n_seed=16, n_augmented=24, n_random=8)
    manifest = build_dataset(cfg, "fm2-toy", NOTE, SR, out, seed=13)
    return out, manifest


class TestBuildDataset:

    def test_counts(self, built):
        _, manifest = built
        sources = Counter(r.source for r in manifest.records)
        assert sources == {"seed": 16, "augmented": 24, "random": 8}
        assert len(manifest.records) == 48

    def test_split_sizes_match_fractions(self, built):
        _, manifest = built
        splits = Counter(r.split for r in manifest.records)
        assert splits["train"] + splits["val"] + splits["test"] == 48
        assert splits["train"] >= 36  # ~80%

    def test_random_never_in_test(self, built):
        _, manifest = built
        assert not [r for r in manifest.records if r.source == "random" and r.split == "test"]

    def test_files_exist_and_verify_clean(self, built):
        out, _ = built
        assert verify_dataset(out) == []

    def test_theme_disjointness(self, built):
        _, manifest = built
        themes = {s: {r.theme for r in manifest.records if r.theme and r.split == s}
                  for s in ("train", "val", "test")}
        assert not (themes["train"] | themes["val"]) & themes["test"]
        assert not themes["train"] & themes["val"]

    def test_audibility_recorded_and_true(self, built):
        out, manifest = built
        from synthmatch import wavio
        from synthmatch.synth import AudioBuffer, is_audible

        for rec in manifest.records[:10]:
            samples, sr = wavio.read_wav(os.path.join(out, rec.audio_path))
            assert is_audible(AudioBuffer(samples, sr), manifest.config["audible_rms"])

    def test_seeds_only_config(self, tmp_path):
        cfg = DatasetConfig(n_seed=8, n_augmented=0, n_random=0)
        manifest = build_dataset(cfg, "fm2-toy", NOTE, SR, tmp_path / "seeds", seed=1)
        assert all(r.source == "seed" for r in manifest.records)

    def test_default_config_builds_320_records(self, tmp_path):
        manifest = build_dataset(DatasetConfig(), "fm2-toy", NOTE, SR,
                                 tmp_path / "default", seed=17)
        assert len(manifest.records) == 320
        assert verify_dataset(tmp_path / "default") == []

    def test_reproducible_byte_identical(self, tmp_path):
        cfg = DatasetConfig(n_seed=6, n_augmented=8, n_random=2)
        build_dataset(cfg, "fm2-toy", NOTE, SR, tmp_path / "a", seed=5)
        build_dataset(cfg, "fm2-toy", NOTE, SR, tmp_path / "b", seed=5)
        for name in ("manifest.jsonl", "dataset.json"):
            with open(tmp_path / "a" / name, "rb") as fa, open(tmp_path / "b" / name, "rb") as fb:
                assert fa.read() == fb.read()
        man = load_manifest(tmp_path / "a")
        for rec in man.records:
            for rel in (rec.preset_path, rec.audio_path):
                with open(tmp_path / "a" / rel, "rb") as fa, open(tmp_path / "b" / rel, "rb") as fb:
                    assert fa.read() == fb.read(), rel

    def test_silent_space_exhausts_retries(self, tmp_path):
        # a space whose levels are pinned to zero can never pass the filter
        toy = get_space("fm2-toy")
        descs = []
        for d in toy.descriptors:
            if d.name.endswith("_level"):
                descs.append(ParameterDescriptor(d.name, "fixed", d.class_count, d.group, 0))
            else:
                descs.append(d)
        silent = ParameterSpace("fm2-toy", toy.algorithm_id, 2, tuple(descs))
        import synthmatch.dataset as ds_mod

        cfg = DatasetConfig(n_seed=0, n_augmented=0, n_random=4, retry_cap=5)
        orig = ds_mod.get_space
        ds_mod.get_space = lambda sid: silent
        try:
            with pytest.raises(DatasetError, match="retry cap"):
                build_dataset(cfg, "fm2-toy", NOTE, SR, tmp_path / "s", seed=1)
        finally:
            ds_mod.get_space = orig

    def test_weights_written_for_selected_splits(self, tmp_path):
        cfg = DatasetConfig(n_seed=4, n_augmented=4, n_random=2,
                            compute_weights=True, weight_splits=("train",))
        manifest = build_dataset(cfg, "fm2-toy", NOTE, SR, tmp_path / "w", seed=2)
        for rec in manifest.records:
            if rec.split == "train":
                assert rec.weights_path
                with open(tmp_path / "w" / rec.weights_path) as fh:
                    doc = json.load(fh)
                assert all(v >= 0 for v in doc.values())
            else:
                assert rec.weights_path is None

    def test_bad_split_fractions(self, tmp_path):
        cfg = DatasetConfig(split=(0.5, 0.2, 0.2))
        with pytest.raises(DatasetError, match="split fractions"):
            build_dataset(cfg, "fm2-toy", NOTE, SR, tmp_path / "x", seed=0)

    def test_verify_flags_missing_file(self, tmp_path):
        cfg = DatasetConfig(n_seed=4, n_augmented=0, n_random=0)
        manifest = build_dataset(cfg, "fm2-toy", NOTE, SR, tmp_path / "v", seed=3)
        os.remove(tmp_path / "v" / manifest.records[0].audio_path)
        issues = verify_dataset(tmp_path / "v")
        assert any("missing file" in i for i in issues)

    def test_verify_flags_theme_leak(self, tmp_path):
        cfg = DatasetConfig(n_seed=12, n_augmented=0, n_random=0)
        build_dataset(cfg, "fm2-toy", NOTE, SR, tmp_path / "leak", seed=4)
        lines = (tmp_path / "leak" / "manifest.jsonl").read_text().splitlines()
        docs = [json.loads(l) for l in lines]
        train_theme = next(d["theme"] for d in docs if d["split"] == "train")
        for d in docs:
            if d["split"] == "test":
                d["theme"] = train_theme
        (tmp_path / "leak" / "manifest.jsonl").write_text(
            "\n".join(json.dumps(d, sort_keys=True) for d in docs) + "\n"
        )
        issues = verify_dataset(tmp_path / "leak")
        assert any("leak" in i for i in issues)


class TestSixOperatorBuild:
    def test_full_space_dataset(self, tmp_path):
        cfg = DatasetConfig(n_seed=4, n_augmented=4, n_random=2)
        manifest = build_dataset(cfg, "fm6-pairs", NOTE, SR, tmp_path / "six", seed=9)
        assert len(manifest.records) == 10
        assert verify_dataset(tmp_path / "six") == []
        preset = read_preset(
            os.path.join(tmp_path / "six", manifest.records[0].preset_path),
            get_space("fm6-pairs"),
        )
        assert preset.space.num_operators == 6
