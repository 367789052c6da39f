"""Runnable experiments: the toy end-to-end run and the ablation harness.

``run_toy_experiment`` generates a theme-disjoint 2-operator dataset,
trains the default model twice with the same seed (checking the reruns
are byte-identical), and compares the median MFCC distance of estimated
presets on the held-out test split against uniformly random presets.

``run_ablations`` trains the architectural/technique variants (dilated
filters off, label smoothing off, importance weighting off) on one shared
dataset and emits a method/score comparison table.
"""

from __future__ import annotations

import dataclasses
import filecmp
import json
import os

import numpy as np

from . import estimator, wavio
from .config import GlobalConfig, config_hash, toy_global_config
from .dataset import build_dataset, load_manifest, sample_random_preset, verify_dataset
from .dsp import mfccd
from .synth import AudioBuffer, get_space, read_preset, render


def _median_test_mfccd(dataset_dir, manifest, trained, cfg: GlobalConfig,
                       rng) -> dict:
    """Medians over the test split: model estimates vs uniform random presets."""
    space = get_space(manifest.space_id)
    kw = cfg.mfccd.kwargs()
    est_vals = []
    rand_vals = []
    for rec in manifest.by_split("test"):
        samples, sr = wavio.read_wav(os.path.join(dataset_dir, rec.audio_path))
        target = AudioBuffer(samples, sr)
        guess = estimator.estimate(trained, target)
        est_audio = render(guess, cfg.note, sr)
        est_vals.append(mfccd(est_audio.samples, sr, target.samples, sr, **kw))
        rand = sample_random_preset(space, rng)
        rand_audio = render(rand, cfg.note, sr)
        rand_vals.append(mfccd(rand_audio.samples, sr, target.samples, sr, **kw))
    return {
        "median_estimated": float(np.median(est_vals)),
        "median_random": float(np.median(rand_vals)),
        "estimated": est_vals,
        "random": rand_vals,
    }


def _dir_files_identical(a, b, names) -> bool:
    return all(filecmp.cmp(os.path.join(a, n), os.path.join(b, n), shallow=False)
               for n in names)


def run_toy_experiment(out_dir, seed: int = 0, cfg: GlobalConfig | None = None,
                       reuse_dataset: str | None = None) -> dict:
    """Full desk-scale experiment; returns the pass/fail criteria and numbers."""
    cfg = cfg or toy_global_config(seed)
    os.makedirs(out_dir, exist_ok=True)

    if reuse_dataset is None:
        ds_dir = os.path.join(out_dir, "dataset")
        build_dataset(
            cfg.dataset, cfg.space, cfg.note, cfg.sample_rate, ds_dir, cfg.seed,
            mfccd_cfg=cfg.mfccd, extra_config={"config_hash": config_hash(cfg)},
        )
    else:
        ds_dir = reuse_dataset
    manifest = load_manifest(ds_dir)
    dataset_issues = verify_dataset(ds_dir)

    run_a = estimator.train_model(ds_dir, cfg, os.path.join(out_dir, "model_a"), cfg.seed)
    run_b = estimator.train_model(ds_dir, cfg, os.path.join(out_dir, "model_b"), cfg.seed)
    identical = _dir_files_identical(
        os.path.join(out_dir, "model_a"), os.path.join(out_dir, "model_b"),
        ("params.bin", "moments.bin", "history.json", "state.json"),
    )

    history = run_a["history"]
    first_loss = history[0]["train_loss"]
    best_loss = min(h["train_loss"] for h in history)
    trained = estimator.load_model(os.path.join(out_dir, "model_a"))
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xE7A1]))
    medians = _median_test_mfccd(ds_dir, manifest, trained, cfg, rng)

    results = {
        "dataset": {
            "dir": ds_dir,
            "records": len(manifest.records),
            "train": len(manifest.by_split("train")),
            "val": len(manifest.by_split("val")),
            "test": len(manifest.by_split("test")),
            "issues": dataset_issues,
        },
        "history": history,
        "train_loss_first": first_loss,
        "train_loss_best": best_loss,
        "loss_drop_fraction": 1.0 - best_loss / first_loss,
        "median_test_mfccd": medians["median_estimated"],
        "median_random_mfccd": medians["median_random"],
        "mfccd_ratio": medians["median_estimated"] / medians["median_random"],
        "reruns_identical": identical,
        "criteria": {
            "loss_falls_50pct": best_loss <= 0.5 * first_loss,
            "beats_random_2x": medians["median_estimated"]
            <= 0.5 * medians["median_random"],
            "bit_identical_rerun": identical,
        },
    }
    with open(os.path.join(out_dir, "results.json"), "w", encoding="utf-8") as fh:
        json.dump(results, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return results


ABLATION_VARIANTS = ("full", "no-pdc", "no-label-smoothing", "no-weighting")


def _variant_config(cfg: GlobalConfig, variant: str) -> GlobalConfig:
    if variant == "full":
        return cfg
    if variant == "no-pdc":
        return dataclasses.replace(
            cfg, model=dataclasses.replace(cfg.model, pdc_enabled=False)
        )
    if variant == "no-label-smoothing":
        return dataclasses.replace(
            cfg, train=dataclasses.replace(cfg.train, label_sigma0=0.0)
        )
    if variant == "no-weighting":
        return dataclasses.replace(
            cfg, train=dataclasses.replace(cfg.train, use_weights=False)
        )
    raise ValueError(f"unknown ablation variant {variant!r}")


def run_ablations(out_dir, seed: int = 0, cfg: GlobalConfig | None = None,
                  variants=ABLATION_VARIANTS) -> list[dict]:
    """Train each variant on one shared dataset; write a comparison table.

    Results are recorded, not gated: the table mirrors the usual
    method/score format with the MFCC distance medians on the test split.
    """
    cfg = cfg or toy_global_config(seed)
    os.makedirs(out_dir, exist_ok=True)
    ds_dir = os.path.join(out_dir, "dataset")
    if not os.path.exists(os.path.join(ds_dir, "manifest.jsonl")):
        build_dataset(
            cfg.dataset, cfg.space, cfg.note, cfg.sample_rate, ds_dir, cfg.seed,
            mfccd_cfg=cfg.mfccd, extra_config={"config_hash": config_hash(cfg)},
        )
    manifest = load_manifest(ds_dir)

    rows = []
    for variant in variants:
        vcfg = _variant_config(cfg, variant)
        model_dir = os.path.join(out_dir, f"model_{variant}")
        run = estimator.train_model(ds_dir, vcfg, model_dir, vcfg.seed)
        trained = estimator.load_model(model_dir)
        rng = np.random.default_rng(np.random.SeedSequence([vcfg.seed, 0xAB1A]))
        medians = _median_test_mfccd(ds_dir, manifest, trained, vcfg, rng)
        rows.append({
            "method": variant,
            "mfccd": medians["median_estimated"],
            "epochs": len(run["history"]),
            "val_loss": run["history"][-1].get("val_loss"),
        })
    rows.append({
        "method": "random preset",
        "mfccd": medians["median_random"],
        "epochs": 0,
        "val_loss": None,
    })

    md = ["| Method | MFCCD |", "| --- | --- |"]
    for row in rows:
        md.append(f"| {row['method']} | {row['mfccd']:.4f} |")
    with open(os.path.join(out_dir, "ablations.md"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(md) + "\n")
    with open(os.path.join(out_dir, "ablations.json"), "w", encoding="utf-8") as fh:
        json.dump(rows, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "ablations.csv"), "w", encoding="utf-8") as fh:
        fh.write("method,mfccd\n")
        for row in rows:
            fh.write(f"{row['method']},{row['mfccd']!r}\n")
    return rows
