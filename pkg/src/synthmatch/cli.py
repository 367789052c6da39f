"""Command-line entry point wiring all modules together.

Exit codes: 0 success, 1 user error (bad input/config/file), 2 internal
error.  Machine-readable outputs are JSON and carry the hash of the
resolved configuration; rendered WAV files get a small JSON sidecar with
the same hash.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import traceback

import numpy as np

from . import baselines, dsp, estimator, wavio
from .config import (
    ConfigError,
    GlobalConfig,
    MfccdConfig,
    config_hash,
    load_global_config,
)
from .dataset import DatasetError, build_dataset, load_manifest, verify_dataset
from .pdc import dilated_locations, prime_ratio
from .synth import (
    AudioBuffer,
    SpaceError,
    get_space,
    read_preset,
    render,
    write_preset,
)

OUT_DIR_ENV = "SYNTHMATCH_OUT_DIR"


class UserError(Exception):
    pass


def _emit(doc: dict) -> None:
    print(json.dumps(doc, sort_keys=True))


def _resolve_out(path: str) -> str:
    """Env override applies to relative output paths only."""
    base = os.environ.get(OUT_DIR_ENV)
    if base and not os.path.isabs(path):
        os.makedirs(base, exist_ok=True)
        return os.path.join(base, path)
    return path


def _load_config(path: str | None, seed: int | None) -> GlobalConfig:
    if path is None:
        cfg = GlobalConfig()
    else:
        if not os.path.exists(path):
            raise UserError(f"config file not found: {path}")
        try:
            cfg = load_global_config(path)
        except ConfigError as exc:
            raise UserError(str(exc))
    if seed is not None:
        import dataclasses

        cfg = dataclasses.replace(cfg, seed=seed)
    return cfg


def _read_audio(path: str) -> AudioBuffer:
    if not os.path.exists(path):
        raise UserError(f"audio file not found: {path}")
    samples, sr = wavio.read_wav(path)
    return AudioBuffer(samples, sr)


def _read_preset_file(path: str):
    if not os.path.exists(path):
        raise UserError(f"preset file not found: {path}")
    return read_preset(path)


# ---------------------------------------------------------------------------
# Commands


def cmd_render(args) -> int:
    cfg = _load_config(args.config, args.seed)
    chash = config_hash(cfg)
    preset = _read_preset_file(args.preset)
    audio = render(preset, cfg.note, cfg.sample_rate)
    out = _resolve_out(args.out)
    wavio.write_wav(out, audio.samples, audio.sample_rate)
    with open(out + ".json", "w", encoding="utf-8") as fh:
        json.dump({"config_hash": chash, "samples": len(audio),
                   "sample_rate": audio.sample_rate}, fh, sort_keys=True)
        fh.write("\n")
    _emit({"out": out, "samples": len(audio), "sample_rate": audio.sample_rate,
           "config_hash": chash})
    return 0


def cmd_features(args) -> int:
    cfg = _load_config(args.config, args.seed)
    chash = config_hash(cfg)
    audio = _read_audio(args.audio)
    bundle = estimator.extract_bundle(audio, cfg.features)
    arrays = estimator.bundle_to_arrays(bundle)
    from . import arrayio

    out = _resolve_out(args.out)
    arrayio.save_arrays(out, arrays)
    sidecar = {
        "config_hash": chash,
        "features": {k: list(v.shape) for k, v in arrays.items()},
        "feature_config": json.loads(json.dumps(cfg.features.__dict__)),
        "sample_rate": audio.sample_rate,
    }
    with open(out + ".json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _emit({"out": out, "config_hash": chash,
           "shapes": {k: list(v.shape) for k, v in arrays.items()}})
    return 0


def cmd_dataset_gen(args) -> int:
    cfg = _load_config(args.config, args.seed)
    chash = config_hash(cfg)
    out = _resolve_out(args.out)
    manifest = build_dataset(
        cfg.dataset, cfg.space, cfg.note, cfg.sample_rate, out, cfg.seed,
        mfccd_cfg=cfg.mfccd, extra_config={"config_hash": chash},
    )
    _emit({"out": out, "records": len(manifest.records), "config_hash": chash})
    return 0


def cmd_dataset_verify(args) -> int:
    issues = verify_dataset(args.dir)
    manifest = None
    try:
        manifest = load_manifest(args.dir)
    except Exception:
        pass
    _emit({
        "dir": args.dir,
        "ok": not issues,
        "issues": issues,
        "records": len(manifest.records) if manifest else 0,
    })
    return 0 if not issues else 1


def cmd_train(args) -> int:
    cfg = _load_config(args.config, args.seed)
    chash = config_hash(cfg)
    out = _resolve_out(args.out)
    if not os.path.isdir(args.dataset):
        raise UserError(f"dataset directory not found: {args.dataset}")
    result = estimator.train_model(args.dataset, cfg, out, cfg.seed)
    last = result["history"][-1] if result["history"] else {}
    _emit({"out": out, "epochs": len(result["history"]),
           "final": last, "config_hash": chash})
    return 0


def cmd_match(args) -> int:
    if not os.path.isdir(args.model):
        raise UserError(f"model directory not found: {args.model}")
    trained = estimator.load_model(args.model)
    audio = _read_audio(args.audio)
    preset = estimator.estimate(trained, audio)
    chash = config_hash(trained.cfg)
    out = _resolve_out(args.out)
    write_preset(out, preset, config_hash=chash)
    _emit({"out": out, "space": preset.space.space_id, "config_hash": chash})
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args.config, args.seed)
    chash = config_hash(cfg)
    preset = _read_preset_file(args.pred)
    target = _read_audio(args.target)
    rendered = render(preset, cfg.note, target.sample_rate)
    # compare at WAV precision so a self-render round trip scores exactly 0
    samples = rendered.samples.astype(np.float32).astype(np.float64)
    value = dsp.mfccd(samples, rendered.sample_rate,
                      target.samples, target.sample_rate, **cfg.mfccd.kwargs())
    _emit({"mfccd": value, "bands": cfg.mfccd.coeffs, "config_hash": chash})
    return 0


def cmd_baseline(args) -> int:
    cfg = _load_config(args.config, args.seed)
    chash = config_hash(cfg)
    try:
        space = get_space(args.space)
    except SpaceError as exc:
        raise UserError(str(exc))
    target = _read_audio(args.target)
    budget = baselines.SearchBudget(args.budget, seed=args.seed or 0)
    if args.method == "hillclimb":
        best, trace = baselines.hill_climb(
            target, space, cfg.note, budget, mfccd_cfg=cfg.mfccd
        )
    else:
        best, trace = baselines.genetic_search(
            target, space, cfg.note, budget, mfccd_cfg=cfg.mfccd
        )
    out = _resolve_out(args.out)
    write_preset(out, best, config_hash=chash)
    if args.trace:
        trace.to_csv(_resolve_out(args.trace))
    _emit({
        "out": out,
        "evaluations": len(trace.entries),
        "best_mfccd": trace.entries[-1].best_mfccd if trace.entries else None,
        "config_hash": chash,
    })
    return 0


def cmd_pdc_locations(args) -> int:
    locs = dilated_locations(args.B, args.l, symmetric=args.symmetric)
    doc = {
        "bins_per_octave": locs.bins_per_octave,
        "num_primes": locs.num_primes,
        "symmetric": locs.symmetric,
        "locations": list(locs.locations),
        "table": [
            {
                "prime": p,
                "ratio": str(prime_ratio(p)),
                "exact_distance": args.B * float(np.log2(float(prime_ratio(p)))),
                "location": k,
            }
            for p, k in locs.prime_locations
        ],
    }
    _emit(doc)
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="synthmatch",
        description="FM synthesizer parameter estimation workbench",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="global config JSON file")
        p.add_argument("--seed", type=int, help="override the config seed")

    p = sub.add_parser("render", help="render a preset JSON to WAV")
    common(p)
    p.add_argument("--preset", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("features", help="extract the multi-modal feature bundle")
    common(p)
    p.add_argument("--audio", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_features)

    pd = sub.add_parser("dataset", help="dataset generation and verification")
    dsub = pd.add_subparsers(dest="dataset_command", required=True)
    p = dsub.add_parser("gen", help="generate a dataset directory")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dataset_gen)
    p = dsub.add_parser("verify", help="check all manifest invariants")
    p.add_argument("dir")
    p.set_defaults(func=cmd_dataset_verify)

    p = sub.add_parser("train", help="train the estimator on a dataset")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("match", help="estimate the preset for an audio file")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--audio", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("eval", help="MFCC distance between a preset render and a target")
    common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--target", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("baseline", help="classical search baselines")
    p.add_argument("method", choices=["hillclimb", "ga"])
    common(p)
    p.add_argument("--target", required=True)
    p.add_argument("--space", required=True)
    p.add_argument("--budget", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--trace")
    p.set_defaults(func=cmd_baseline)

    pp = sub.add_parser("pdc", help="prime-dilated convolution utilities")
    psub = pp.add_subparsers(dest="pdc_command", required=True)
    p = psub.add_parser("locations", help="print the dilated location table as JSON")
    p.add_argument("--B", type=int, default=12, help="bins per octave")
    p.add_argument("--l", type=int, default=4, help="number of primes")
    p.add_argument("--symmetric", action="store_true")
    p.set_defaults(func=cmd_pdc_locations)

    return parser


_USER_ERRORS = (UserError, ConfigError, SpaceError, DatasetError, FileNotFoundError)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        print("internal error:", file=sys.stderr)
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
