"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` to watch the lines as
they print.  The end-to-end experiment trains the default model twice on
a freshly generated 1024/128/128 dataset and takes most of the runtime
(bounded below at 30 minutes, typically ~15).
"""

import dataclasses
import math
import time
from fractions import Fraction

import numpy as np
import pytest

from synthmatch import dsp, estimator, pdc
from synthmatch.baselines import GaConfig, SearchBudget, genetic_search, hill_climb
from synthmatch.config import ablation_global_config, toy_global_config
from synthmatch.dataset import load_manifest, sample_random_preset, verify_dataset
from synthmatch.experiments import ABLATION_VARIANTS, run_ablations, run_toy_experiment
from synthmatch.model import EstimatorModel
from synthmatch.synth import (
    MidiNote,
    ParameterDescriptor,
    ParameterSpace,
    get_space,
    preset_from_values,
    render,
)

SR = 16000
SHORT_NOTE = MidiNote(sustain_beats=1.0, total_beats=2.0)


def report(name: str, ok: bool, detail: str = "") -> None:
    print(f"\nACCEPTANCE {name}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, f"{name} failed: {detail}"


class TestPdcAlgebraSuite:
    def test_pdc_algebra(self):
        start = time.perf_counter()

        exact = all(
            pdc.prime_ratio_decompose(n).reconstruct() == Fraction(n)
            for n in range(2, 1001)
        )

        identity_ok = True
        for B in (12, 24):
            for n in range(2, 1001):
                decomp = pdc.prime_ratio_decompose(n)
                total = sum(
                    a * B * math.log2(pdc.prime_ratio(p))
                    for p, a in decomp.exponents.items()
                )
                if abs(B * math.log2(n) - total) >= 1e-9:
                    identity_ok = False

        ratios_ok = all(
            Fraction(1) < pdc.prime_ratio(p) <= Fraction(2)
            for p in range(2, 1001)
            if pdc.is_prime(p)
        )

        locs = pdc.dilated_locations(12, 4)
        brute = {0}
        for p in pdc.first_primes(4):
            x = 12 * math.log2(pdc.prime_ratio(p))
            brute.add(min(range(13), key=lambda k: (abs(k - x), k)))
        locations_ok = locs.locations == tuple(sorted(brute)) == (0, 4, 7, 10, 12)

        elapsed = time.perf_counter() - start
        ok = exact and identity_ok and ratios_ok and locations_ok and elapsed < 5.0
        report(
            "pdc-algebra-suite", ok,
            f"reconstruction={exact} identity={identity_ok} ratios={ratios_ok} "
            f"locations={locs.locations} elapsed={elapsed:.2f}s (<5s)",
        )


class TestGradientSuite:
    def test_gradients(self):
        start = time.perf_counter()
        rng = np.random.default_rng(0)

        # dilated filter layer on a random 1x30x4 input, f64, h=1e-5
        locs = pdc.dilated_locations(12, 4)
        v = rng.standard_normal(len(locs.locations))
        x = rng.standard_normal((1, 30, 4))
        g = rng.standard_normal((1, 30, 4))
        filt = pdc.PdcFilter(locs, v)
        gx, gv = pdc.pdc_conv_backward(x, filt, g)
        h = 1e-5
        layer_worst = 0.0

        def val(xx, vv):
            return float(np.sum(pdc.pdc_conv_forward(xx, pdc.PdcFilter(locs, vv)) * g))

        for j in range(len(v)):
            vp, vm = v.copy(), v.copy()
            vp[j] += h
            vm[j] -= h
            num = (val(x, vp) - val(x, vm)) / (2 * h)
            layer_worst = max(layer_worst, abs(num - gv[j]) / max(1e-8, abs(num) + abs(gv[j])))
        for _ in range(40):
            idx = tuple(rng.integers(s) for s in x.shape)
            xp, xm = x.copy(), x.copy()
            xp[idx] += h
            xm[idx] -= h
            num = (val(xp, v) - val(xm, v)) / (2 * h)
            layer_worst = max(
                layer_worst, abs(num - gx[idx]) / max(1e-8, abs(num) + abs(gx[idx]))
            )

        # full tiny estimator in f64 with a smooth activation
        from tests.test_estimator import TINY_FEATURES, TINY_MODEL

        space = get_space("fm2-toy")
        cfg = dataclasses.replace(TINY_MODEL, activation="tanh")
        shapes = estimator.feature_shapes(TINY_FEATURES, 16000)
        model = EstimatorModel(cfg, TINY_FEATURES, space, shapes, seed=7, dtype=np.float64)
        batch = {}
        for m, s in shapes.items():
            shape = (2, 1) + s if m in ("stft", "mel", "cqt") else (2,) + s
            batch[m] = rng.standard_normal(shape)
        n_heads = len(model.head_names)
        targets = np.stack(
            [rng.integers(model.head_classes[n], size=2) for n in model.head_names], axis=1
        )
        weights = np.ones((2, n_heads))

        def loss_value():
            logits = model.forward(batch)
            return estimator.head_loss_and_grads(
                model, logits, targets, weights, 1.0, 2.0 * n_heads
            )

        _, head_grads = loss_value()
        model.zero_grads()
        model.backward(head_grads)
        analytic = {k: arr.copy() for k, arr in model.gradients().items()}
        params = model.parameters()
        model_worst = 0.0
        for name in sorted(params):
            p = params[name]
            for _ in range(min(3, p.size)):
                idx = tuple(rng.integers(s) for s in p.shape)
                orig = p[idx]
                p[idx] = orig + h
                vp, _ = loss_value()
                p[idx] = orig - h
                vm, _ = loss_value()
                p[idx] = orig
                num = (vp - vm) / (2 * h)
                a = analytic[name][idx]
                model_worst = max(model_worst, abs(num - a) / max(1e-8, abs(num) + abs(a)))

        elapsed = time.perf_counter() - start
        ok = layer_worst < 1e-5 and model_worst < 1e-4 and elapsed < 120
        report(
            "gradient-suite", ok,
            f"layer_rel_err={layer_worst:.2e} (<1e-5) model_rel_err={model_worst:.2e} "
            f"(<1e-4) elapsed={elapsed:.1f}s (<120s)",
        )


class TestMetricAxioms:
    def test_axioms_on_100_pairs(self):
        space = get_space("fm2-toy")
        rng = np.random.default_rng(2024)
        worst_sym = 0.0
        ok = True
        for _ in range(100):
            a = render(sample_random_preset(space, rng), SHORT_NOTE, SR)
            b = render(sample_random_preset(space, rng), SHORT_NOTE, SR)
            d_ab = dsp.mfccd(a.samples, SR, b.samples, SR)
            d_ba = dsp.mfccd(b.samples, SR, a.samples, SR)
            d_aa = dsp.mfccd(a.samples, SR, a.samples, SR)
            worst_sym = max(worst_sym, abs(d_ab - d_ba))
            if d_ab < 0 or d_aa != 0.0 or worst_sym >= 1e-9:
                ok = False
                break
        report("metric-axioms", ok, f"pairs=100 max|sym diff|={worst_sym:.2e} (<1e-9)")


class TestCqtPrerequisite:
    def test_octave_distance_is_B(self):
        cfg = dsp.CqtConfig()
        diffs = []
        for base_bin in (20.3, 33.3, 41.3):
            f = cfg.f_min * 2 ** (base_bin / cfg.bins_per_octave)
            t = np.arange(SR) / SR
            k1 = int(np.argmax(
                dsp.cqt_chromagram(np.sin(2 * np.pi * f * t), SR, cfg).data[0].mean(axis=1)
            ))
            k2 = int(np.argmax(
                dsp.cqt_chromagram(np.sin(2 * np.pi * 2 * f * t), SR, cfg).data[0].mean(axis=1)
            ))
            diffs.append(k2 - k1)
        ok = all(d == cfg.bins_per_octave for d in diffs)
        report("cqt-pdc-prerequisite", ok, f"argmax diffs={diffs} (expect all {cfg.bins_per_octave})")


@pytest.fixture(scope="module")
def toy_results(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy_e2e")
    start = time.perf_counter()
    results = run_toy_experiment(out, seed=0, cfg=toy_global_config(0))
    results["elapsed"] = time.perf_counter() - start
    results["out_dir"] = out
    return results


class TestToyEndToEnd:
    def test_dataset_shape(self, toy_results):
        ds = toy_results["dataset"]
        ok = (
            ds["train"] == 1024 and ds["val"] == 128 and ds["test"] == 128
            and not ds["issues"]
        )
        report(
            "toy-dataset", ok,
            f"train/val/test={ds['train']}/{ds['val']}/{ds['test']} issues={ds['issues']}",
        )

    def test_loss_falls_half(self, toy_results):
        drop = toy_results["loss_drop_fraction"]
        report(
            "toy-loss-drop", toy_results["criteria"]["loss_falls_50pct"],
            f"train CE {toy_results['train_loss_first']:.3f} -> "
            f"{toy_results['train_loss_best']:.3f} (drop {drop:.1%}, need >=50%)",
        )

    def test_beats_random_presets_2x(self, toy_results):
        report(
            "toy-beats-random", toy_results["criteria"]["beats_random_2x"],
            f"median test MFCCD {toy_results['median_test_mfccd']:.0f} vs random "
            f"{toy_results['median_random_mfccd']:.0f} "
            f"(ratio {toy_results['mfccd_ratio']:.3f}, need <=0.5)",
        )

    def test_reruns_bit_identical(self, toy_results):
        report("toy-bit-identical", toy_results["reruns_identical"],
               "params/moments/history/state bytes equal across reruns")

    def test_runtime_budget(self, toy_results):
        elapsed = toy_results["elapsed"]
        report("toy-runtime", elapsed <= 1800, f"{elapsed:.0f}s (<=1800s)")


class TestAblationHarness:
    def test_harness_emits_table(self, tmp_path):
        rows = run_ablations(tmp_path, seed=0, cfg=ablation_global_config(0))
        methods = [r["method"] for r in rows]
        table = (tmp_path / "ablations.md").read_text()
        ok = (
            list(ABLATION_VARIANTS) == methods[:4]
            and "| Method | MFCCD |" in table
            and (tmp_path / "ablations.csv").exists()
            and all(np.isfinite(r["mfccd"]) for r in rows)
        )
        lines = "; ".join(f"{r['method']}={r['mfccd']:.0f}" for r in rows)
        report("ablation-harness", ok, f"recorded, not gated: {lines}")


def _constrained(free, base_values):
    toy = get_space("fm2-toy")
    base = preset_from_values(toy, base_values)
    descs = []
    for d in toy.descriptors:
        if d.kind != "fixed" and d.name not in free:
            descs.append(ParameterDescriptor(
                d.name, "fixed", d.class_count, d.group, int(base.get(d.name))
            ))
        else:
            descs.append(d)
    return ParameterSpace(toy.space_id, toy.algorithm_id, 2, tuple(descs))


_BASE_VALUES = {
    "op1_ratio_coarse": 1, "op1_level": 0.6, "op1_attack": 0.05,
    "op1_decay": 0.3, "op1_sustain": 0.8,
    "op2_ratio_coarse": 2, "op2_level": 0.4, "op2_attack": 0.05,
    "op2_decay": 0.3, "op2_sustain": 0.7,
}


class TestBaselineOracles:
    def test_hill_climb_exhaustive_oracle(self):
        space = _constrained({"op1_level"}, _BASE_VALUES)
        truth = preset_from_values(space, {}).with_classes({"op1_level": 40})
        target = render(truth, SHORT_NOTE, SR)

        grid = {}
        for c in range(64):
            p = preset_from_values(space, {}).with_classes({"op1_level": c})
            a = render(p, SHORT_NOTE, SR)
            grid[c] = dsp.mfccd(a.samples, SR, target.samples, SR)
        oracle = min(grid, key=grid.get)

        best, trace = hill_climb(target, space, SHORT_NOTE,
                                 SearchBudget(500, seed=3), patience=16)
        curve = trace.best_curve()
        monotone = all(b <= a for a, b in zip(curve, curve[1:]))
        ok = best.get("op1_level") == oracle == 40 and monotone and len(curve) <= 500
        report(
            "baseline-hillclimb", ok,
            f"recovered class {best.get('op1_level')} == oracle {oracle}, "
            f"evals={len(curve)} monotone={monotone}",
        )

    def test_ga_beats_grid_5th_percentile(self):
        space = _constrained({"op1_level", "op2_level"}, _BASE_VALUES)
        truth = preset_from_values(space, {}).with_classes(
            {"op1_level": 40, "op2_level": 22}
        )
        target = render(truth, SHORT_NOTE, SR)

        values = []
        for c1 in range(64):
            for c2 in range(64):
                p = preset_from_values(space, {}).with_classes(
                    {"op1_level": c1, "op2_level": c2}
                )
                a = render(p, SHORT_NOTE, SR)
                values.append(dsp.mfccd(a.samples, SR, target.samples, SR))
        threshold = float(np.percentile(values, 5))

        best, trace = genetic_search(
            target, space, SHORT_NOTE, SearchBudget(2000, seed=4), GaConfig()
        )
        final = trace.entries[-1].best_mfccd
        curve = trace.best_curve()
        monotone = all(b <= a for a, b in zip(curve, curve[1:]))
        ok = final <= threshold and monotone and len(curve) <= 2000
        report(
            "baseline-ga", ok,
            f"final MFCCD {final:.2f} <= grid 5th pct {threshold:.2f}, "
            f"evals={len(curve)} monotone={monotone}",
        )


class TestWeightingSanity:
    def test_muted_operator_zero_carrier_positive(self):
        space = get_space("fm2-toy")
        preset = preset_from_values(space, {
            "op1_ratio_coarse": 1, "op1_level": 0.75, "op1_attack": 0.02,
            "op1_decay": 0.2, "op1_sustain": 0.85,
            "op2_ratio_coarse": 5, "op2_level": 0.0, "op2_attack": 0.1,
            "op2_decay": 0.3, "op2_sustain": 0.5,
        })
        w = estimator.gradient_weights(preset, SHORT_NOTE, SR)
        muted = [w["op2_ratio_coarse"], w["op2_attack"], w["op2_decay"], w["op2_sustain"]]
        ok = all(v == 0.0 for v in muted) and w["op1_level"] > 0.0
        report(
            "weighting-sanity", ok,
            f"muted-op weights={muted} (exactly 0), carrier level weight="
            f"{w['op1_level']:.1f} (>0)",
        )


class TestLabelSmoothing:
    def test_all_classes_all_sigmas(self):
        worst = 0.0
        ok = True
        for K in (8, 64):
            for sigma0 in (0.5, 1.0, 2.0):
                for c in range(K):
                    t = estimator.label_smooth(c, K, sigma0)
                    worst = max(worst, abs(t.sum() - 1.0))
                    if int(np.argmax(t)) != c:
                        ok = False
        ok = ok and worst < 1e-9
        report("label-smoothing", ok, f"max |sum-1|={worst:.2e} (<1e-9), argmax preserved")
