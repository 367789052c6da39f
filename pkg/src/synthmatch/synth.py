"""Deterministic N-operator FM synthesis engine and its parameter space.

The engine uses phase modulation (DX7-family practice, commonly still
called "FM"): every operator is a sine oscillator whose instantaneous
phase is offset by the weighted sum of its modulators' output signals.
Carriers are summed to produce the audio.  Each operator carries a
4-segment ADSR amplitude envelope driven by the note's sustain gate.

Everything here is a pure function of its inputs: rendering the same
preset twice yields bit-identical sample vectors, presets and spaces are
plain data, and no global mutable state exists.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

PRESET_FORMAT_VERSION = 1

# Routing catalog ids.
ADDITIVE6 = 1
STACK6 = 2
PAIRS3 = 3
PAIR2 = 4
ADDITIVE2 = 5

ALGORITHM_NAMES = {
    ADDITIVE6: "additive6",
    STACK6: "stack6",
    PAIRS3: "pairs3",
    PAIR2: "pair2",
    ADDITIVE2: "additive2",
}

# Phase offset in radians contributed by a unit-level modulator at unit
# amplitude.  Chosen so levels in [0, 1] sweep from near-sine to a bright,
# heavily modulated timbre.
MOD_DEPTH = 4.0

# Envelope segment lengths at parameter value 1.0, in seconds.
ATTACK_MAX_S = 1.0
DECAY_MAX_S = 1.0
RELEASE_MAX_S = 1.0

# Coarse frequency ratio table: class 0 is the sub-octave, classes 1..31
# are integer ratios.
RATIO_COARSE = (0.5,) + tuple(float(k) for k in range(1, 32))

# Headroom for the fixed "algorithm" descriptor's class count.
ALGORITHM_CLASSES = 8

DEFAULT_SAMPLE_RATE = 16000


class SpaceError(ValueError):
    """Raised for invalid presets, spaces, or preset JSON."""


# ---------------------------------------------------------------------------
# Domain types


@dataclass(frozen=True)
class MidiNote:
    """A single note event: pitch, velocity, and gate/total length in beats."""

    pitch: int = 60
    velocity: int = 127
    sustain_beats: float = 4.0
    total_beats: float = 8.0
    tempo_bpm: float = 120.0

    def __post_init__(self):
        if not 0 <= self.pitch <= 127:
            raise ValueError(f"pitch {self.pitch} outside 0..127")
        if not 1 <= self.velocity <= 127:
            raise ValueError(f"velocity {self.velocity} outside 1..127")
        if self.sustain_beats <= 0 or self.total_beats <= 0:
            raise ValueError("beat counts must be positive")
        if self.sustain_beats > self.total_beats:
            raise ValueError("sustain_beats may not exceed total_beats")
        if self.tempo_bpm <= 0:
            raise ValueError("tempo must be positive")

    @property
    def gate_seconds(self) -> float:
        return self.sustain_beats * 60.0 / self.tempo_bpm

    @property
    def total_seconds(self) -> float:
        return self.total_beats * 60.0 / self.tempo_bpm

    @property
    def frequency(self) -> float:
        return 440.0 * 2.0 ** ((self.pitch - 69) / 12.0)


@dataclass(frozen=True)
class ParameterDescriptor:
    """One named parameter: continuous (decoded to [0,1]), categorical, or fixed."""

    name: str
    kind: str  # "continuous" | "categorical" | "fixed"
    class_count: int
    group: str  # "op<i>" or "global"
    fixed_value: int | None = None

    def __post_init__(self):
        if self.kind not in ("continuous", "categorical", "fixed"):
            raise ValueError(f"unknown descriptor kind {self.kind!r}")
        if self.class_count < 1:
            raise ValueError("class_count must be >= 1")
        if self.kind == "fixed":
            if self.fixed_value is None:
                raise ValueError(f"fixed descriptor {self.name!r} needs fixed_value")
            if not 0 <= self.fixed_value < self.class_count:
                raise ValueError(f"fixed_value out of range for {self.name!r}")
        elif self.fixed_value is not None:
            raise ValueError(f"fixed_value given for non-fixed {self.name!r}")

    def decode_class(self, idx: int):
        if self.kind == "continuous":
            if self.class_count == 1:
                return 0.0
            return idx / (self.class_count - 1)
        return int(idx)


@dataclass
class ParameterSpace:
    """Ordered descriptor list defining one synthesizer configuration space."""

    space_id: str
    algorithm_id: int
    num_operators: int
    descriptors: tuple[ParameterDescriptor, ...]

    def __post_init__(self):
        self.descriptors = tuple(self.descriptors)
        names = [d.name for d in self.descriptors]
        if len(set(names)) != len(names):
            raise SpaceError("descriptor names must be unique")
        counts = {d.class_count for d in self.descriptors if d.kind == "continuous"}
        if len(counts) > 1:
            raise SpaceError("all continuous descriptors must share one class count")
        self._index = {d.name: i for i, d in enumerate(self.descriptors)}

    @property
    def classes(self) -> int:
        """Shared class count K of the continuous descriptors."""
        for d in self.descriptors:
            if d.kind == "continuous":
                return d.class_count
        return 1

    def __len__(self) -> int:
        return len(self.descriptors)

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise SpaceError(f"unknown parameter {name!r} in space {self.space_id}")

    def descriptor(self, name: str) -> ParameterDescriptor:
        return self.descriptors[self.index(name)]

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(d.name for d in self.descriptors)

    @property
    def non_fixed(self) -> tuple[ParameterDescriptor, ...]:
        return tuple(d for d in self.descriptors if d.kind != "fixed")

    @property
    def groups(self) -> tuple[str, ...]:
        """Operator groups in order, then 'global'."""
        return tuple(f"op{i}" for i in range(1, self.num_operators + 1)) + ("global",)


@dataclass(eq=False)
class Preset:
    """A point in a parameter space: one class index per descriptor."""

    space: ParameterSpace
    class_indices: np.ndarray
    theme: str | None = None

    def __post_init__(self):
        self.class_indices = np.asarray(self.class_indices, dtype=np.int64).copy()
        self.validate()

    def validate(self) -> None:
        if self.class_indices.shape != (len(self.space),):
            raise SpaceError(
                f"preset has {self.class_indices.size} indices, space "
                f"{self.space.space_id} has {len(self.space)} descriptors"
            )
        for desc, idx in zip(self.space.descriptors, self.class_indices):
            if not 0 <= idx < desc.class_count:
                raise SpaceError(f"class {idx} out of range for {desc.name!r}")
            if desc.kind == "fixed" and idx != desc.fixed_value:
                raise SpaceError(f"fixed parameter {desc.name!r} must hold {desc.fixed_value}")

    def get(self, name: str) -> int:
        return int(self.class_indices[self.space.index(name)])

    def with_classes(self, updates: Mapping[str, int], theme: str | None = None) -> "Preset":
        idx = self.class_indices.copy()
        for name, value in updates.items():
            idx[self.space.index(name)] = int(value)
        return Preset(self.space, idx, theme if theme is not None else self.theme)

    def classes_dict(self) -> dict[str, int]:
        return {d.name: int(i) for d, i in zip(self.space.descriptors, self.class_indices)}


@dataclass
class AudioBuffer:
    """A rendered mono signal."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("AudioBuffer expects a 1-D signal")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("AudioBuffer contains non-finite samples")

    def __len__(self) -> int:
        return self.samples.size


@dataclass(frozen=True)
class ModRouting:
    """Modulation topology: adjacency[i-1] lists the modulators of operator i.

    The graph must be acyclic apart from at most one self-feedback edge;
    carriers are the operators mixed into the output.
    """

    num_operators: int
    adjacency: tuple[tuple[int, ...], ...]
    carriers: frozenset[int]

    def __post_init__(self):
        if len(self.adjacency) != self.num_operators:
            raise ValueError("adjacency size does not match operator count")
        ops = range(1, self.num_operators + 1)
        for row in self.adjacency:
            for m in row:
                if not 1 <= m <= self.num_operators:
                    raise ValueError(f"modulator {m} out of range")
        if not self.carriers:
            raise ValueError("at least one carrier required")
        if not all(c in ops for c in self.carriers):
            raise ValueError("carrier out of range")
        self_edges = [i for i in ops if i in self.adjacency[i - 1]]
        if len(self_edges) > 1:
            raise ValueError("at most one self-feedback edge allowed")
        object.__setattr__(self, "_order", self._topo_order())

    @property
    def feedback_op(self) -> int | None:
        for i in range(1, self.num_operators + 1):
            if i in self.adjacency[i - 1]:
                return i
        return None

    def modulators(self, op: int) -> tuple[int, ...]:
        return self.adjacency[op - 1]

    def _topo_order(self) -> tuple[int, ...]:
        order: list[int] = []
        state: dict[int, int] = {}  # 1 visiting, 2 done

        def visit(op: int) -> None:
            if state.get(op) == 2:
                return
            if state.get(op) == 1:
                raise ValueError("modulation routing contains a cycle")
            state[op] = 1
            for m in self.adjacency[op - 1]:
                if m != op:
                    visit(m)
            state[op] = 2
            order.append(op)

        for c in sorted(self.carriers):
            visit(c)
        return tuple(order)

    def evaluation_order(self) -> tuple[int, ...]:
        """Operators reachable from a carrier, modulators first.

        Operators not in this order are inert: nothing they produce can
        reach the output, so the engine skips them.
        """
        return self._order  # type: ignore[attr-defined]


_TOPOLOGIES: dict[int, ModRouting] = {
    ADDITIVE6: ModRouting(
        num_operators=6,
        adjacency=((), (), (), (), (), (6,)),
        carriers=frozenset({1, 2, 3, 4, 5, 6}),
    ),
    STACK6: ModRouting(
        num_operators=6,
        adjacency=((2,), (3,), (4,), (5,), (6,), (6,)),
        carriers=frozenset({1}),
    ),
    PAIRS3: ModRouting(
        num_operators=6,
        adjacency=((2,), (), (4,), (), (6,), (6,)),
        carriers=frozenset({1, 3, 5}),
    ),
    PAIR2: ModRouting(
        num_operators=2,
        adjacency=((2,), (2,)),
        carriers=frozenset({1}),
    ),
    ADDITIVE2: ModRouting(
        num_operators=2,
        adjacency=((), (2,)),
        carriers=frozenset({1, 2}),
    ),
}


def algorithm_topology(algorithm_id: int) -> ModRouting:
    """Fixed, documented routing for a catalog id; same id, same routing."""
    try:
        return _TOPOLOGIES[algorithm_id]
    except KeyError:
        known = ", ".join(f"{i}={n}" for i, n in sorted(ALGORITHM_NAMES.items()))
        raise ValueError(f"unsupported algorithm {algorithm_id} (known: {known})")


# ---------------------------------------------------------------------------
# Parameter space construction

_OP_CONTINUOUS = ("ratio_fine", "detune", "level", "attack", "decay", "sustain", "release")
_TOY_OP_PARAMS = ("ratio_coarse", "level", "attack", "decay", "sustain")


def _op_descriptors(op: int, params: Iterable[str], classes: int):
    group = f"op{op}"
    for p in params:
        name = f"op{op}_{p}"
        if p == "ratio_coarse":
            yield ParameterDescriptor(name, "categorical", len(RATIO_COARSE), group)
        else:
            yield ParameterDescriptor(name, "continuous", classes, group)


def full_space(space_id: str, algorithm_id: int, classes: int = 64) -> ParameterSpace:
    """All per-operator parameters plus global feedback/algorithm/output."""
    routing = algorithm_topology(algorithm_id)
    descs: list[ParameterDescriptor] = []
    for op in range(1, routing.num_operators + 1):
        descs.extend(_op_descriptors(op, ("ratio_coarse",) + _OP_CONTINUOUS, classes))
    descs.append(ParameterDescriptor("feedback", "continuous", classes, "global"))
    descs.append(
        ParameterDescriptor("algorithm", "fixed", ALGORITHM_CLASSES, "global", algorithm_id)
    )
    descs.append(ParameterDescriptor("output", "fixed", classes, "global", classes - 1))
    return ParameterSpace(space_id, algorithm_id, routing.num_operators, tuple(descs))


def toy_space(classes: int = 64) -> ParameterSpace:
    """Two-operator space with 10 free parameters, for desk-scale experiments.

    Per operator: coarse ratio, output level, attack, decay, sustain level.
    Fine ratio, detune, release, and feedback stay at engine defaults.
    """
    descs: list[ParameterDescriptor] = []
    for op in (1, 2):
        descs.extend(_op_descriptors(op, _TOY_OP_PARAMS, classes))
    descs.append(ParameterDescriptor("algorithm", "fixed", ALGORITHM_CLASSES, "global", PAIR2))
    descs.append(ParameterDescriptor("output", "fixed", classes, "global", classes - 1))
    return ParameterSpace("fm2-toy", PAIR2, 2, tuple(descs))


_SPACE_BUILDERS = {
    "fm6-additive": lambda: full_space("fm6-additive", ADDITIVE6),
    "fm6-stack": lambda: full_space("fm6-stack", STACK6),
    "fm6-pairs": lambda: full_space("fm6-pairs", PAIRS3),
    "fm2": lambda: full_space("fm2", PAIR2),
    "fm2-additive": lambda: full_space("fm2-additive", ADDITIVE2),
    "fm2-toy": toy_space,
}

_SPACE_CACHE: dict[str, ParameterSpace] = {}


def space_ids() -> tuple[str, ...]:
    return tuple(sorted(_SPACE_BUILDERS))


def get_space(space_id: str) -> ParameterSpace:
    if space_id not in _SPACE_BUILDERS:
        raise SpaceError(f"unknown space {space_id!r} (known: {', '.join(space_ids())})")
    if space_id not in _SPACE_CACHE:
        _SPACE_CACHE[space_id] = _SPACE_BUILDERS[space_id]()
    return _SPACE_CACHE[space_id]


def preset_from_values(
    space: ParameterSpace, values: Mapping[str, float], theme: str | None = None
) -> Preset:
    """Build a preset from continuous values in [0,1] and categorical class ids.

    Unnamed descriptors default to class 0 (fixed ones to their pinned value).
    """
    idx = np.zeros(len(space), dtype=np.int64)
    for i, d in enumerate(space.descriptors):
        if d.kind == "fixed":
            idx[i] = d.fixed_value
    for name, v in values.items():
        d = space.descriptor(name)
        if d.kind == "continuous":
            if not 0.0 <= v <= 1.0:
                raise SpaceError(f"{name}: continuous value {v} outside [0,1]")
            idx[space.index(name)] = int(round(v * (d.class_count - 1)))
        else:
            idx[space.index(name)] = int(v)
    return Preset(space, idx, theme)


# ---------------------------------------------------------------------------
# Decoding and rendering


def decode(preset: Preset) -> dict[str, float | int]:
    """Map class indices to values: continuous in [0,1], others the class id."""
    preset.validate()
    return {
        d.name: d.decode_class(int(i))
        for d, i in zip(preset.space.descriptors, preset.class_indices)
    }


def _adsr(t: np.ndarray, gate_s: float, a: float, d: float, s: float, r: float) -> np.ndarray:
    """Piecewise-linear ADSR; release always reaches exactly zero."""
    eps = 1e-12
    attack_s = a * ATTACK_MAX_S
    decay_s = d * DECAY_MAX_S
    release_s = r * RELEASE_MAX_S

    def gate_level(tt):
        rise = np.minimum(tt / max(attack_s, eps), 1.0)
        fall = 1.0 + (s - 1.0) * np.clip((tt - attack_s) / max(decay_s, eps), 0.0, 1.0)
        return np.where(tt < attack_s, rise, fall)

    held = gate_level(t)
    off_level = float(gate_level(np.asarray([gate_s]))[0])
    released = off_level * np.clip(1.0 - (t - gate_s) / max(release_s, eps), 0.0, 1.0)
    return np.where(t < gate_s, held, released)


def _feedback_signal(
    phase: np.ndarray, env: np.ndarray, mod: np.ndarray, fb_amount: float
) -> np.ndarray:
    # Self-feedback makes sample n depend on sample n-1, so this one
    # operator runs as a scalar loop; everything else stays vectorized.
    # Plain-float lists keep the loop an order of magnitude faster than
    # numpy scalar indexing.
    out = [0.0] * phase.size
    prev = 0.0
    sin = math.sin
    k = MOD_DEPTH
    for i, (ph, e, m) in enumerate(zip(phase.tolist(), env.tolist(), mod.tolist())):
        prev = e * sin(ph + k * (m + fb_amount * prev))
        out[i] = prev
    return np.asarray(out, dtype=np.float64)


def _op_value(params: Mapping[str, float | int], op: int, key: str, default: float):
    return params.get(f"op{op}_{key}", default)


def render(
    preset: Preset, note: MidiNote, sample_rate: int = DEFAULT_SAMPLE_RATE
) -> AudioBuffer:
    """Render a preset for one note.  Deterministic; peak-scaled only if |x|>1."""
    if sample_rate < 8000:
        raise ValueError(f"sample_rate {sample_rate} below minimum 8000")
    space = preset.space
    params = decode(preset)
    routing = algorithm_topology(space.algorithm_id)
    if routing.num_operators != space.num_operators:
        raise SpaceError("space operator count does not match its routing")

    n = int(note.total_seconds * sample_rate)
    t = np.arange(n, dtype=np.float64) / sample_rate
    f0 = note.frequency
    feedback = float(params.get("feedback", 0.0))

    signals: dict[int, np.ndarray] = {}
    for op in routing.evaluation_order():
        coarse = int(_op_value(params, op, "ratio_coarse", 1))
        ratio = RATIO_COARSE[coarse] * (1.0 + float(_op_value(params, op, "ratio_fine", 0.0)))
        detune = float(_op_value(params, op, "detune", 0.5))
        freq = f0 * ratio * 2.0 ** ((detune - 0.5) / 12.0)
        env = _adsr(
            t,
            note.gate_seconds,
            float(_op_value(params, op, "attack", 0.0)),
            float(_op_value(params, op, "decay", 0.0)),
            float(_op_value(params, op, "sustain", 1.0)),
            float(_op_value(params, op, "release", 0.25)),
        )
        mod = np.zeros(n, dtype=np.float64)
        for m in routing.modulators(op):
            if m != op:
                mod += float(_op_value(params, m, "level", 0.0)) * signals[m]
        phase = (2.0 * math.pi * freq) * t
        if op == routing.feedback_op and feedback > 0.0:
            signals[op] = _feedback_signal(phase, env, mod, feedback)
        else:
            signals[op] = env * np.sin(phase + MOD_DEPTH * mod)

    audio = np.zeros(n, dtype=np.float64)
    for c in sorted(routing.carriers):
        audio += float(_op_value(params, c, "level", 0.0)) * signals[c]

    gain = note.velocity / 127.0
    if "output" in space._index:
        out_desc = space.descriptor("output")
        if out_desc.class_count > 1:
            gain *= params["output"] / (out_desc.class_count - 1)
    audio *= gain

    peak = float(np.max(np.abs(audio))) if n else 0.0
    if peak > 1.0:
        audio = audio / peak
    return AudioBuffer(audio, sample_rate)


def rms(audio: AudioBuffer) -> float:
    if len(audio) == 0:
        return 0.0
    return float(np.sqrt(np.mean(np.square(audio.samples))))


def is_audible(audio: AudioBuffer, threshold: float = 0.01) -> bool:
    """True iff the RMS level reaches the threshold."""
    return rms(audio) >= threshold


# ---------------------------------------------------------------------------
# Preset JSON

_PRESET_KEYS = {"format_version", "space", "algorithm", "theme", "classes", "config_hash"}


def preset_to_json(preset: Preset, config_hash: str | None = None) -> dict:
    doc = {
        "format_version": PRESET_FORMAT_VERSION,
        "space": preset.space.space_id,
        "algorithm": preset.space.algorithm_id,
        "theme": preset.theme,
        "classes": preset.classes_dict(),
    }
    if config_hash is not None:
        doc["config_hash"] = config_hash
    return doc


def preset_from_json(doc: Mapping, space: ParameterSpace | None = None) -> Preset:
    unknown = set(doc) - _PRESET_KEYS
    if unknown:
        raise SpaceError(f"unknown preset keys: {sorted(unknown)}")
    for key in ("format_version", "space", "algorithm", "classes"):
        if key not in doc:
            raise SpaceError(f"preset JSON missing {key!r}")
    if doc["format_version"] != PRESET_FORMAT_VERSION:
        raise SpaceError(f"unsupported preset format_version {doc['format_version']}")
    if space is None:
        space = get_space(doc["space"])
    elif space.space_id != doc["space"]:
        raise SpaceError(f"preset space {doc['space']!r} does not match {space.space_id!r}")
    if doc["algorithm"] != space.algorithm_id:
        raise SpaceError(
            f"preset algorithm {doc['algorithm']} does not match space "
            f"{space.space_id} (algorithm {space.algorithm_id})"
        )
    classes = doc["classes"]
    unknown_params = set(classes) - set(space.names)
    if unknown_params:
        raise SpaceError(f"unknown parameters in preset: {sorted(unknown_params)}")
    idx = np.zeros(len(space), dtype=np.int64)
    for i, d in enumerate(space.descriptors):
        if d.name in classes:
            idx[i] = int(classes[d.name])
        elif d.kind == "fixed":
            idx[i] = d.fixed_value
        else:
            raise SpaceError(f"preset JSON missing parameter {d.name!r}")
    return Preset(space, idx, doc.get("theme"))


def write_preset(path, preset: Preset, config_hash: str | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(preset_to_json(preset, config_hash), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_preset(path, space: ParameterSpace | None = None) -> Preset:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise SpaceError(f"{path}: preset JSON must be an object")
    return preset_from_json(doc, space)
