import numpy as np
import pytest

from synthmatch.synth import MidiNote, get_space, preset_from_values

SR = 16000


@pytest.fixture(scope="session")
def note():
    return MidiNote()


@pytest.fixture(scope="session")
def short_note():
    # 0.5 s gate, 1 s total at 120 bpm; keeps render-heavy tests quick
    return MidiNote(sustain_beats=1.0, total_beats=2.0)


@pytest.fixture(scope="session")
def toy_space():
    return get_space("fm2-toy")


@pytest.fixture(scope="session")
def pair_preset(toy_space):
    """Audible 2-op preset: op2 modulates op1."""
    return preset_from_values(toy_space, {
        "op1_ratio_coarse": 1, "op1_level": 0.8, "op1_attack": 0.02,
        "op1_decay": 0.2, "op1_sustain": 0.9,
        "op2_ratio_coarse": 2, "op2_level": 0.5, "op2_attack": 0.02,
        "op2_decay": 0.2, "op2_sustain": 0.8,
    })
