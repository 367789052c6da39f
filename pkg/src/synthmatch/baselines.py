"""Classical black-box baselines minimizing the MFCC distance directly.

Both searches drive the synth engine against a target recording: hill
climbing with single-parameter moves and random restarts, and a
generational GA with tournament selection, uniform crossover, per-gene
mutation, and elitism.  Renders are cached by class vector; only fresh
renders count against the evaluation budget, since rendering is the cost
being measured.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .config import MfccdConfig
from .dsp import mfccd
from .synth import AudioBuffer, MidiNote, ParameterSpace, Preset, render
from .dataset import sample_random_preset


@dataclass(frozen=True)
class SearchBudget:
    max_evaluations: int
    seed: int = 0
    early_stop: float | None = None

    def __post_init__(self):
        if self.max_evaluations < 1:
            raise ValueError("budget must allow at least one evaluation")


@dataclass
class TraceEntry:
    step: int
    mfccd: float
    best_mfccd: float


@dataclass
class SearchTrace:
    entries: list[TraceEntry] = field(default_factory=list)

    def best_curve(self) -> list[float]:
        return [e.best_mfccd for e in self.entries]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "mfccd", "best_mfccd"])
            for e in self.entries:
                writer.writerow([e.step, repr(e.mfccd), repr(e.best_mfccd)])


class _Objective:
    """MFCC distance to the target with render caching and budget accounting."""

    def __init__(self, target: AudioBuffer, note: MidiNote, budget: SearchBudget,
                 mfccd_cfg: MfccdConfig):
        self.target = target
        self.note = note
        self.budget = budget
        self.kw = mfccd_cfg.kwargs()
        self.cache: dict[tuple, float] = {}
        self.evals = 0
        self.trace = SearchTrace()
        self.best: float = math.inf
        self.best_preset: Preset | None = None

    def exhausted(self) -> bool:
        return self.evals >= self.budget.max_evaluations

    def should_stop(self) -> bool:
        if self.exhausted():
            return True
        return self.budget.early_stop is not None and self.best <= self.budget.early_stop

    def __call__(self, preset: Preset) -> float:
        key = tuple(int(i) for i in preset.class_indices)
        if key in self.cache:
            return self.cache[key]
        audio = render(preset, self.note, self.target.sample_rate)
        value = mfccd(audio.samples, audio.sample_rate,
                      self.target.samples, self.target.sample_rate, **self.kw)
        self.evals += 1
        self.cache[key] = value
        if value < self.best:
            self.best = value
            self.best_preset = preset
        self.trace.entries.append(TraceEntry(self.evals, value, self.best))
        return value


def _propose_step(preset: Preset, rng: np.random.Generator) -> Preset:
    """Random single-parameter +-1 move, clamped at the range ends."""
    free = preset.space.non_fixed
    d = free[rng.integers(len(free))]
    direction = 1 if rng.integers(2) else -1
    idx = preset.get(d.name) + direction
    idx = int(np.clip(idx, 0, d.class_count - 1))
    return preset.with_classes({d.name: idx})


def hill_climb(
    target: AudioBuffer,
    space: ParameterSpace,
    note: MidiNote,
    budget: SearchBudget,
    patience: int = 64,
    mfccd_cfg: MfccdConfig = MfccdConfig(),
) -> tuple[Preset, SearchTrace]:
    """Single-parameter hill climbing with random restarts.

    Moves are accepted only on strict improvement; after ``patience``
    consecutive non-improving proposals the search restarts from a fresh
    random preset (the global best is kept).
    """
    rng = np.random.default_rng(budget.seed)
    objective = _Objective(target, note, budget, mfccd_cfg)

    current = sample_random_preset(space, rng)
    current_val = objective(current)
    stalled = 0
    # Cached proposals are free, so bound the total proposal count to stay
    # finite once the reachable neighborhood is fully explored.
    max_proposals = 1000 * budget.max_evaluations
    proposals = 0
    while not objective.should_stop() and proposals < max_proposals:
        proposals += 1
        candidate = _propose_step(current, rng)
        value = objective(candidate)
        if value < current_val:
            current, current_val = candidate, value
            stalled = 0
        else:
            stalled += 1
            if stalled >= patience:
                current = sample_random_preset(space, rng)
                if objective.should_stop():
                    break
                current_val = objective(current)
                stalled = 0
    assert objective.best_preset is not None
    return objective.best_preset, objective.trace


@dataclass(frozen=True)
class GaConfig:
    population: int = 32
    tournament: int = 3
    crossover_rate: float = 0.9
    mutation_rate: float | None = None  # default 1/num_free_params
    elite: int = 2
    step_mutation_prob: float = 0.5  # +-1-class step vs full resample

    def __post_init__(self):
        if self.population < 2 or self.tournament < 1 or self.elite < 0:
            raise ValueError("invalid GA configuration")
        if self.elite >= self.population:
            raise ValueError("elite count must be below the population size")
        if not 0.0 <= self.crossover_rate <= 1.0:
            raise ValueError("crossover_rate must be in [0,1]")


def genetic_search(
    target: AudioBuffer,
    space: ParameterSpace,
    note: MidiNote,
    budget: SearchBudget,
    ga_cfg: GaConfig = GaConfig(),
    mfccd_cfg: MfccdConfig = MfccdConfig(),
    initial_population: list[Preset] | None = None,
) -> tuple[Preset, SearchTrace]:
    """Generational GA; fitness is the negated MFCC distance."""
    rng = np.random.default_rng(budget.seed)
    objective = _Objective(target, note, budget, mfccd_cfg)
    free = space.non_fixed
    mut_rate = ga_cfg.mutation_rate or 1.0 / max(len(free), 1)

    if initial_population:
        population = list(initial_population)
    else:
        population = [sample_random_preset(space, rng) for _ in range(ga_cfg.population)]
    fitness = []
    for p in population:
        if objective.should_stop():
            break
        fitness.append(objective(p))
    population = population[: len(fitness)]

    def tournament() -> Preset:
        best_i = None
        for _ in range(ga_cfg.tournament):
            i = int(rng.integers(len(population)))
            if best_i is None or fitness[i] < fitness[best_i]:
                best_i = i
        return population[best_i]

    def crossover(a: Preset, b: Preset) -> Preset:
        if rng.random() >= ga_cfg.crossover_rate:
            return a
        updates = {}
        for d in free:
            if rng.integers(2):
                updates[d.name] = b.get(d.name)
        return a.with_classes(updates)

    def mutate(p: Preset) -> Preset:
        updates = {}
        for d in free:
            if rng.random() >= mut_rate:
                continue
            if rng.random() < ga_cfg.step_mutation_prob:
                idx = p.get(d.name) + (1 if rng.integers(2) else -1)
                updates[d.name] = int(np.clip(idx, 0, d.class_count - 1))
            else:
                updates[d.name] = int(rng.integers(d.class_count))
        return p.with_classes(updates)

    stale_generations = 0
    while not objective.should_stop() and stale_generations < 50:
        evals_before = objective.evals
        order = np.argsort(np.asarray(fitness), kind="stable")
        elites = [population[i] for i in order[: ga_cfg.elite]]
        children = list(elites)
        while len(children) < ga_cfg.population:
            child = mutate(crossover(tournament(), tournament()))
            children.append(child)
        new_fitness = []
        for p in children:
            if objective.should_stop():
                break
            new_fitness.append(objective(p))
        if not new_fitness:
            break
        population = children[: len(new_fitness)]
        fitness = new_fitness
        # a generation of pure cache hits consumes no budget; bail out once
        # the search stops finding unseen candidates
        stale_generations = stale_generations + 1 if objective.evals == evals_before else 0

    assert objective.best_preset is not None
    return objective.best_preset, objective.trace
