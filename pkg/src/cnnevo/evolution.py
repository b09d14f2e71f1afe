"""Generational neuroevolution with age speciation and weight inheritance.

One generation: two-member tournaments pick parent pairs, one-point
crossover and a single mutation option produce offspring until there are
as many offspring as parents, every offspring trains for one epoch on the
(reshuffled) training set and is scored on the test set, and the next
population is chosen per age level from parents plus offspring.

Randomness is split into independent streams derived from
``(seed, generation, ...)`` so that training offspring in worker
processes gives the same result as training them one after another.
"""

from __future__ import annotations

import itertools
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, TrainingDiverged
from .fxq import FxFormat, mode_name, parse_mode
from .genome import (
    LR_MAX,
    LR_MIN,
    Bounds,
    Genome,
    absorb_weights,
    build_phenotype,
    count_params,
    inherit_weights,
    random_gene,
    random_genome,
    repair,
    reset_layer_weights,
    weighted_layer_count,
)
from .nn import SGDConfig, evaluate_accuracy, train_epochs

MO_PROBS = (0.41, 0.07, 0.03, 0.29, 0.10, 0.10)
MO_NAMES = ("weight_reset", "add_layer", "remove_layer", "modify_layer", "modify_fc", "modify_lr")
WEIGHT_RESET, ADD_LAYER, REMOVE_LAYER, MODIFY_LAYER, MODIFY_FC, MODIFY_LR = range(6)


@dataclass
class EvolutionConfig:
    g_max: int = 20
    pop_size: int = 8
    p_cross: float = 0.35
    p_mut: float = 0.7
    age_max: int | None = None
    mo_probs: tuple = MO_PROBS
    k: float = 0.5
    a_min: float = 0.80
    seed: int = 0
    learning_rate: float = 0.1
    fc_neurons: int = 50
    batch_size: int = 32
    epochs: int = 1
    bounds: Bounds = field(default_factory=Bounds)
    numeric_mode: FxFormat | None = None
    speciation: bool = True
    workers: int = 1

    def __post_init__(self):
        if self.age_max is None:
            self.age_max = max(1, self.pop_size // 2)
        self.mo_probs = tuple(float(p) for p in self.mo_probs)
        self.numeric_mode = parse_mode(self.numeric_mode)
        if self.pop_size < 1 or self.g_max < 0:
            raise ConfigError("pop_size must be >= 1 and g_max >= 0")
        for name in ("p_cross", "p_mut"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if len(self.mo_probs) != 6 or min(self.mo_probs) < 0 or abs(sum(self.mo_probs) - 1) > 1e-9:
            raise ConfigError(f"mo_probs must be 6 non-negative values summing to 1, got {self.mo_probs}")
        if self.age_max < 1:
            raise ConfigError("age_max must be >= 1")


@dataclass
class ScoredGenome:
    genome: Genome
    fitness: float
    accuracy: float
    param_count: int
    s_rel: float
    diverged: bool = False

    @property
    def id(self):
        return self.genome.header.id

    @property
    def age(self):
        return self.genome.header.age


@dataclass
class Population:
    members: list
    baseline_params: int

    def best(self) -> ScoredGenome:
        return min(self.members, key=rank_key)


@dataclass
class EvolutionResult:
    best: ScoredGenome
    log: list
    population: Population
    history: list
    val_accuracy: float
    initial_best: ScoredGenome
    initial_best_val_accuracy: float


def rank_key(sg: ScoredGenome):
    """Sort key: higher fitness first, ties to the lower genome id."""
    return (-sg.fitness, sg.id)


# --------------------------------------------------------------------------
# Fitness
# --------------------------------------------------------------------------


def fitness(a, param_count, baseline_params, k, a_min) -> float:
    """Accuracy scaled up for small networks; zero below the accuracy floor."""
    if baseline_params <= 0 or param_count <= 0:
        raise ValueError("parameter counts must be positive")
    if a < a_min:
        return 0.0
    s_rel = param_count / baseline_params
    return a * (k / math.log(s_rel + 1.0) + 1.0)


# --------------------------------------------------------------------------
# Variation operators
# --------------------------------------------------------------------------


def tournament_select(members, rng):
    """Fitter of two distinct uniformly drawn members.

    On equal fitness the first drawn wins, so an all-equal population is
    sampled uniformly rather than favouring low ids.
    """
    if len(members) == 1:
        return members[0]
    i, j = rng.choice(len(members), size=2, replace=False)
    return members[j] if members[j].fitness > members[i].fitness else members[i]


def one_point_cut(genes_a, genes_b, i, j):
    return list(genes_a[:i]) + list(genes_b[j:]), list(genes_b[:j]) + list(genes_a[i:])


def crossover(a: Genome, b: Genome, p_cross, rng, input_shape=(1, 28, 28), num_classes=10,
              bounds: Bounds = Bounds()):
    """One-point crossover with independent cut points; returns ``(child_a, child_b, crossed)``.

    ``child_a`` keeps ``a``'s header and takes the FC tail from ``b``
    (and symmetrically).  Without crossover the children are copies.
    """
    if rng.random() >= p_cross:
        return a.copy(), b.copy(), False
    i = int(rng.integers(0, len(a.genes) + 1))
    j = int(rng.integers(0, len(b.genes) + 1))
    ga, gb = one_point_cut(a.copy().genes, b.copy().genes, i, j)
    ca = Genome(a.copy().header, ga, b.fc_neurons, b.copy().tail_weights)
    cb = Genome(b.copy().header, gb, a.fc_neurons, a.copy().tail_weights)
    ca = repair(ca, input_shape, num_classes, bounds, rng)
    cb = repair(cb, input_shape, num_classes, bounds, rng)
    return ca, cb, True


def choose_mutation(mo_probs, rng) -> int:
    return int(rng.choice(6, p=np.asarray(mo_probs) / np.sum(mo_probs)))


def _modify_gene(gene, rng, bounds):
    if gene.kind == "conv":
        field_name = ("kernel_size", "filters", "stride", "padding")[int(rng.integers(4))]
        value = {
            "kernel_size": lambda: int(rng.choice(bounds.kernel_sizes)),
            "filters": lambda: int(rng.integers(1, bounds.max_filters + 1)),
            "stride": lambda: int(rng.choice(bounds.strides)),
            "padding": lambda: str(rng.choice(bounds.paddings)),
        }[field_name]()
    else:
        field_name = ("pool_size", "stride", "pool_kind")[int(rng.integers(3))]
        value = {
            "pool_size": lambda: int(rng.integers(1, bounds.max_pool + 1)),
            "stride": lambda: int(rng.choice(bounds.strides)),
            "pool_kind": lambda: str(rng.choice(bounds.pool_kinds)),
        }[field_name]()
    setattr(gene, field_name, value)


def apply_mutation(g: Genome, op: int, rng, input_shape=(1, 28, 28), num_classes=10,
                   bounds: Bounds = Bounds()) -> Genome:
    """Apply mutation option ``op`` (0-based) and repair.

    Removing from (or modifying) an empty gene list adds a layer instead;
    adding to a full gene list modifies a layer instead.
    """
    out = inherit_weights(g, input_shape, num_classes, rng)
    if op in (REMOVE_LAYER, MODIFY_LAYER) and not out.genes:
        op = ADD_LAYER
    if op == ADD_LAYER and len(out.genes) >= bounds.max_genes:
        op = MODIFY_LAYER
    if op == WEIGHT_RESET:
        out = reset_layer_weights(out, int(rng.integers(weighted_layer_count(out))), input_shape, num_classes, rng)
    elif op == ADD_LAYER:
        out.genes.insert(int(rng.integers(0, len(out.genes) + 1)), random_gene(rng, bounds))
    elif op == REMOVE_LAYER:
        del out.genes[int(rng.integers(len(out.genes)))]
    elif op == MODIFY_LAYER:
        _modify_gene(out.genes[int(rng.integers(len(out.genes)))], rng, bounds)
    elif op == MODIFY_FC:
        scaled = int(round(out.fc_neurons * rng.uniform(0.75, 1.25)))
        out.fc_neurons = int(min(max(scaled, bounds.fc_min), bounds.fc_max))
    elif op == MODIFY_LR:
        lr = out.header.learning_rate * rng.uniform(0.5, 2.0)
        out.header.learning_rate = float(min(max(lr, LR_MIN), LR_MAX))
    else:
        raise ValueError(f"unknown mutation option {op}")
    return repair(out, input_shape, num_classes, bounds, rng)


def mutate(g: Genome, p_mut, mo_probs, bounds: Bounds, rng, input_shape=(1, 28, 28), num_classes=10):
    """With probability ``p_mut`` apply one sampled mutation option.

    Returns ``(genome, op)`` where ``op`` is the sampled option index or
    ``None`` when no mutation happened.
    """
    if rng.random() >= p_mut:
        return g.copy(), None
    op = choose_mutation(mo_probs, rng)
    return apply_mutation(g, op, rng, input_shape, num_classes, bounds), op


# --------------------------------------------------------------------------
# Age and replacement
# --------------------------------------------------------------------------


def update_age(sg: ScoredGenome, structurally_changed, parent_fitness, age_max) -> ScoredGenome:
    """Age one more training; back to zero if a structural change lowered fitness."""
    header = sg.genome.header
    header.age = min(header.age + 1, age_max)
    if structurally_changed and sg.fitness < parent_fitness:
        header.age = 0
    return sg


def replace_with_speciation(pool, pop_size, speciation=True):
    """Pick ``pop_size`` survivors from ``pool`` (parents plus offspring).

    Members are grouped by age; each occupied age level keeps its best
    ``pop_size // levels`` members and the remaining slots go to the best
    of the rest.  Without speciation this is plain truncation.
    """
    ordered = sorted(pool, key=rank_key)
    if not speciation:
        return ordered[:pop_size]
    levels = {}
    for sg in ordered:
        levels.setdefault(sg.age, []).append(sg)
    quota = pop_size // len(levels)
    chosen = []
    for age in sorted(levels):
        chosen.extend(levels[age][:quota])
    taken = {id(sg) for sg in chosen}
    for sg in ordered:
        if len(chosen) >= pop_size:
            break
        if id(sg) not in taken:
            chosen.append(sg)
            taken.add(id(sg))
    return sorted(chosen[:pop_size], key=rank_key)


# --------------------------------------------------------------------------
# Candidate training and evaluation
# --------------------------------------------------------------------------

_worker_data = None


def _init_worker(data):
    global _worker_data
    _worker_data = data


def train_and_score(genome: Genome, data, cfg: EvolutionConfig, stream, train=True):
    """Build, optionally train, and test one candidate.

    Returns ``(genome_with_weights, accuracy, diverged)``.  A diverged
    candidate keeps its pre-training weights and scores accuracy 0.
    """
    input_shape = data.train.shape
    rng = np.random.default_rng(stream)
    net = build_phenotype(genome, input_shape, 10, rng=rng, numeric_mode=cfg.numeric_mode)
    if train:
        sgd = SGDConfig(genome.header.learning_rate, cfg.batch_size, cfg.epochs)
        try:
            train_epochs(net, data.train, sgd, rng)
        except TrainingDiverged:
            return inherit_weights(genome, input_shape, 10, rng), 0.0, True
    acc = evaluate_accuracy(net, data.test)
    return absorb_weights(genome, net), acc, False


def _worker_job(args):
    genome, cfg, stream, train = args
    return train_and_score(genome, _worker_data, cfg, stream, train)


def _workers(cfg):
    env = os.environ.get("CNNEVO_WORKERS")
    return max(1, int(env)) if env else max(1, cfg.workers)


class _Evaluator:
    def __init__(self, data, cfg):
        self.data = data
        self.cfg = cfg
        n = _workers(cfg)
        self.pool = ProcessPoolExecutor(n, initializer=_init_worker, initargs=(data,)) if n > 1 else None

    def __call__(self, genomes, generation, train=True):
        jobs = [(g, self.cfg, [self.cfg.seed, generation, 1, i], train) for i, g in enumerate(genomes)]
        if self.pool is None:
            return [train_and_score(g, self.data, c, s, t) for g, c, s, t in jobs]
        return list(self.pool.map(_worker_job, jobs))

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()


# --------------------------------------------------------------------------
# Main loop
# --------------------------------------------------------------------------


def _seeded_population(seeds, cfg, rng, ids, input_shape):
    members = []
    for s in seeds:
        g = s.copy()
        g.header.id = next(ids)
        members.append(repair(g, input_shape, 10, cfg.bounds, rng))
    i = 0
    while len(members) < cfg.pop_size:
        parent = seeds[i % len(seeds)]
        child = apply_mutation(parent, choose_mutation(cfg.mo_probs, rng), rng, input_shape, 10, cfg.bounds)
        child.header.id = next(ids)
        members.append(child)
        i += 1
    return members[: cfg.pop_size]


def _log_row(generation, members, best_so_far, t0, evaluated):
    best = min(members, key=rank_key)
    return {
        "generation": generation,
        "best_fitness": best_so_far.fitness,
        "mean_fitness": float(np.mean([m.fitness for m in members])),
        "best_accuracy": best_so_far.accuracy,
        "best_params": best_so_far.param_count,
        "best_depth": best_so_far.genome.depth,
        "pop_best_fitness": best.fitness,
        "evaluated": evaluated,
        "wallclock_s": round(time.perf_counter() - t0, 3),
    }


def _record(history, generation, sg):
    history.append({
        "generation": generation, "id": sg.id, "age": sg.age, "fitness": sg.fitness,
        "accuracy": sg.accuracy, "params": sg.param_count, "depth": sg.genome.depth,
        "diverged": sg.diverged,
    })


def run_evolution(cfg: EvolutionConfig, data, seed_genomes=None, on_generation=None) -> EvolutionResult:
    """Evolve networks on ``data`` (a DatasetSplit).

    The initial population is either random (then trained for one epoch
    before it is scored, so the size baseline is taken from a trained
    network) or built from ``seed_genomes`` plus single-mutation variants
    of them (scored as given).  ``on_generation(generation, population)``
    is called after the initial scoring and after every generation.
    """
    if len(data.train) == 0 or len(data.test) == 0:
        raise ConfigError("training and test sets must be non-empty")
    t0 = time.perf_counter()
    input_shape = data.train.shape
    ids = itertools.count()
    rng = np.random.default_rng([cfg.seed, 0, 0])
    if seed_genomes:
        initial = _seeded_population(list(seed_genomes), cfg, rng, ids, input_shape)
        train_initial = False
    else:
        initial = [
            random_genome(rng, cfg.bounds, input_shape, 10, next(ids), cfg.learning_rate, cfg.fc_neurons)
            for _ in range(cfg.pop_size)
        ]
        train_initial = True

    evaluate = _Evaluator(data, cfg)
    history = []
    try:
        results = evaluate(initial, 0, train=train_initial)
        params = [count_params(g, input_shape) for g, _, _ in results]
        order = sorted(range(len(results)), key=lambda i: (-results[i][1], params[i], results[i][0].header.id))
        baseline = params[order[0]]
        members = []
        for (g, acc, diverged), n in zip(results, params):
            sg = ScoredGenome(g, fitness(acc, n, baseline, cfg.k, cfg.a_min), acc, n, n / baseline, diverged)
            if train_initial:
                g.header.age = min(g.header.age + 1, cfg.age_max)
            members.append(sg)
            _record(history, 0, sg)
        pop = Population(sorted(members, key=rank_key), baseline)
        initial_best = pop.best()
        best_so_far = initial_best
        log = [_log_row(0, pop.members, best_so_far, t0, len(members))]
        if on_generation:
            on_generation(0, pop)

        for generation in range(1, cfg.g_max + 1):
            rng = np.random.default_rng([cfg.seed, generation, 0])
            offspring, meta = [], []
            while len(offspring) < len(pop.members):
                a = tournament_select(pop.members, rng)
                b = tournament_select(pop.members, rng)
                ca, cb, crossed = crossover(a.genome, b.genome, cfg.p_cross, rng, input_shape, 10, cfg.bounds)
                pairs = ((ca, (a, b) if crossed else (a,)), (cb, (a, b) if crossed else (b,)))
                for child, parents in pairs:
                    child, _ = mutate(child, cfg.p_mut, cfg.mo_probs, cfg.bounds, rng, input_shape)
                    child.header.id = next(ids)
                    changed = all(child.structure() != p.genome.structure() for p in parents)
                    offspring.append(child)
                    meta.append((changed, max(p.fitness for p in parents)))
            offspring, meta = offspring[: len(pop.members)], meta[: len(pop.members)]

            scored = []
            for (g, acc, diverged), (changed, parent_fit) in zip(evaluate(offspring, generation), meta):
                n = count_params(g, input_shape)
                sg = ScoredGenome(g, fitness(acc, n, baseline, cfg.k, cfg.a_min), acc, n, n / baseline, diverged)
                update_age(sg, changed, parent_fit, cfg.age_max)
                scored.append(sg)
                _record(history, generation, sg)

            pop = Population(replace_with_speciation(pop.members + scored, cfg.pop_size, cfg.speciation), baseline)
            if rank_key(pop.best()) < rank_key(best_so_far):
                best_so_far = pop.best()
            log.append(_log_row(generation, pop.members, best_so_far, t0, len(scored)))
            if on_generation:
                on_generation(generation, pop)
    finally:
        evaluate.close()

    best = pop.best()
    val_acc = validation_accuracy(best.genome, data, cfg.numeric_mode)
    init_val = validation_accuracy(initial_best.genome, data, cfg.numeric_mode)
    return EvolutionResult(best, log, pop, history, val_acc, initial_best, init_val)


def validation_accuracy(genome: Genome, data, numeric_mode=None) -> float:
    net = build_phenotype(genome, data.train.shape, 10, numeric_mode=parse_mode(numeric_mode))
    return evaluate_accuracy(net, data.val)


def random_search(cfg: EvolutionConfig, data):
    """Train ``pop_size`` random networks for ``g_max + 1`` epochs each.

    Uses the same initial networks as :func:`run_evolution` with the same
    seed and the same number of network-epochs.  Returns a list of dicts
    (id, params, test accuracy, val accuracy), best test accuracy first.
    """
    input_shape = data.train.shape
    ids = itertools.count()
    rng = np.random.default_rng([cfg.seed, 0, 0])
    genomes = [
        random_genome(rng, cfg.bounds, input_shape, 10, next(ids), cfg.learning_rate, cfg.fc_neurons)
        for _ in range(cfg.pop_size)
    ]
    rows = []
    for i, g in enumerate(genomes):
        for epoch in range(cfg.g_max + 1):
            g, acc, diverged = train_and_score(g, data, cfg, [cfg.seed, epoch, 1, i])
            if diverged:
                break
        rows.append({
            "id": g.header.id,
            "params": count_params(g, input_shape),
            "accuracy": acc,
            "val_accuracy": validation_accuracy(g, data, cfg.numeric_mode),
            "mode": mode_name(cfg.numeric_mode),
        })
    return sorted(rows, key=lambda r: (-r["accuracy"], r["id"]))
