"""Run configuration, evolution runs on disk, reporting and the energy estimate."""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import asdict, dataclass, fields

from . import data as datamod
from .errors import ConfigError, FormatError
from .evolution import MO_PROBS, EvolutionConfig, random_search, run_evolution
from .fxq import FxFormat, mode_name, parse_mode
from .genome import Bounds, build_phenotype, count_params, load_genome, save_genome, summary
from .nn import evaluate_accuracy

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3

LOG_COLUMNS = ("generation", "best_fitness", "mean_fitness", "best_accuracy", "best_params", "best_depth", "wallclock_s")

DATASET_DEFAULTS = {
    "mnist": {"a_min": 0.80, "max_filters": 12, "fc_neurons": 50},
    "cifar10": {"a_min": 0.60, "max_filters": 20, "fc_neurons": 70},
}


@dataclass
class EnergyModel:
    c1: float = 2.4  # FP32 -> FX16 multiplier energy ratio

    def __post_init__(self):
        if self.c1 <= 1:
            raise ConfigError("c1 must exceed 1")


def estimate_emult_reduction(par_orig, par_red, mode="fp", model: EnergyModel = EnergyModel()) -> float:
    """Factor by which multiplication energy per inference shrinks.

    Each parameter costs at least one multiplication, so the reduction is
    the parameter ratio, times ``c1`` when the reduced network multiplies
    in 16-bit fixed point.
    """
    if par_orig <= 0 or par_red <= 0:
        raise ConfigError("parameter counts must be positive")
    ratio = par_orig / par_red
    fmt = parse_mode(mode)
    if fmt is None:
        return ratio
    if fmt != FxFormat(16, 8) and model == EnergyModel():
        raise ConfigError(f"no multiplier energy ratio known for {fmt}; pass an EnergyModel")
    return model.c1 * ratio


@dataclass
class RunConfig:
    dataset: str = "mnist"
    data_dir: str = "data/mnist"
    out_dir: str = "runs/default"
    seed: int = 0
    g_max: int = 20
    pop_size: int = 8
    p_cross: float = 0.35
    p_mut: float = 0.7
    age_max: int | None = None
    mo_probs: tuple = MO_PROBS
    k: float = 0.5
    a_min: float | None = None
    learning_rate: float = 0.1
    fc_neurons: int | None = None
    max_filters: int | None = None
    max_pool: int = 4
    batch_size: int = 32
    epochs: int = 1
    numeric_mode: str = "fp"
    subsample_n: int | None = None
    checkpoint_every: int = 0
    seed_genome_path: str | None = None
    speciation: bool = True
    workers: int = 1

    def __post_init__(self):
        if self.dataset not in DATASET_DEFAULTS:
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        for key, value in DATASET_DEFAULTS[self.dataset].items():
            if getattr(self, key) is None:
                setattr(self, key, value)
        if self.age_max is None:
            self.age_max = max(1, self.pop_size // 2)
        try:
            self.numeric_mode = mode_name(parse_mode(self.numeric_mode))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def input_shape(self):
        return (1, 28, 28) if self.dataset == "mnist" else (3, 32, 32)

    def evolution_config(self) -> EvolutionConfig:
        try:
            return EvolutionConfig(
                g_max=self.g_max, pop_size=self.pop_size, p_cross=self.p_cross, p_mut=self.p_mut,
                age_max=self.age_max, mo_probs=self.mo_probs, k=self.k, a_min=self.a_min, seed=self.seed,
                learning_rate=self.learning_rate, fc_neurons=self.fc_neurons, batch_size=self.batch_size,
                epochs=self.epochs, bounds=Bounds(max_filters=self.max_filters, max_pool=self.max_pool),
                numeric_mode=self.numeric_mode, speciation=self.speciation, workers=self.workers,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(key, text):
    kind = _FIELD_TYPES[key]
    text = text.strip()
    if "None" in kind and text.lower() in ("none", ""):
        return None
    try:
        if kind.startswith("int"):
            return int(text)
        if kind.startswith("float"):
            return float(text)
        if kind == "bool":
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return text.lower() in ("true", "1", "yes")
        if kind == "tuple":
            return tuple(float(v) for v in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r}") from exc
    return text


def parse_config(text, overrides=None) -> RunConfig:
    """Parse ``key = value`` lines (``#`` starts a comment) into a RunConfig."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, value)
    values.update(overrides or {})
    return RunConfig(**values)


def load_config(path, overrides=None) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read(), overrides)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for key, value in asdict(cfg).items():
        if isinstance(value, tuple):
            value = ",".join(repr(v) for v in value)
        lines.append(f"{key} = {'none' if value is None else value}")
    return "\n".join(lines) + "\n"


def load_split(cfg: RunConfig) -> datamod.DatasetSplit:
    dataset = datamod.load_dataset(cfg.dataset, cfg.data_dir)
    if cfg.subsample_n:
        dataset = datamod.subsample(dataset, cfg.subsample_n, cfg.seed)
    return datamod.split(dataset, cfg.seed)


def write_log_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def read_log_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _write_csv(path, rows):
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def format_report(rep: dict) -> str:
    keys = ("genome_id", "mode", "val_accuracy", "test_accuracy", "params", "depth", "fitness",
            "baseline_params", "emult_reduction")
    lines = [f"{k}: {rep[k]}" for k in keys if k in rep]
    return "\n".join(lines) + "\n\n" + rep["architecture"] + "\n"


def run(cfg: RunConfig | str, overrides=None) -> int:
    """Execute one evolution run and write its artifacts to ``cfg.out_dir``.

    Writes ``config.txt`` (effective configuration), ``log.csv`` (one row
    per generation, initial population first), ``history.csv`` (every
    evaluated candidate), ``best.ea4c``, ``report.txt`` and optional
    population checkpoints.  Returns a process exit code.
    """
    try:
        if not isinstance(cfg, RunConfig):
            cfg = load_config(cfg, overrides)
        ecfg = cfg.evolution_config()
    except (ConfigError, OSError) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    try:
        split = load_split(cfg)
    except (FileNotFoundError, FormatError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    seeds = None
    if cfg.seed_genome_path:
        try:
            seeds = [load_genome(cfg.seed_genome_path)]
        except (OSError, FormatError) as exc:
            log.error("cannot load seed genome: %s", exc)
            return EXIT_CONFIG

    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, "config.txt"), "w") as fh:
        fh.write(dump_config(cfg))

    def checkpoint(generation, pop):
        if cfg.checkpoint_every and generation % cfg.checkpoint_every == 0:
            folder = os.path.join(cfg.out_dir, "checkpoints", f"gen_{generation:04d}")
            os.makedirs(folder, exist_ok=True)
            for sg in pop.members:
                save_genome(sg.genome, os.path.join(folder, f"{sg.id:06d}.ea4c"))
        log.info("generation %d: best fitness %.4f", generation, pop.best().fitness)

    result = run_evolution(ecfg, split, seeds, on_generation=checkpoint)
    write_log_csv(os.path.join(cfg.out_dir, "log.csv"), result.log)
    _write_csv(os.path.join(cfg.out_dir, "history.csv"), result.history)
    save_genome(result.best.genome, os.path.join(cfg.out_dir, "best.ea4c"))

    baseline = count_params(seeds[0], split.train.shape) if seeds else result.population.baseline_params
    rep = {
        "genome_id": result.best.id,
        "mode": cfg.numeric_mode,
        "val_accuracy": result.val_accuracy,
        "test_accuracy": result.best.accuracy,
        "params": result.best.param_count,
        "depth": result.best.genome.depth,
        "fitness": result.best.fitness,
        "baseline_params": baseline,
        "emult_reduction": estimate_emult_reduction(baseline, result.best.param_count, cfg.numeric_mode)
        if parse_mode(cfg.numeric_mode) in (None, FxFormat(16, 8)) else None,
        "architecture": summary(result.best.genome, split.train.shape),
    }
    with open(os.path.join(cfg.out_dir, "report.txt"), "w") as fh:
        fh.write(format_report(rep))
    return EXIT_OK


def report(checkpoint_path, split: datamod.DatasetSplit, mode="fp", baseline_params=None) -> dict:
    """Evaluate a saved genome on the validation set in the requested numeric mode."""
    g = load_genome(checkpoint_path)
    fmt = parse_mode(mode)
    input_shape = split.val.shape
    net = build_phenotype(g, input_shape, 10, numeric_mode=fmt)
    params = count_params(g, input_shape)
    rep = {
        "genome_id": g.header.id,
        "mode": mode_name(fmt),
        "val_accuracy": evaluate_accuracy(net, split.val),
        "params": params,
        "depth": g.depth,
        "architecture": summary(g, input_shape),
    }
    if baseline_params:
        rep["baseline_params"] = baseline_params
        rep["emult_reduction"] = estimate_emult_reduction(baseline_params, params, fmt)
    return rep


def compare_with_random_search(cfg: RunConfig, split=None) -> dict:
    """Evolution vs random search at the same number of network-epochs."""
    split = split or load_split(cfg)
    ecfg = cfg.evolution_config()
    evo = run_evolution(ecfg, split)
    rs = random_search(ecfg, split)
    return {"evolution": evo, "random_search": rs}
