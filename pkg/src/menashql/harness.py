"""Experiment configuration, seeded runs, sweeps and resumable checkpoints.

Configs are flat ``section.key = value`` lines (``#`` starts a comment)::

    game.S = 2
    game.A = 2
    game.B = 2
    game.H = 3
    game.seed = 0
    learner.K = 20000
    run.seeds = 1, 2, 3
    run.out = runs/demo

Setting ``game.actions = 2,2,2`` (with ``game.S`` and ``game.H``) switches to
the general-sum learner with one player per entry; ``game.path`` loads a
saved game instead of generating one.
"""

from __future__ import annotations

import itertools
import logging
import math
import shutil
from concurrent.futures import ProcessPoolExecutor
from concurrent.futures.process import BrokenProcessPool
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import game as zs
from . import learner as ql
from . import multi, textio
from .evaluation import CSV_HEADER, RunMetrics, loglog_slope
from .rng import SEED_MASK, episode_rng

logger = logging.getLogger(__name__)

SUMMARY_HEADER = ("seed", "status", "episodes", "final_value_gap", "cum_value_gap", "nash_gap_final",
                  "best_episode", "nash_gap_selected", "slope", "error")
CHECKPOINT_NAME = "checkpoint.txt"


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors) if not isinstance(errors, str) else [errors]
        super().__init__("; ".join(self.errors))


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class GameSpec:
    S: int | None = None
    A: int | None = None
    B: int | None = None
    H: int | None = None
    actions: tuple[int, ...] | None = None
    seed: int = 0
    concentration: float = 1.0
    initial_state: int = 0
    path: str | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    game: GameSpec
    K: int
    seeds: tuple[int, ...]
    c_b: float = 2.0
    delta: float = 0.01
    mode: str = "full"
    checkpoints: tuple[int, ...] | None = None   # None: powers of two plus K
    slope_min: int = 1000
    slope_max: int = 100000
    out: str = "runs"
    parallelism: int = 1
    keep_checkpoints: bool = False

    @property
    def is_multi(self) -> bool:
        return self.game.actions is not None

    def schedule(self) -> list[int]:
        """Episodes at which the equilibrium gap is computed; always ends with K."""
        if self.checkpoints is None:
            pts = [1 << i for i in range(self.K.bit_length()) if (1 << i) <= self.K]
        else:
            pts = list(self.checkpoints)
        if not pts or pts[-1] != self.K:
            pts.append(self.K)
        return pts

    def learner_config(self) -> ql.LearnerConfig:
        return ql.LearnerConfig(self.K, self.c_b, self.delta, self.mode)


def _int(v: str) -> int:
    return int(v.strip())


def _bool(v: str) -> bool:
    v = v.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _int_list(v: str) -> tuple[int, ...]:
    return tuple(int(x) for x in v.replace(",", " ").split())


def _opt_path(v: str) -> str | None:
    return v.strip() or None


def _checkpoints(v: str):
    return None if v.strip().lower() == "pow2" else _int_list(v)


# key -> (parser, config field or ("game", field))
_KEYS = {
    "game.S": (_int, ("game", "S")),
    "game.A": (_int, ("game", "A")),
    "game.B": (_int, ("game", "B")),
    "game.H": (_int, ("game", "H")),
    "game.actions": (_int_list, ("game", "actions")),
    "game.seed": (_int, ("game", "seed")),
    "game.concentration": (float, ("game", "concentration")),
    "game.initial_state": (_int, ("game", "initial_state")),
    "game.path": (_opt_path, ("game", "path")),
    "learner.K": (_int, "K"),
    "learner.c_b": (float, "c_b"),
    "learner.delta": (float, "delta"),
    "learner.mode": (str.strip, "mode"),
    "eval.checkpoints": (_checkpoints, "checkpoints"),
    "eval.slope_min": (_int, "slope_min"),
    "eval.slope_max": (_int, "slope_max"),
    "run.seeds": (_int_list, "seeds"),
    "run.out": (str.strip, "out"),
    "run.parallelism": (_int, "parallelism"),
    "run.keep_checkpoints": (_bool, "keep_checkpoints"),
}


def parse_pairs(text: str, source: str = "<config>") -> dict[str, str]:
    """Read ``key = value`` lines; later assignments override earlier ones."""
    pairs: dict[str, str] = {}
    errors = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            errors.append(f"{source}:{lineno}: expected 'section.key = value', got {raw.strip()!r}")
            continue
        pairs[key.strip()] = value.strip()
    if errors:
        raise ConfigError(errors)
    return pairs


def config_from_pairs(pairs: dict[str, str], base_dir: Path | None = None) -> ExperimentConfig:
    """Build and validate a config, collecting every problem before raising."""
    errors = []
    top: dict = {}
    game: dict = {}
    for key, value in pairs.items():
        if key not in _KEYS:
            errors.append(f"unknown key `{key}`")
            continue
        parse, target = _KEYS[key]
        try:
            parsed = parse(value)
        except ValueError as exc:
            errors.append(f"`{key}`: cannot parse {value!r} ({exc})")
            continue
        if isinstance(target, tuple):
            game[target[1]] = parsed
        else:
            top[target] = parsed
    unparsed = {k for k in pairs if k in _KEYS} - {k for k in pairs if k in _KEYS and _value_set(k, top, game)}

    if game.get("path") and base_dir is not None and not Path(game["path"]).is_absolute():
        game["path"] = str(base_dir / game["path"])
    spec = GameSpec(**game)
    if "K" not in top:
        if "learner.K" not in unparsed:
            errors.append("`learner.K` is required")
    elif top["K"] < 1:
        errors.append(f"`learner.K` must be at least 1, got {top['K']}")
    seeds = top.get("seeds", ())
    if not seeds and "run.seeds" not in unparsed:
        errors.append("`run.seeds` must list at least one seed")
    bad = [s for s in seeds if not 0 <= s <= SEED_MASK]
    if bad:
        errors.append(f"`run.seeds` must be 64-bit unsigned integers, got {bad}")
    deduped = tuple(dict.fromkeys(seeds))
    if len(deduped) != len(seeds):
        logger.warning("duplicate seeds in `run.seeds` removed: %s -> %s", list(seeds), list(deduped))
    top["seeds"] = deduped

    if spec.path is None:
        if spec.actions is None:
            for k in ("S", "A", "B", "H"):
                v = getattr(spec, k)
                if v is None:
                    if f"game.{k}" not in unparsed:
                        errors.append(f"`game.{k}` is required unless `game.path` or `game.actions` is set")
                elif v < 1:
                    errors.append(f"`game.{k}` must be positive, got {v}")
        else:
            if spec.A is not None or spec.B is not None:
                errors.append("`game.A`/`game.B` cannot be combined with `game.actions`")
            if len(spec.actions) < 2 or min(spec.actions) < 1:
                errors.append(f"`game.actions` needs at least two positive counts, got {list(spec.actions)}")
            for k in ("S", "H"):
                v = getattr(spec, k)
                if v is None or v < 1:
                    errors.append(f"`game.{k}` must be a positive integer")
        if spec.concentration <= 0:
            errors.append("`game.concentration` must be positive")
        if spec.S is not None and not 0 <= spec.initial_state < spec.S:
            errors.append(f"`game.initial_state` must lie in [0, {spec.S})")
    elif not Path(spec.path).is_file():
        errors.append(f"`game.path`: no such file {spec.path!r}")

    if top.get("c_b", 2.0) <= 0:
        errors.append("`learner.c_b` must be positive")
    if not 0 < top.get("delta", 0.01) < 1:
        errors.append("`learner.delta` must lie in (0, 1)")
    if top.get("mode", "full") not in ("full", "ucb_only"):
        errors.append(f"`learner.mode` must be 'full' or 'ucb_only', got {top.get('mode')!r}")
    if top.get("parallelism", 1) < 1:
        errors.append("`run.parallelism` must be at least 1")
    cps = top.get("checkpoints")
    if cps is not None and "K" in top:
        if not cps or any(b <= a for a, b in zip(cps, cps[1:])) or cps[0] < 1 or cps[-1] > top["K"]:
            errors.append("`eval.checkpoints` must be strictly increasing within [1, learner.K]")
    if top.get("slope_min", 1000) < 1 or top.get("slope_max", 100000) <= top.get("slope_min", 1000):
        errors.append("`eval.slope_min` must be >= 1 and below `eval.slope_max`")
    if errors:
        raise ConfigError(errors)
    return ExperimentConfig(spec, **top)


def _value_set(key: str, top: dict, game: dict) -> bool:
    target = _KEYS[key][1]
    return target[1] in game if isinstance(target, tuple) else target in top


def parse_config_text(text: str, base_dir: Path | None = None, source: str = "<config>") -> ExperimentConfig:
    return config_from_pairs(parse_pairs(text, source), base_dir)


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, path.parent, str(path))


def config_to_pairs(cfg: ExperimentConfig) -> dict[str, str]:
    """Canonical ``key -> value`` form; round-trips through :func:`config_from_pairs`."""
    out = {}
    g = cfg.game
    for name in ("S", "A", "B", "H"):
        if getattr(g, name) is not None:
            out[f"game.{name}"] = str(getattr(g, name))
    if g.actions is not None:
        out["game.actions"] = ",".join(map(str, g.actions))
    out["game.seed"] = str(g.seed)
    out["game.concentration"] = repr(float(g.concentration))
    out["game.initial_state"] = str(g.initial_state)
    if g.path is not None:
        out["game.path"] = str(Path(g.path).resolve())
    out["learner.K"] = str(cfg.K)
    out["learner.c_b"] = repr(float(cfg.c_b))
    out["learner.delta"] = repr(float(cfg.delta))
    out["learner.mode"] = cfg.mode
    out["eval.checkpoints"] = "pow2" if cfg.checkpoints is None else ",".join(map(str, cfg.checkpoints))
    out["eval.slope_min"] = str(cfg.slope_min)
    out["eval.slope_max"] = str(cfg.slope_max)
    out["run.seeds"] = ",".join(map(str, cfg.seeds))
    out["run.out"] = cfg.out
    out["run.parallelism"] = str(cfg.parallelism)
    out["run.keep_checkpoints"] = "true" if cfg.keep_checkpoints else "false"
    return out


def config_to_text(cfg: ExperimentConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in config_to_pairs(cfg).items())


# ---------------------------------------------------------------------------
# games and learners behind one interface


def load_any_game(path):
    """Load a two-player zero-sum or a general-sum game file, dispatching on its kind."""
    text = Path(path).read_text()
    header, _ = textio.loads(text)
    if header.get("kind") == multi.GAME_KIND:
        return multi.loads_general_game(text)
    return zs.loads_game(text)


def build_game(cfg: ExperimentConfig):
    g = cfg.game
    if g.path is not None:
        game = load_any_game(g.path)
        if isinstance(game, multi.GeneralSumGame) != cfg.is_multi and g.actions is not None:
            raise ConfigError("`game.actions` does not match the kind of game in `game.path`")
        problems = zs.validate(game) if isinstance(game, zs.MarkovGame) else multi.validate_general(game)
        if problems:
            raise ConfigError([f"`game.path`: {p}" for p in problems[:10]])
        return game
    if cfg.is_multi:
        return multi.generate_random_general(g.seed, g.S, g.actions, g.H, g.concentration, g.initial_state)
    return zs.generate_random(g.seed, (g.S, g.A, g.B, g.H), g.concentration, g.initial_state)


class _ZeroSumRun:
    def __init__(self, game: zs.MarkovGame, lcfg: ql.LearnerConfig, state=None):
        self.game = game
        self.state = state if state is not None else ql.init_state(game.dims, lcfg)

    def episode(self, rng) -> float:
        return ql.run_episode(self.state, self.game, rng).value_gap

    def equilibrium_gap(self, pi) -> float:
        pair = ql.marginals(pi)
        return zs.nash_gap(self.game, pair.mu, pair.nu)

    def to_text(self, header, tables) -> str:
        return ql.state_to_text(self.state, header, tables)

    @staticmethod
    def from_text(text):
        return ql.state_from_text(text)


class _MultiRun:
    def __init__(self, game: multi.GeneralSumGame, lcfg: ql.LearnerConfig, state=None):
        self.game = game
        self.state = state if state is not None else multi.init_multi(game.S, game.action_counts, game.H, lcfg)

    def episode(self, rng) -> float:
        return float(np.max(multi.run_episode_multi(self.state, self.game, rng).value_gaps))

    def equilibrium_gap(self, pi) -> float:
        shape = (self.game.H, self.game.S) + self.game.action_counts
        return multi.cce_gap(self.game, multi.CorrelatedPolicy(np.asarray(pi).reshape(shape)))

    def to_text(self, header, tables) -> str:
        return multi.multi_state_to_text(self.state, header, tables)

    @staticmethod
    def from_text(text):
        return multi.multi_state_parts(text)


def _make_run(game, lcfg, state=None):
    cls = _MultiRun if isinstance(game, multi.GeneralSumGame) else _ZeroSumRun
    return cls(game, lcfg, state)


# ---------------------------------------------------------------------------
# single-seed runs


def _fixed(x: float) -> str:
    return textio.fmt_float(float(x))


@dataclass
class _Book:
    """Run bookkeeping carried through checkpoints."""

    cum: float = 0.0
    last_gap: float = math.nan
    best_gap: float = math.inf
    best_episode: int = 0
    best_pi: np.ndarray | None = None


def seed_dir(cfg: ExperimentConfig, seed: int) -> Path:
    return Path(cfg.out) / f"seed_{seed}"


def _write_checkpoint(path: Path, run, cfg: ExperimentConfig, seed: int, book: _Book) -> None:
    header = {"run.seed": f"{seed:{textio.INT_WIDTH}d}"}
    header.update({f"config.{k}": v for k, v in config_to_pairs(cfg).items()})
    header["book.cum_value_gap"] = _fixed(book.cum)
    header["book.last_gap"] = _fixed(book.last_gap)
    header["book.best_gap"] = _fixed(book.best_gap)
    header["book.best_episode"] = f"{book.best_episode:{textio.INT_WIDTH}d}"
    best_pi = book.best_pi if book.best_pi is not None else run.state.pi
    tmp = path.with_suffix(".tmp")
    tmp.write_text(run.to_text(header, {"best_pi": best_pi}))
    tmp.replace(path)


def _summary_row(seed, status, episodes=0, final_gap=math.nan, cum=math.nan, ng_final=math.nan,
                 best_episode=0, ng_sel=math.nan, slope=math.nan, error="") -> dict:
    def f(x):
        return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))
    return {"seed": str(seed), "status": status, "episodes": str(episodes), "final_value_gap": f(final_gap),
            "cum_value_gap": f(cum), "nash_gap_final": f(ng_final), "best_episode": str(best_episode),
            "nash_gap_selected": f(ng_sel), "slope": f(slope), "error": error.replace("\n", " ").replace(",", ";")}


def _run_seed(cfg: ExperimentConfig, seed: int, resume=None) -> dict:
    """Run (or continue) one seed, writing its CSV and checkpoints.  Never raises."""
    try:
        return _run_seed_inner(cfg, seed, resume)
    except Exception as exc:  # noqa: BLE001 - a failing seed must not take down the others
        logger.error("seed %d failed: %s: %s", seed, type(exc).__name__, exc)
        return _summary_row(seed, "error", error=f"{type(exc).__name__}: {exc}")


def _run_seed_inner(cfg: ExperimentConfig, seed: int, resume=None) -> dict:
    sdir = seed_dir(cfg, seed)
    ckdir = sdir / "checkpoints"
    csv_path = sdir / "metrics.csv"
    game = build_game(cfg)
    H = game.H
    if resume is None:
        if sdir.exists():
            shutil.rmtree(sdir)
        sdir.mkdir(parents=True)
        run = _make_run(game, cfg.learner_config())
        book = _Book()
        fh = open(csv_path, "w")
        fh.write(",".join(CSV_HEADER) + "\n")
        cums = []
    else:
        state, book = resume
        run = _make_run(game, cfg.learner_config(), state)
        start = run.state.episode
        lines = csv_path.read_text().splitlines(keepends=True)
        if len(lines) < start + 1:
            raise RuntimeError(f"{csv_path} has {len(lines) - 1} rows, checkpoint is at episode {start}")
        kept = lines[:start + 1]
        cums = [float(line.split(",")[3]) for line in kept[1:]]
        fh = open(csv_path, "w")
        fh.writelines(kept)
    if cfg.keep_checkpoints:
        ckdir.mkdir(exist_ok=True)
    schedule = set(cfg.schedule())
    with fh:
        for k in range(run.state.episode + 1, cfg.K + 1):
            # the policy deployed in episode k is the one held before its updates
            pi_before = run.state.pi.copy()
            gap = run.episode(episode_rng(seed, k))
            if gap < book.best_gap:
                book.best_gap, book.best_episode, book.best_pi = gap, k, pi_before
            book.last_gap = gap
            book.cum += gap
            cums.append(book.cum)
            ng = run.equilibrium_gap(pi_before) if k in schedule else math.nan
            fh.write(RunMetrics.format_row(k, H, gap, book.cum, ng, run.state.settled_fraction) + "\n")
            if k in schedule and cfg.keep_checkpoints:
                fh.flush()
                _write_checkpoint(ckdir / f"ckpt_{k:012d}.txt", run, cfg, seed, book)
    _write_checkpoint(sdir / CHECKPOINT_NAME, run, cfg, seed, book)

    ng_final = run.equilibrium_gap(run.state.pi)
    ng_sel = run.equilibrium_gap(book.best_pi) if book.best_pi is not None else math.nan
    lo, hi = cfg.slope_min, min(cfg.slope_max, cfg.K)
    slope = math.nan
    if hi > lo and cums[lo - 1] > 0:
        slope = loglog_slope(cums, lo, hi)
    return _summary_row(seed, "ok", run.state.episode, book.last_gap, book.cum, ng_final,
                        book.best_episode, ng_sel, slope)


def write_summary(path: Path, rows: list[dict]) -> None:
    lines = [",".join(SUMMARY_HEADER)]
    lines += [",".join(row[c] for c in SUMMARY_HEADER) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def read_summary(path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    keys = lines[0].split(",")
    return [dict(zip(keys, line.split(","))) for line in lines[1:]]


def run_experiment(cfg: ExperimentConfig) -> list[dict]:
    """Run every seed (in parallel when configured) and write ``summary.csv``.

    Returns the summary rows in seed order.  Per-seed artifacts live in
    ``<out>/seed_<seed>/``; outputs depend only on (config, seed).
    """
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config_to_text(cfg))
    build_game(cfg)  # surface game-file problems as config errors before any work
    if cfg.parallelism > 1 and len(cfg.seeds) > 1:
        rows = []
        with ProcessPoolExecutor(max_workers=min(cfg.parallelism, len(cfg.seeds))) as pool:
            futures = [pool.submit(_run_seed, cfg, s) for s in cfg.seeds]
            for s, fut in zip(cfg.seeds, futures):
                try:
                    rows.append(fut.result())
                except BrokenProcessPool as exc:
                    rows.append(_summary_row(s, "error", error=f"worker process died: {exc}"))
    else:
        rows = [_run_seed(cfg, s) for s in cfg.seeds]
    write_summary(out / "summary.csv", rows)
    return rows


# ---------------------------------------------------------------------------
# resume


def load_checkpoint(path):
    """Read a checkpoint into (config, seed, learner state, bookkeeping)."""
    text = Path(path).read_text()
    header, _ = textio.loads(text)
    if header.get("kind") == multi.STATE_KIND:
        state, extra, tables = multi.multi_state_parts(text)
    else:
        state, extra, tables = ql.state_from_text(text)
    try:
        pairs = {k[len("config."):]: v for k, v in extra.items() if k.startswith("config.")}
        cfg = config_from_pairs(pairs)
        seed = int(extra["run.seed"])
        book = _Book(float(extra["book.cum_value_gap"]), float(extra["book.last_gap"]),
                     float(extra["book.best_gap"]), int(extra["book.best_episode"]), tables["best_pi"])
    except KeyError as exc:
        raise ConfigError(f"{path} is not a run checkpoint (missing {exc})") from exc
    return cfg, seed, state, book


def resume(path) -> dict:
    """Continue the seed run stored in a checkpoint up to its configured K.

    The checkpoint's own directory layout locates the run: ``metrics.csv`` is
    truncated to the checkpoint episode and extended, and the run's
    ``summary.csv`` row for that seed is replaced.
    """
    path = Path(path)
    cfg, seed, state, book = load_checkpoint(path)
    sdir = path.parent.parent if path.parent.name == "checkpoints" else path.parent
    cfg = replace(cfg, out=str(sdir.parent))
    row = _run_seed(cfg, seed, (state, book))
    summary = sdir.parent / "summary.csv"
    rows = read_summary(summary) if summary.exists() else []
    rows = [r for r in rows if r["seed"] != str(seed)] + [row]
    order = {s: i for i, s in enumerate(cfg.seeds)}
    rows.sort(key=lambda r: order.get(int(r["seed"]), len(order)))
    write_summary(summary, rows)
    return row


# ---------------------------------------------------------------------------
# sweeps


def parse_grid(text: str, source: str = "<grid>") -> list[tuple[str, list[str]]]:
    """Grid axes as ``key = v1 v2 ...`` lines (values separated by whitespace)."""
    axes = []
    for key, value in parse_pairs(text, source).items():
        values = value.split()
        if not values:
            raise ConfigError(f"grid axis `{key}` has no values")
        axes.append((key, values))
    return axes


def sweep(base_pairs: dict[str, str], axes: list[tuple[str, list[str]]], out, base_dir=None) -> list[dict]:
    """Run the Cartesian product of the grid axes over the base config.

    Cell ``i`` writes to ``<out>/cell_<i>``; a cell whose overrides make the
    config invalid is reported as errored and the others still run.  The
    merged table (written to ``<out>/sweep_summary.csv``) has one row per
    (cell, seed).
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    keys = [k for k, _ in axes]
    merged = []
    combos = list(itertools.product(*[v for _, v in axes])) if axes else [()]
    for i, combo in enumerate(combos):
        overrides = dict(zip(keys, combo))
        pairs = dict(base_pairs)
        pairs.update(overrides)
        pairs["run.out"] = str(out / f"cell_{i:03d}")
        label = ";".join(f"{k}={v}" for k, v in overrides.items())
        try:
            cfg = config_from_pairs(pairs, base_dir)
            rows = run_experiment(cfg)
        except ConfigError as exc:
            logger.error("cell %d (%s) rejected: %s", i, label, exc)
            rows = [_summary_row("", "config_error", error=str(exc))]
        for row in rows:
            merged.append({"cell": str(i), "overrides": label, **row})
    header = ("cell", "overrides") + SUMMARY_HEADER
    lines = [",".join(header)] + [",".join(r[c] for c in header) for r in merged]
    (out / "sweep_summary.csv").write_text("\n".join(lines) + "\n")
    return merged
