import logging
import math

import numpy as np
import pytest

from menashql import harness
from menashql.evaluation import CSV_HEADER, RunMetrics
from menashql.game import generate_random, nash_gap, save_game
from menashql.learner import LearnerConfig, init_state, marginals, run_episode
from menashql.multi import generate_random_general
from menashql.rng import episode_rng

BASE = """
game.S = 2
game.A = 2
game.B = 2
game.H = 2
game.seed = 3
learner.K = {K}
run.seeds = {seeds}
run.out = {out}
"""


def make_cfg(tmp_path, K=10, seeds="1", extra="", name="out"):
    text = BASE.format(K=K, seeds=seeds, out=tmp_path / name) + extra
    return harness.parse_config_text(text, tmp_path)


# ---------------------------------------------------------------------------
# configuration


def test_defaults(tmp_path):
    cfg = make_cfg(tmp_path)
    assert cfg.c_b == 2.0 and cfg.delta == 0.01 and cfg.mode == "full"
    assert cfg.parallelism == 1 and not cfg.keep_checkpoints and not cfg.is_multi
    assert cfg.schedule() == [1, 2, 4, 8, 10]
    assert make_cfg(tmp_path, K=16).schedule() == [1, 2, 4, 8, 16]


def test_zero_episodes_is_rejected_by_name(tmp_path):
    with pytest.raises(harness.ConfigError) as err:
        make_cfg(tmp_path, K=0)
    assert any("learner.K" in e for e in err.value.errors)


def test_every_problem_is_reported(tmp_path):
    text = "game.S = 0\ngame.A = x\nlearner.K = 5\nlearner.c_b = -1\nrun.seeds = \nbogus.key = 1\n"
    with pytest.raises(harness.ConfigError) as err:
        harness.parse_config_text(text)
    msgs = " | ".join(err.value.errors)
    for needle in ("unknown key `bogus.key`", "`game.A`: cannot parse", "`game.S` must be positive",
                   "`game.B` is required", "`learner.c_b` must be positive", "`run.seeds`"):
        assert needle in msgs
    assert "`game.A` is required" not in msgs


def test_malformed_line(tmp_path):
    with pytest.raises(harness.ConfigError) as err:
        harness.parse_config_text("game.S 2\n", source="c.txt")
    assert "c.txt:1" in err.value.errors[0]


def test_duplicate_seeds_warn_and_dedupe(tmp_path, caplog):
    with caplog.at_level(logging.WARNING):
        cfg = make_cfg(tmp_path, seeds="4, 4, 2")
    assert cfg.seeds == (4, 2)
    assert "duplicate seeds" in caplog.text


def test_seed_range_and_checkpoint_list(tmp_path):
    with pytest.raises(harness.ConfigError):
        make_cfg(tmp_path, seeds=str(1 << 64))
    with pytest.raises(harness.ConfigError):
        make_cfg(tmp_path, extra="eval.checkpoints = 4, 2\n")
    cfg = make_cfg(tmp_path, extra="eval.checkpoints = 3, 7\n")
    assert cfg.schedule() == [3, 7, 10]


def test_config_text_round_trip(tmp_path):
    cfg = make_cfg(tmp_path, extra="learner.c_b = 0.3\nrun.keep_checkpoints = yes\n")
    assert harness.parse_config_text(harness.config_to_text(cfg)) == cfg


def test_game_path_relative_to_config(tmp_path):
    save_game(generate_random(1, (2, 2, 2, 2)), tmp_path / "g.txt")
    cfg_file = tmp_path / "exp.cfg"
    cfg_file.write_text(f"game.path = g.txt\nlearner.K = 3\nrun.seeds = 1\nrun.out = {tmp_path / 'o'}\n")
    cfg = harness.parse_config(cfg_file)
    assert cfg.game.path == str(tmp_path / "g.txt")
    cfg_file.write_text("game.path = missing.txt\nlearner.K = 3\nrun.seeds = 1\n")
    with pytest.raises(harness.ConfigError):
        harness.parse_config(cfg_file)


def test_general_sum_keys(tmp_path):
    cfg = harness.parse_config_text("game.S = 2\ngame.H = 2\ngame.actions = 2,2,2\nlearner.K = 4\nrun.seeds = 0\n")
    assert cfg.is_multi and cfg.game.actions == (2, 2, 2)
    with pytest.raises(harness.ConfigError):
        harness.parse_config_text("game.S = 2\ngame.H = 2\ngame.A = 2\ngame.actions = 2,2\nlearner.K = 4\nrun.seeds = 0\n")


# ---------------------------------------------------------------------------
# runs


def test_single_seed_run_layout(tmp_path):
    cfg = make_cfg(tmp_path, K=10)
    rows = harness.run_experiment(cfg)
    assert [r["status"] for r in rows] == ["ok"]
    lines = (tmp_path / "out" / "seed_1" / "metrics.csv").read_text().splitlines()
    assert len(lines) == 11 and lines[0] == ",".join(CSV_HEADER)
    m = RunMetrics.read_csv(tmp_path / "out" / "seed_1" / "metrics.csv")
    assert m.episode == list(range(1, 11)) and m.samples.tolist() == list(range(2, 21, 2))
    assert m.invariant_violations() == []
    have_gap = [k for k, g in zip(m.episode, m.nash_gap) if not math.isnan(g)]
    assert have_gap == [1, 2, 4, 8, 10]
    assert (tmp_path / "out" / "summary.csv").exists() and (tmp_path / "out" / "config.txt").exists()
    assert (tmp_path / "out" / "seed_1" / "checkpoint.txt").exists()


def test_run_matches_direct_learner(tmp_path):
    cfg = make_cfg(tmp_path, K=64, seeds="7")
    harness.run_experiment(cfg)
    g = generate_random(3, (2, 2, 2, 2))
    st = init_state(g.dims, LearnerConfig(64))
    gaps, ngs = [], {}
    for k in range(1, 65):
        pi = st.pi.copy()
        gaps.append(run_episode(st, g, episode_rng(7, k)).value_gap)
        if k in (1, 2, 4, 8, 16, 32, 64):
            pair = marginals(pi)
            ngs[k] = nash_gap(g, pair.mu, pair.nu)
    m = RunMetrics.read_csv(tmp_path / "out" / "seed_7" / "metrics.csv")
    assert m.value_gap == gaps
    for k, v in ngs.items():
        assert m.nash_gap[k - 1] == v


def test_reruns_are_byte_identical(tmp_path):
    outs = []
    for name in ("a", "b"):
        harness.run_experiment(make_cfg(tmp_path, K=40, seeds="1, 2", name=name))
        # checkpoints record the output directory, the only intended difference
        outs.append([(tmp_path / name / f"seed_{s}" / f).read_bytes().replace(str(tmp_path / name).encode(), b"")
                     for s in (1, 2) for f in ("metrics.csv", "checkpoint.txt")] +
                    [(tmp_path / name / "summary.csv").read_bytes()])
    assert outs[0] == outs[1]


def test_parallel_matches_serial(tmp_path):
    serial = harness.run_experiment(make_cfg(tmp_path, K=30, seeds="1, 2, 3, 4", name="s"))
    par = harness.run_experiment(make_cfg(tmp_path, K=30, seeds="1, 2, 3, 4", name="p",
                                          extra="run.parallelism = 4\n"))
    assert serial == par
    for s in (1, 2, 3, 4):
        assert (tmp_path / "s" / f"seed_{s}" / "metrics.csv").read_bytes() == \
               (tmp_path / "p" / f"seed_{s}" / "metrics.csv").read_bytes()


def test_failing_seed_is_isolated(tmp_path, monkeypatch):
    real = harness.episode_rng

    def flaky(seed, k, stream=0):
        if seed == 2 and k == 5:
            raise RuntimeError("boom")
        return real(seed, k, stream)

    monkeypatch.setattr(harness, "episode_rng", flaky)
    rows = harness.run_experiment(make_cfg(tmp_path, K=8, seeds="1, 2, 3"))
    assert [r["status"] for r in rows] == ["ok", "error", "ok"]
    assert "boom" in rows[1]["error"]
    assert [r["seed"] for r in harness.read_summary(tmp_path / "out" / "summary.csv")] == ["1", "2", "3"]


def test_best_episode_policy_is_the_deployed_one(tmp_path):
    cfg = make_cfg(tmp_path, K=50, seeds="5")
    row = harness.run_experiment(cfg)[0]
    m = RunMetrics.read_csv(tmp_path / "out" / "seed_5" / "metrics.csv")
    k_star = int(row["best_episode"])
    assert k_star == int(np.argmin(m.value_gap)) + 1
    _, _, _, book = harness.load_checkpoint(tmp_path / "out" / "seed_5" / "checkpoint.txt")
    g = generate_random(3, (2, 2, 2, 2))
    pair = marginals(book.best_pi)
    assert float(row["nash_gap_selected"]) == nash_gap(g, pair.mu, pair.nu)


def test_general_sum_run(tmp_path):
    text = f"game.S = 2\ngame.H = 2\ngame.actions = 2,2,2\nlearner.K = 20\nrun.seeds = 0\nrun.out = {tmp_path / 'm'}\n"
    rows = harness.run_experiment(harness.parse_config_text(text))
    assert rows[0]["status"] == "ok"
    m = RunMetrics.read_csv(tmp_path / "m" / "seed_0" / "metrics.csv")
    assert len(m) == 20 and m.invariant_violations() == []


def test_saved_general_sum_game(tmp_path):
    from menashql.multi import dumps_general_game
    (tmp_path / "g.txt").write_text(dumps_general_game(generate_random_general(1, 2, (2, 2), 2)))
    text = f"game.path = g.txt\nlearner.K = 5\nrun.seeds = 0\nrun.out = {tmp_path / 'm'}\n"
    cfg = harness.parse_config_text(text, tmp_path)
    assert harness.run_experiment(cfg)[0]["status"] == "ok"


# ---------------------------------------------------------------------------
# resume


@pytest.mark.parametrize("multi", [False, True])
def test_resume_reproduces_uninterrupted_run(tmp_path, multi):
    extra = "run.keep_checkpoints = true\n"
    if multi:
        text = f"game.S = 2\ngame.H = 2\ngame.actions = 2,2\nlearner.K = 40\nrun.seeds = 3\n{extra}"
        full_cfg = harness.parse_config_text(text + f"run.out = {tmp_path / 'full'}\n")
        part_cfg = harness.parse_config_text(text + f"run.out = {tmp_path / 'part'}\n")
    else:
        full_cfg = make_cfg(tmp_path, K=40, seeds="3", extra=extra, name="full")
        part_cfg = make_cfg(tmp_path, K=40, seeds="3", extra=extra, name="part")
    harness.run_experiment(full_cfg)
    harness.run_experiment(part_cfg)
    sdir = tmp_path / "part" / "seed_3"
    # simulate a crash after episode 16: drop later rows and checkpoints
    lines = (sdir / "metrics.csv").read_text().splitlines(keepends=True)
    (sdir / "metrics.csv").write_text("".join(lines[:17]) + "17,garbage\n")
    for p in (sdir / "checkpoints").glob("*.txt"):
        if int(p.stem.split("_")[1]) > 16:
            p.unlink()
    (sdir / "checkpoint.txt").unlink()
    row = harness.resume(sdir / "checkpoints" / "ckpt_000000000016.txt")
    assert row["status"] == "ok"
    fdir = tmp_path / "full" / "seed_3"
    for name in ("metrics.csv", "checkpoint.txt", "checkpoints/ckpt_000000000032.txt"):
        a = (fdir / name).read_text().replace(str(tmp_path / "full"), "")
        b = (sdir / name).read_text().replace(str(tmp_path / "part"), "")
        assert a == b, name
    assert harness.read_summary(tmp_path / "part" / "summary.csv") == \
        harness.read_summary(tmp_path / "full" / "summary.csv")


def test_checkpoint_size_fixed_over_run(tmp_path):
    cfg = make_cfg(tmp_path, K=64, extra="run.keep_checkpoints = true\n")
    harness.run_experiment(cfg)
    sizes = {p.stat().st_size for p in (tmp_path / "out" / "seed_1" / "checkpoints").glob("*.txt")}
    assert len(sizes) == 1


def test_load_checkpoint_rejects_plain_state(tmp_path):
    from menashql.learner import save_state
    save_state(init_state((2, 2, 2, 2), LearnerConfig(3)), tmp_path / "s.txt")
    with pytest.raises(harness.ConfigError):
        harness.load_checkpoint(tmp_path / "s.txt")


# ---------------------------------------------------------------------------
# sweeps


def test_sweep_product(tmp_path):
    base = harness.parse_pairs(BASE.format(K=6, seeds="1, 2", out=tmp_path / "unused"))
    axes = harness.parse_grid("learner.c_b = 0.5 1.0 2.0\n")
    rows = harness.sweep(base, axes, tmp_path / "sw")
    assert len(rows) == 6 and all(r["status"] == "ok" for r in rows)
    lines = (tmp_path / "sw" / "sweep_summary.csv").read_text().splitlines()
    assert len(lines) == 7 and lines[0].startswith("cell,overrides,seed")
    assert {r["overrides"] for r in rows} == {"learner.c_b=0.5", "learner.c_b=1.0", "learner.c_b=2.0"}
    assert (tmp_path / "sw" / "cell_002" / "seed_2" / "metrics.csv").exists()


def test_sweep_empty_grid_is_one_cell(tmp_path):
    base = harness.parse_pairs(BASE.format(K=3, seeds="1", out=tmp_path / "unused"))
    rows = harness.sweep(base, harness.parse_grid(""), tmp_path / "sw")
    assert len(rows) == 1 and rows[0]["cell"] == "0" and rows[0]["overrides"] == ""


def test_sweep_invalid_cell_does_not_stop_others(tmp_path):
    base = harness.parse_pairs(BASE.format(K=3, seeds="1", out=tmp_path / "unused"))
    rows = harness.sweep(base, harness.parse_grid("learner.delta = 0.1 2.0 0.2\n"), tmp_path / "sw")
    assert [r["status"] for r in rows] == ["ok", "config_error", "ok"]
    assert "learner.delta" in rows[1]["error"]


def test_grid_axis_without_values():
    with pytest.raises(harness.ConfigError):
        harness.parse_grid("learner.c_b =\n")
