import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dnad.controller import (
    CIFAR10, IMAGENET, TRAJECTORY_COLUMNS, ControllerConfig, ControllerState, TrajectoryLog, control_step,
    observe_prune, should_snapshot, terminated, update_coefficients,
)
from oracles import reference_trajectory

DESK = ControllerConfig(gamma0=1e-3, gamma_grow=1.05, gamma_max=0.05, n_expect=0.5, interval=20)


def replay(counts, cfg):
    s = ControllerState.initial(cfg)
    out = []
    for n in counts:
        s = control_step(s, n, cfg)
        out.append((s.gamma, s.mu, s.tau, s.n_bar))
    return out


def ref(counts, cfg):
    return reference_trajectory(counts, cfg.gamma0, cfg.gamma_grow, cfg.gamma_shrink, cfg.gamma_max,
                                cfg.tau_max, cfg.mu0, cfg.mu_grow, cfg.n_expect, cfg.rho)


# ---------------------------------------------------------------- examples

def test_observe_examples():
    cfg = ControllerConfig()
    s = observe_prune(ControllerState.initial(cfg), 1, cfg)
    assert abs(s.n_bar - 0.1) < 1e-15
    s = observe_prune(s, 0, cfg)
    assert abs(s.n_bar - 0.09) < 1e-15
    cfg0 = ControllerConfig(rho=0.0)
    assert observe_prune(ControllerState(1e-4, 0.01, n_bar=0.7), 3, cfg0).n_bar == 3
    with pytest.raises(ValueError):
        observe_prune(s, -1, cfg)


def test_update_grow_and_floor():
    cfg = ControllerConfig()
    s = update_coefficients(ControllerState(gamma=1e-4, mu=0.01, n_bar=0.001), cfg)
    assert abs(s.gamma - 1.01e-4) < 1e-18 and s.tau == 0
    s = update_coefficients(ControllerState(gamma=1e-4, mu=0.01, n_bar=0.01), cfg)
    assert s.gamma == 1e-4
    s = update_coefficients(ControllerState(gamma=2e-4, mu=0.01, n_bar=0.01), cfg)
    assert abs(s.gamma - 1.98e-4) < 1e-18


def test_saturation_escape_after_51_updates():
    cfg = ControllerConfig()
    s = ControllerState(gamma=cfg.gamma_max, mu=0.01)
    for k in range(1, 51):
        s = update_coefficients(s, cfg)
        assert s.tau == k and s.mu == 0.01 and s.gamma == cfg.gamma_max
    s = update_coefficients(s, cfg)
    assert s.mu == 0.01 * 1.5 and s.tau == 0 and s.gamma == cfg.gamma_max


def test_tau_resets_when_virtual_gamma_drops():
    cfg = ControllerConfig()
    s = ControllerState(gamma=cfg.gamma_max, mu=0.01, tau=30, n_bar=0.0)
    s = update_coefficients(s, cfg)
    assert s.tau == 31
    s = update_coefficients(ControllerState(gamma=s.gamma, mu=s.mu, tau=s.tau, n_bar=1.0), cfg)
    assert s.tau == 0 and abs(s.gamma - 0.99 * cfg.gamma_max) < 1e-18


def test_gamma_exactly_at_cap_is_not_saturated():
    cfg = ControllerConfig(gamma0=0.01 / 1.01 ** 2, gamma_max=0.01)
    s = ControllerState(gamma=0.01 / 1.01, mu=0.01)
    s = update_coefficients(s, cfg)
    # 1.01 * (0.01 / 1.01) rounds to exactly 0.01 here, which does not count
    assert 1.01 * (0.01 / 1.01) == 0.01
    assert s.tau == 0


def test_snapshot_counter():
    cfg = ControllerConfig(interval=3)
    s = ControllerState.initial(cfg)
    seen = []
    for _ in range(8):
        due, s = should_snapshot(s, cfg)
        seen.append(due)
    assert seen == [False, False, False, True, False, False, False, True]
    cfg0 = ControllerConfig(interval=0)
    s = ControllerState.initial(cfg0)
    for _ in range(5):
        due, s = should_snapshot(s, cfg0)
        assert due


def test_terminated_boundary():
    cfg = ControllerConfig()
    assert not terminated(201.0, cfg)
    assert terminated(200.0, cfg)
    assert not terminated(1e-9, ControllerConfig(ls_min=0.0))


def test_config_validation():
    for bad in (dict(gamma_grow=1.0), dict(gamma_shrink=1.0), dict(mu_grow=1.0), dict(rho=1.0),
                dict(n_expect=0.0), dict(gamma0=0.02), dict(eps=0.0), dict(interval=-1)):
        with pytest.raises(ValueError):
            ControllerConfig(**bad)
    assert IMAGENET.gamma0 == 1e-6 and IMAGENET.rho == 0.99 and CIFAR10.ls_min == 200.0


# ----------------------------------------------------------- conformance

@pytest.mark.parametrize("cfg", [CIFAR10, IMAGENET, DESK, ControllerConfig(tau_max=3, gamma_max=2e-4)])
def test_replay_matches_reference_bitwise(cfg):
    rng = np.random.default_rng(7)
    counts = rng.choice([0, 0, 0, 0, 1, 2, 5], size=10_000).tolist()
    counts[2000:3500] = [0] * 1500
    assert replay(counts, cfg) == ref(counts, cfg)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 6), min_size=1, max_size=400), st.sampled_from([CIFAR10, IMAGENET, DESK]))
def test_invariants_hold_on_any_sequence(counts, cfg):
    s = ControllerState.initial(cfg)
    for n in counts:
        prev = s
        s = control_step(s, n, cfg)
        assert cfg.gamma0 <= s.gamma <= cfg.gamma_max
        assert 0 <= s.tau <= cfg.tau_max
        assert s.mu >= prev.mu
        assert s.n_bar >= 0
    assert replay(counts, cfg) == replay(list(counts), cfg)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 5), st.integers(1, 60))
def test_pinned_gamma_grows_mu(tau_max, extra):
    cfg = ControllerConfig(tau_max=tau_max)
    s = ControllerState(gamma=cfg.gamma_max, mu=cfg.mu0)
    for _ in range(tau_max + 1):
        s = control_step(s, 0, cfg)
    assert s.mu == cfg.mu0 * cfg.mu_grow and s.tau == 0
    for _ in range(extra * (tau_max + 1)):
        s = control_step(s, 0, cfg)
    assert s.mu == pytest.approx(cfg.mu0 * cfg.mu_grow ** (1 + extra), rel=1e-12)


# --------------------------------------------------------------- tracking

def simulate(cfg, scale, steps, seed, burn):
    """Prune counts drawn as Poisson with rate scale * gamma * (L_A + mu)."""
    rng = np.random.default_rng(seed)
    s = ControllerState.initial(cfg)
    n_bar = []
    for t in range(steps):
        la = 2.3 * np.exp(-2 * t / steps) + 0.3
        s = control_step(s, int(rng.poisson(scale * s.gamma * (la + s.mu))), cfg)
        if t >= burn:
            n_bar.append(s.n_bar)
    return np.asarray(n_bar)


@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("scale", [40.0, 100.0])
def test_smoothed_count_tracks_target(seed, scale):
    n_bar = simulate(DESK, scale, 20_000, seed, 2_000)
    assert 0.5 <= n_bar.mean() / DESK.n_expect <= 2.0


def test_default_settings_oscillate_around_target():
    n_bar = simulate(CIFAR10, 0.5, 60_000, 0, 10_000)
    above = n_bar >= CIFAR10.n_expect
    assert 0.3 < above.mean() < 0.7
    assert np.count_nonzero(above[1:] & ~above[:-1]) > 100


# -------------------------------------------------------------------- log

def test_trajectory_csv_columns():
    log = TrajectoryLog()
    s = ControllerState.initial(DESK)
    for step, n in enumerate([0, 2, 1]):
        s = control_step(s, n, DESK)
        log.append(step, s, n, 100.0 - step, 2.0)
    rows = list(csv.DictReader(io.StringIO(log.to_csv())))
    assert tuple(rows[0]) == TRAJECTORY_COLUMNS == ("step", "gamma", "mu", "tau", "n_prune", "n_bar", "L_S", "L_A")
    assert len(rows) == 3 and float(rows[2]["gamma"]) == s.gamma
