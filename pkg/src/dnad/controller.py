"""Closed-loop sparsity controller.

The controller watches how many operators were pruned each step and adapts
the multiplicative coefficient ``gamma`` (and, when ``gamma`` stays
saturated, the additive coefficient ``mu``) so that the smoothed prune
count tracks ``n_expect``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, replace


@dataclass(frozen=True)
class ControllerConfig:
    gamma0: float = 1e-4
    gamma_grow: float = 1.01
    gamma_shrink: float = 0.99
    gamma_max: float = 0.01
    tau_max: int = 50
    mu0: float = 0.01
    mu_grow: float = 1.5
    n_expect: float = 0.003
    rho: float = 0.90
    eps: float = 0.01
    interval: int = 500
    ls_min: float = 200.0

    def __post_init__(self):
        if not self.gamma_grow > 1 > self.gamma_shrink > 0:
            raise ValueError("need gamma_grow > 1 > gamma_shrink > 0")
        if self.mu_grow <= 1:
            raise ValueError("mu_grow must exceed 1")
        if not 0 <= self.rho < 1:
            raise ValueError("rho must lie in [0, 1)")
        if self.n_expect <= 0:
            raise ValueError("n_expect must be positive")
        if not 0 < self.gamma0 <= self.gamma_max:
            raise ValueError("need 0 < gamma0 <= gamma_max")
        if self.mu0 < 0:
            raise ValueError("mu0 must be non-negative")
        if not 0 < self.eps < 1:
            raise ValueError("eps must lie in (0, 1)")
        if self.interval < 0 or self.tau_max < 0:
            raise ValueError("interval and tau_max must be non-negative")


CIFAR10 = ControllerConfig()
IMAGENET = ControllerConfig(gamma0=1e-6, gamma_max=1e-4, rho=0.99, n_expect=2e-4)


@dataclass(frozen=True)
class ControllerState:
    gamma: float
    mu: float
    tau: int = 0
    n_bar: float = 0.0
    step: int = 0

    @classmethod
    def initial(cls, cfg: ControllerConfig) -> "ControllerState":
        return cls(gamma=cfg.gamma0, mu=cfg.mu0)


def observe_prune(state: ControllerState, n_prune: int, cfg: ControllerConfig) -> ControllerState:
    if n_prune < 0:
        raise ValueError("prune count must be non-negative")
    return replace(state, n_bar=(1 - cfg.rho) * n_prune + cfg.rho * state.n_bar)


def update_coefficients(state: ControllerState, cfg: ControllerConfig) -> ControllerState:
    """Adapt gamma/mu from the smoothed prune count.

    The raw product ``k*gamma`` or ``phi*gamma`` is floored at ``gamma0``;
    saturation is judged on that unclamped value, and the stored gamma is
    then capped at ``gamma_max``.
    """
    if state.n_bar >= cfg.n_expect:
        gamma = max(cfg.gamma_shrink * state.gamma, cfg.gamma0)
    else:
        gamma = cfg.gamma_grow * state.gamma
    tau = state.tau + 1 if gamma > cfg.gamma_max else 0
    mu = state.mu
    if tau > cfg.tau_max:
        mu = cfg.mu_grow * mu
        tau = 0
    return replace(state, gamma=min(gamma, cfg.gamma_max), mu=mu, tau=tau)


def should_snapshot(state: ControllerState, cfg: ControllerConfig) -> tuple[bool, ControllerState]:
    """Advance the interval counter; returns (due, new_state)."""
    step = state.step + 1
    if step > cfg.interval:
        return True, replace(state, step=0)
    return False, replace(state, step=step)


def terminated(ls: float, cfg: ControllerConfig) -> bool:
    return ls <= cfg.ls_min


def control_step(state: ControllerState, n_prune: int, cfg: ControllerConfig) -> ControllerState:
    return update_coefficients(observe_prune(state, n_prune, cfg), cfg)


TRAJECTORY_COLUMNS = ("step", "gamma", "mu", "tau", "n_prune", "n_bar", "L_S", "L_A")


class TrajectoryLog:
    """Per-step controller record, serialised as CSV."""

    def __init__(self):
        self.rows: list[dict] = []

    def append(self, step: int, state: ControllerState, n_prune: int, ls: float, la: float) -> None:
        self.rows.append({"step": step, "gamma": state.gamma, "mu": state.mu, "tau": state.tau,
                          "n_prune": n_prune, "n_bar": state.n_bar, "L_S": ls, "L_A": la})

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=TRAJECTORY_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        return buf.getvalue()


def config_dict(cfg: ControllerConfig) -> dict:
    return asdict(cfg)
