"""In-repo environments: CartPole, MountainCar, Acrobot, TextGrid.

Classic-control dynamics follow the canonical Gym definitions so return
scales stay comparable. TextGrid is a minimal language-conditioned grid
task exercising the instruction-prefix pathway. The API is functional:
``step`` returns the step result together with the successor state, and
stepping a finished episode raises.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor_core import RngStream

ENV_IDS = ("cartpole", "mountaincar", "acrobot", "textgrid")


class EpisodeDoneError(RuntimeError):
    """step() called on a finished episode."""


@dataclass(frozen=True)
class EnvState:
    env_id: str
    obs: np.ndarray
    step_index: int
    done: bool
    instruction: str | None = None
    internal: np.ndarray | None = None


@dataclass(frozen=True)
class StepResult:
    next_obs: np.ndarray
    reward: float
    done: bool
    truncated: bool


_SPECS = {
    #            actions, obs_dim, max_steps
    "cartpole": (2, 4, 500),
    "mountaincar": (3, 2, 200),
    "acrobot": (3, 6, 500),
    "textgrid": (4, 4, 100),
}

# Max achievable return, and the 10%-of-max floor used for failure
# accounting. Negative-return tasks use a near-worst-case floor instead,
# since 10% of a negative maximum is meaningless.
MAX_RETURN = {"cartpole": 500.0, "mountaincar": -90.0, "acrobot": -60.0, "textgrid": 1.0}
FAILURE_FLOOR = {"cartpole": 50.0, "mountaincar": -199.0, "acrobot": -495.0,
                 "textgrid": 0.1}


def _check_env(env_id: str) -> None:
    if env_id not in _SPECS:
        raise KeyError(f"unknown environment id {env_id!r}")


def action_count(env_id: str) -> int:
    _check_env(env_id)
    return _SPECS[env_id][0]


def obs_dim(env_id: str) -> int:
    _check_env(env_id)
    return _SPECS[env_id][1]


def max_steps(env_id: str) -> int:
    _check_env(env_id)
    return _SPECS[env_id][2]


# --- CartPole (Euler, dt = 0.02) ---

_CP_GRAVITY = 9.8
_CP_MASSCART = 1.0
_CP_MASSPOLE = 0.1
_CP_TOTAL_MASS = _CP_MASSCART + _CP_MASSPOLE
_CP_LENGTH = 0.5
_CP_POLEMASS_LENGTH = _CP_MASSPOLE * _CP_LENGTH
_CP_FORCE = 10.0
_CP_DT = 0.02
_CP_X_LIMIT = 2.4
_CP_THETA_LIMIT = 12 * math.pi / 180


def _cartpole_step(obs: np.ndarray, action: int) -> np.ndarray:
    x, x_dot, theta, theta_dot = obs
    force = _CP_FORCE if action == 1 else -_CP_FORCE
    cos_t = math.cos(theta)
    sin_t = math.sin(theta)
    temp = (force + _CP_POLEMASS_LENGTH * theta_dot ** 2 * sin_t) / _CP_TOTAL_MASS
    theta_acc = (_CP_GRAVITY * sin_t - cos_t * temp) / (
        _CP_LENGTH * (4.0 / 3.0 - _CP_MASSPOLE * cos_t ** 2 / _CP_TOTAL_MASS))
    x_acc = temp - _CP_POLEMASS_LENGTH * theta_acc * cos_t / _CP_TOTAL_MASS
    return np.array([
        x + _CP_DT * x_dot,
        x_dot + _CP_DT * x_acc,
        theta + _CP_DT * theta_dot,
        theta_dot + _CP_DT * theta_acc,
    ])


# --- MountainCar ---

_MC_MIN_POS, _MC_MAX_POS = -1.2, 0.6
_MC_MAX_SPEED = 0.07
_MC_GOAL = 0.5
_MC_FORCE = 0.001
_MC_GRAVITY = 0.0025


# --- Acrobot (book dynamics, RK4, dt = 0.2) ---

_AB_DT = 0.2
_AB_L1 = 1.0
_AB_M1 = _AB_M2 = 1.0
_AB_LC1 = _AB_LC2 = 0.5
_AB_I1 = _AB_I2 = 1.0
_AB_G = 9.8
_AB_MAX_VEL1 = 4 * math.pi
_AB_MAX_VEL2 = 9 * math.pi


def acrobot_dsdt(s: np.ndarray, torque: float) -> np.ndarray:
    """Two-link underactuated dynamics; s = [theta1, theta2, dtheta1, dtheta2]."""
    theta1, theta2, dtheta1, dtheta2 = s
    d1 = (_AB_M1 * _AB_LC1 ** 2
          + _AB_M2 * (_AB_L1 ** 2 + _AB_LC2 ** 2
                      + 2 * _AB_L1 * _AB_LC2 * math.cos(theta2))
          + _AB_I1 + _AB_I2)
    d2 = _AB_M2 * (_AB_LC2 ** 2 + _AB_L1 * _AB_LC2 * math.cos(theta2)) + _AB_I2
    phi2 = _AB_M2 * _AB_LC2 * _AB_G * math.cos(theta1 + theta2 - math.pi / 2)
    phi1 = (-_AB_M2 * _AB_L1 * _AB_LC2 * dtheta2 ** 2 * math.sin(theta2)
            - 2 * _AB_M2 * _AB_L1 * _AB_LC2 * dtheta2 * dtheta1 * math.sin(theta2)
            + (_AB_M1 * _AB_LC1 + _AB_M2 * _AB_L1) * _AB_G * math.cos(theta1 - math.pi / 2)
            + phi2)
    ddtheta2 = ((torque + d2 / d1 * phi1
                 - _AB_M2 * _AB_L1 * _AB_LC2 * dtheta1 ** 2 * math.sin(theta2)
                 - phi2)
                / (_AB_M2 * _AB_LC2 ** 2 + _AB_I2 - d2 ** 2 / d1))
    ddtheta1 = -(d2 * ddtheta2 + phi1) / d1
    return np.array([dtheta1, dtheta2, ddtheta1, ddtheta2])


def acrobot_energy(s: np.ndarray) -> float:
    """Total mechanical energy, for conservation checks under zero torque."""
    theta1, theta2, d1, d2 = s
    v1sq = _AB_LC1 ** 2 * d1 ** 2
    v2sq = (_AB_L1 ** 2 * d1 ** 2 + _AB_LC2 ** 2 * (d1 + d2) ** 2
            + 2 * _AB_L1 * _AB_LC2 * d1 * (d1 + d2) * math.cos(theta2))
    ke = (0.5 * _AB_M1 * v1sq + 0.5 * _AB_I1 * d1 ** 2
          + 0.5 * _AB_M2 * v2sq + 0.5 * _AB_I2 * (d1 + d2) ** 2)
    y1 = -_AB_LC1 * math.cos(theta1)
    y2 = -_AB_L1 * math.cos(theta1) - _AB_LC2 * math.cos(theta1 + theta2)
    pe = _AB_G * (_AB_M1 * y1 + _AB_M2 * y2)
    return ke + pe


def rk4_step(f, s: np.ndarray, dt: float) -> np.ndarray:
    k1 = f(s)
    k2 = f(s + 0.5 * dt * k1)
    k3 = f(s + 0.5 * dt * k2)
    k4 = f(s + dt * k3)
    return s + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def _wrap(x: float, low: float, high: float) -> float:
    diff = high - low
    while x > high:
        x -= diff
    while x < low:
        x += diff
    return x


def _acrobot_obs(internal: np.ndarray) -> np.ndarray:
    t1, t2, d1, d2 = internal
    return np.array([math.cos(t1), math.sin(t1), math.cos(t2), math.sin(t2), d1, d2])


# --- TextGrid ---

_TG_SIZE = 7
_TG_STEP_PENALTY = 0.01
_TG_MOVES = {0: (-1, 0), 1: (1, 0), 2: (0, -1), 3: (0, 1)}  # up, down, left, right


def _textgrid_obs(internal: np.ndarray) -> np.ndarray:
    return internal.astype(np.float64)


def textgrid_instruction(row: int, col: int) -> str:
    return f"go to the red cell at row {row} column {col}"


# --- functional API ---

def reset(env_id: str, rng: RngStream) -> EnvState:
    _check_env(env_id)
    if env_id == "cartpole":
        obs = rng.uniform(-0.05, 0.05, size=4)
        return EnvState(env_id, obs, 0, False)
    if env_id == "mountaincar":
        obs = np.array([rng.uniform(-0.6, -0.4), 0.0])
        return EnvState(env_id, obs, 0, False)
    if env_id == "acrobot":
        internal = rng.uniform(-0.1, 0.1, size=4)
        return EnvState(env_id, _acrobot_obs(internal), 0, False, internal=internal)
    # textgrid: fixed start, sampled target with a matching instruction
    while True:
        tr, tc = int(rng.integers(0, _TG_SIZE)), int(rng.integers(0, _TG_SIZE))
        if (tr, tc) != (0, 0):
            break
    internal = np.array([0, 0, tr, tc], dtype=np.int64)
    return EnvState(env_id, _textgrid_obs(internal), 0, False,
                    instruction=textgrid_instruction(tr, tc), internal=internal)


def step(state: EnvState, action: int, rng: RngStream | None = None):
    """Advance one step; returns (StepResult, next EnvState)."""
    if state.done:
        raise EpisodeDoneError("episode is finished; call reset()")
    env_id = state.env_id
    n_act, _, cap = _SPECS[env_id]
    if not (0 <= action < n_act):
        raise ValueError(f"action {action} outside [0, {n_act})")
    idx = state.step_index + 1

    if env_id == "cartpole":
        obs = _cartpole_step(state.obs, action)
        terminated = bool(abs(obs[0]) > _CP_X_LIMIT or abs(obs[2]) > _CP_THETA_LIMIT)
        truncated = not terminated and idx >= cap
        reward = 1.0
        nxt = EnvState(env_id, obs, idx, terminated or truncated)
        return StepResult(obs, reward, terminated, truncated), nxt

    if env_id == "mountaincar":
        pos, vel = state.obs
        vel = vel + (action - 1) * _MC_FORCE - math.cos(3 * pos) * _MC_GRAVITY
        vel = min(max(vel, -_MC_MAX_SPEED), _MC_MAX_SPEED)
        pos = min(max(pos + vel, _MC_MIN_POS), _MC_MAX_POS)
        if pos == _MC_MIN_POS and vel < 0:
            vel = 0.0
        obs = np.array([pos, vel])
        terminated = bool(pos >= _MC_GOAL)
        truncated = not terminated and idx >= cap
        nxt = EnvState(env_id, obs, idx, terminated or truncated)
        return StepResult(obs, -1.0, terminated, truncated), nxt

    if env_id == "acrobot":
        torque = float(action - 1)
        s = rk4_step(lambda v: acrobot_dsdt(v, torque), state.internal, _AB_DT)
        s = np.array([
            _wrap(s[0], -math.pi, math.pi),
            _wrap(s[1], -math.pi, math.pi),
            min(max(s[2], -_AB_MAX_VEL1), _AB_MAX_VEL1),
            min(max(s[3], -_AB_MAX_VEL2), _AB_MAX_VEL2),
        ])
        terminated = bool(-math.cos(s[0]) - math.cos(s[1] + s[0]) > 1.0)
        truncated = not terminated and idx >= cap
        reward = 0.0 if terminated else -1.0
        obs = _acrobot_obs(s)
        nxt = EnvState(env_id, obs, idx, terminated or truncated, internal=s)
        return StepResult(obs, reward, terminated, truncated), nxt

    # textgrid
    ar, ac, tr, tc = (int(v) for v in state.internal)
    dr, dc = _TG_MOVES[action]
    ar = min(max(ar + dr, 0), _TG_SIZE - 1)
    ac = min(max(ac + dc, 0), _TG_SIZE - 1)
    internal = np.array([ar, ac, tr, tc], dtype=np.int64)
    terminated = (ar, ac) == (tr, tc)
    truncated = not terminated and idx >= cap
    reward = -_TG_STEP_PENALTY + (1.0 if terminated else 0.0)
    obs = _textgrid_obs(internal)
    nxt = EnvState(env_id, obs, idx, terminated or truncated,
                   instruction=state.instruction, internal=internal)
    return StepResult(obs, reward, terminated, truncated), nxt
