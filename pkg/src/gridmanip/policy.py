"""Action selection over per-primitive, per-rotation Q-maps.

Two exploration schemes share the same selection core: a loss-adjusted
epsilon that tracks an exponential moving average of a bounded Boltzmann
transform of the training loss, and a plain decaying epsilon-greedy
baseline. Greedy selection is deterministic with lexicographic tie-breaking
(primitive order, rotation, row, column).
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from .gridsim import Action, PRIMITIVE_ORDER


class NoValidActionError(RuntimeError):
    """Every pose is masked out; the caller should end the episode."""


@dataclass(frozen=True)
class ExplorationState:
    epsilon: float = 0.9
    beta: float = 0.01
    sigma: float = 0.01          # inverse sensitivity of the loss transform
    alpha_scale: float = 1.0
    epsilon_init: float = 0.9

    def validate(self):
        if not (0.0 <= self.epsilon < 1.0 and 0.0 <= self.beta < 1.0):
            raise ValueError("epsilon and beta must lie in [0, 1)")
        if self.sigma <= 0 or self.alpha_scale <= 0:
            raise ValueError("sigma and alpha_scale must be positive")


def boltzmann_loss_term(loss: float, state: ExplorationState) -> float:
    """(1 - e^(-|a*L|/sigma)) / (1 + e^(-|a*L|/sigma)), in [0, 1).

    Algebraically tanh(|a*L| / (2 sigma)); clamped below 1 so the epsilon
    EMA can never saturate to 1 even when tanh rounds up.
    """
    f = math.tanh(abs(state.alpha_scale * loss) / (2.0 * state.sigma))
    return min(f, np.nextafter(1.0, 0.0))


def update_exploration(state: ExplorationState, loss: float) -> ExplorationState:
    """EMA step: epsilon <- beta * f(loss) + (1 - beta) * epsilon."""
    f = boltzmann_loss_term(loss, state)
    return replace(state, epsilon=state.beta * f + (1.0 - state.beta) * state.epsilon)


def epsilon_greedy_decay(step: int, floor: float = 0.1, span: float = 0.4,
                         rate: float = 0.9998) -> float:
    """Ablation baseline schedule: floor + span * rate**step."""
    return floor + span * rate ** step


def _valid_counts(q_maps, masks):
    counts = []
    for prim in PRIMITIVE_ORDER:
        if prim not in q_maps:
            continue
        rotations = q_maps[prim].shape[0]
        counts.append((prim, rotations * int(masks[prim].sum())))
    return counts


def _uniform_valid(q_maps, masks, rng):
    counts = _valid_counts(q_maps, masks)
    total = sum(c for _, c in counts)
    if total == 0:
        raise NoValidActionError("no valid pose under any primitive mask")
    draw = int(rng.integers(total))
    for prim, count in counts:
        if draw >= count:
            draw -= count
            continue
        rotations = q_maps[prim].shape[0]
        n_cells = count // rotations
        r, cell = divmod(draw, n_cells)
        ys, xs = np.nonzero(masks[prim])
        y, x = int(ys[cell]), int(xs[cell])
        return Action(primitive=prim, x=x, y=y, theta_index=r,
                      q_value=float(q_maps[prim][r, y, x]))
    raise AssertionError("unreachable")


def greedy_action(q_maps: dict, masks: dict) -> Action:
    """Deterministic argmax over mask-valid (primitive, rotation, y, x)
    entries; ties resolve to the lowest lexicographic index."""
    best = None
    best_q = -np.inf
    for prim in PRIMITIVE_ORDER:
        if prim not in q_maps:
            continue
        q = q_maps[prim]
        if not masks[prim].any():
            continue
        masked = np.where(masks[prim][None, :, :], q, -np.inf)
        flat = int(np.argmax(masked))
        r, y, x = np.unravel_index(flat, q.shape)
        if masked[r, y, x] > best_q:
            best_q = float(masked[r, y, x])
            best = Action(primitive=prim, x=int(x), y=int(y), theta_index=int(r),
                          q_value=best_q)
    if best is None:
        raise NoValidActionError("no valid pose under any primitive mask")
    return best


def select_action(q_maps: dict, masks: dict, state: ExplorationState,
                  rng: np.random.Generator) -> Action:
    """Epsilon-gated choice between a uniform draw over valid entries and
    the greedy argmax. The returned action carries the Q at its entry."""
    if float(rng.random()) < state.epsilon:
        return _uniform_valid(q_maps, masks, rng)
    return greedy_action(q_maps, masks)
