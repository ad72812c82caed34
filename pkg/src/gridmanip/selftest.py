"""Numerical self-checks: analytic gradients vs central finite differences,
and the sliding-window convolution vs brute-force double-loop summation.

Both suites are deliberately independent re-derivations: the finite
difference probe only ever calls the forward path, and the reference
convolution below shares no code with reward.convolve_same.
"""

from dataclasses import dataclass

import numpy as np

from .gridsim import Action, Observation, PRIMITIVE_ORDER
from .qfunc import (PrevActionContext, QNetwork, TrainHyper, _PARAM_NAMES,
                    build_target_map, compute_target, forward_rotation,
                    robust_loss, rotate_grid_grad, stack_input)
from .replay import Transition
from .reward import RewardMap, RewardParams, convolve_same, gaussian_kernel


@dataclass
class CheckReport:
    name: str
    passed: bool
    worst: float
    detail: str


def brute_force_convolve(grid, kernel):
    """Reference zero-padded 'same' convolution, four explicit loops."""
    h, w = grid.shape
    kh, kw = kernel.shape
    ky, kx = kh // 2, kw // 2
    out = np.zeros_like(grid)
    for y in range(h):
        for x in range(w):
            acc = 0.0
            for i in range(kh):
                for j in range(kw):
                    sy = y - (i - ky)
                    sx = x - (j - kx)
                    if 0 <= sy < h and 0 <= sx < w:
                        acc += kernel[i, j] * grid[sy, sx]
            out[y, x] = acc
    return out


def convolution_check(n_grids=200, max_size=32, seed=20240501,
                      tolerance=1e-12) -> CheckReport:
    """Random grids and anisotropic kernels: implementation vs brute force."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_grids):
        h = int(rng.integers(1, max_size + 1))
        w = int(rng.integers(1, max_size + 1))
        grid = rng.normal(size=(h, w))
        params = RewardParams(sigma_y=float(rng.uniform(0.5, 1.5)),
                              anisotropy=float(rng.uniform(1.0, 2.5)))
        kernel = gaussian_kernel(float(rng.uniform(0, 2 * np.pi)), params)
        diff = np.max(np.abs(convolve_same(grid, kernel)
                             - brute_force_convolve(grid, kernel)))
        worst = max(worst, float(diff))
    return CheckReport(name="convolution", passed=worst < tolerance, worst=worst,
                       detail=f"max |sliding - brute| = {worst:.3e} "
                              f"over {n_grids} grids (tol {tolerance:g})")


def _transition_loss(net, transition, hp):
    """Scalar loss of one transition plus the ReLU on/off pattern.

    The pattern lets the finite-difference probe reject steps that cross an
    activation kink, where central differences are invalid but the analytic
    gradient is exact.
    """
    x = stack_input(transition.observation, transition.prev_action_context)
    pred, cache, _ = forward_rotation(net, x, transition.action.primitive,
                                      transition.action.theta_index)
    y = compute_target(transition.r_t, transition.r_next, hp.gamma)
    targets = build_target_map(transition.reward_map, transition.action, y)
    mask = transition.reward_map.supervised_mask
    losses, _ = robust_loss(pred[mask] - targets[mask], hp.loss_alpha,
                            hp.loss_scale)
    z1, z2 = cache[1], cache[4]
    pattern = np.concatenate([(z1 > 0.0).ravel(), (z2 > 0.0).ravel()])
    return float(np.mean(losses)), pattern


def _transition_gradients(net, transition, hp):
    """Analytic dLoss/dparams for one transition (no update applied)."""
    x = stack_input(transition.observation, transition.prev_action_context)
    pred, cache, theta = forward_rotation(net, x, transition.action.primitive,
                                          transition.action.theta_index)
    y = compute_target(transition.r_t, transition.r_next, hp.gamma)
    targets = build_target_map(transition.reward_map, transition.action, y)
    mask = transition.reward_map.supervised_mask
    residuals = pred[mask] - targets[mask]
    _, dres = robust_loss(residuals, hp.loss_alpha, hp.loss_scale)
    dpred = np.zeros_like(pred)
    dpred[mask] = dres / residuals.size
    grads = {}
    net.stacks[transition.action.primitive].backward(
        cache, rotate_grid_grad(dpred, theta), grads)
    return grads


def random_transition(rng, h=6, w=6, rotations=4):
    """A synthetic finalized transition with smooth random inputs."""
    obs = Observation(channels=rng.uniform(0.0, 1.0, size=(3, h, w)))
    ctx_channels = np.zeros((3, h, w))
    ctx_channels[int(rng.integers(3)), int(rng.integers(h)),
                 int(rng.integers(w))] = rng.uniform(0.0, 1.0)
    primitive = PRIMITIVE_ORDER[int(rng.integers(3))]
    action = Action(primitive=primitive, x=int(rng.integers(w)),
                    y=int(rng.integers(h)),
                    theta_index=int(rng.integers(rotations)),
                    q_value=float(rng.uniform(0, 1)))
    grid = np.abs(rng.normal(size=(h, w)))
    mask = rng.random(size=(h, w)) < 0.4
    mask[action.y, action.x] = True
    return Transition(observation=obs,
                      prev_action_context=PrevActionContext(channels=ctx_channels),
                      action=action,
                      r_t=float(rng.uniform(0.1, 1.0)),
                      reward_map=RewardMap(grid=grid, supervised_mask=mask),
                      r_next=float(rng.uniform(0.0, 1.0)))


def gradient_check(n_draws=100, coords_per_draw=40, h=6, w=6, seed=20240502,
                   step=1e-4, tolerance=1e-4, exhaustive_first=True) -> CheckReport:
    """Central finite differences against the analytic backward pass.

    Each draw builds a fresh random network and transition and probes a
    random spread of parameter coordinates (every coordinate on the first
    draw when ``exhaustive_first``). Probes whose parameter step flips a
    ReLU unit are discarded: the loss is not smooth across the step there,
    so the central difference says nothing about the gradient. Relative
    error uses the larger of the two gradients as scale, with an absolute
    floor for near-zero pairs.
    """
    rng = np.random.default_rng(seed)
    hp = TrainHyper()
    worst = 0.0
    checked = skipped = 0
    for draw in range(n_draws):
        # Draw 0 probes every coordinate of the full-width stack; later draws
        # spread sampled coordinates over narrow stacks for speed.
        hidden = 16 if (exhaustive_first and draw == 0) else 4
        net = QNetwork.init(rng, in_channels=6, hidden_channels=hidden,
                            rotations=4)
        tr = random_transition(rng, h=h, w=w)
        grads = _transition_gradients(net, tr, hp)
        stack = net.stacks[tr.action.primitive]
        for name in _PARAM_NAMES:
            arr = getattr(stack, name)
            if exhaustive_first and draw == 0:
                coords = list(np.ndindex(arr.shape))
            else:
                flat = rng.choice(arr.size,
                                  size=min(coords_per_draw, arr.size),
                                  replace=False)
                coords = [np.unravel_index(i, arr.shape) for i in flat]
            for coord in coords:
                original = arr[coord]
                arr[coord] = original + step
                up, pattern_up = _transition_loss(net, tr, hp)
                arr[coord] = original - step
                down, pattern_down = _transition_loss(net, tr, hp)
                arr[coord] = original
                if not np.array_equal(pattern_up, pattern_down):
                    skipped += 1
                    continue
                numeric = (up - down) / (2.0 * step)
                analytic = grads[name][coord]
                scale = max(abs(numeric), abs(analytic))
                if scale < 1e-8:
                    continue
                checked += 1
                worst = max(worst, abs(numeric - analytic) / scale)
    passed = worst < tolerance and checked > 0.5 * (checked + skipped)
    return CheckReport(name="gradient", passed=passed, worst=worst,
                       detail=f"max relative error = {worst:.3e} over "
                              f"{checked} probes in {n_draws} draws "
                              f"({skipped} kink-crossing probes skipped, "
                              f"tol {tolerance:g})")


def run_all(fast=False):
    """The checks behind the ``selftest`` CLI subcommand."""
    checks = [
        convolution_check(n_grids=40 if fast else 200),
        gradient_check(n_draws=10 if fast else 100,
                       exhaustive_first=not fast),
    ]
    return checks
