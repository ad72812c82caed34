"""Step rewards and pixel-wise supervision maps.

The shaped reward is a product of a per-primitive weight, the primitive
success indicator and the overall task progress. The resulting scalar spike
is smeared over neighbouring poses with a rotated anisotropic Gaussian and
max-fused with the original spike; the smeared support doubles as the
supervised-pixel mask for training.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .gridsim import Primitive


@dataclass
class RewardParams:
    weights: dict = field(default_factory=lambda: {
        Primitive.PUSH: 0.5,
        Primitive.PICK: 1.0,
        Primitive.PLACE: 1.0,
    })
    sigma_y: float = 0.5
    anisotropy: float = 2.0      # sigma_x = anisotropy * sigma_y

    @property
    def sigma_x(self):
        return self.anisotropy * self.sigma_y

    @property
    def truncation(self):
        """Kernel half-width in cells."""
        return math.ceil(3.0 * self.sigma_x)

    def validate(self):
        if any(w <= 0 for w in self.weights.values()):
            raise ValueError("primitive weights must be positive")
        if self.sigma_y <= 0 or self.anisotropy <= 0:
            raise ValueError("sigma_y and anisotropy must be positive")


@dataclass(frozen=True)
class RewardMap:
    grid: np.ndarray             # (h, w) nonnegative reals
    supervised_mask: np.ndarray  # (h, w) bools: pixels carrying a training target


def task_progress_reward(primitive: Primitive, success: int, progress: float,
                         params: RewardParams) -> float:
    """weight(primitive) * success * progress."""
    return params.weights[primitive] * float(success) * float(progress)


def step_reward(primitive, success, progress, prev_progress, params) -> float:
    """Full shaped step reward: the product above, forced to 0 whenever the
    step reversed overall progress (a locally successful action that undoes
    the task earns nothing)."""
    if progress < prev_progress:
        return 0.0
    return task_progress_reward(primitive, success, progress, params)


def baseline_reward(success: int) -> float:
    """Ablation baseline: the bare success indicator."""
    return float(success)


def gaussian_kernel(theta: float, params: RewardParams) -> np.ndarray:
    """Anisotropic Gaussian on integer offsets, long axis along the gripper
    x-axis (coordinates rotated by -theta). Density values, not renormalized.

    Returns a (2K+1, 2K+1) grid, K = truncation half-width, indexed
    [dy + K, dx + K].
    """
    sx, sy = params.sigma_x, params.sigma_y
    k = params.truncation
    offs = np.arange(-k, k + 1, dtype=np.float64)
    dxg, dyg = np.meshgrid(offs, offs)
    ct, st = math.cos(theta), math.sin(theta)
    xr = dxg * ct + dyg * st
    yr = -dxg * st + dyg * ct
    norm = 1.0 / (2.0 * math.pi * sx * sy)
    return norm * np.exp(-(xr ** 2 / (2.0 * sx ** 2) + yr ** 2 / (2.0 * sy ** 2)))


def convolve_same(grid: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Zero-padded sliding-window 2D convolution, output sized like ``grid``.

    True convolution (kernel flipped), accumulated offset by offset; no FFT.
    """
    kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("kernel dimensions must be odd")
    h, w = grid.shape
    ky, kx = kh // 2, kw // 2
    padded = np.zeros((h + 2 * ky, w + 2 * kx), dtype=np.float64)
    padded[ky:ky + h, kx:kx + w] = grid
    out = np.zeros((h, w), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            # out[y, x] += kernel[i, j] * grid[y - (i - ky), x - (j - kx)]
            out += kernel[i, j] * padded[ky - (i - ky):ky - (i - ky) + h,
                                         kx - (j - kx):kx - (j - kx) + w]
    return out


def _spike(value, x, y, shape):
    grid = np.zeros(shape, dtype=np.float64)
    grid[y, x] = value
    return grid


def _support_mask(x, y, half_width, shape):
    mask = np.zeros(shape, dtype=bool)
    h, w = shape
    y0, y1 = max(0, y - half_width), min(h, y + half_width + 1)
    x0, x1 = max(0, x - half_width), min(w, x + half_width + 1)
    mask[y0:y1, x0:x1] = True
    return mask


def tpg_reward_map(r_tp: float, pose, params: RewardParams, shape) -> RewardMap:
    """Smoothed reward map: max(spike, spike * Gaussian), plus the mask of
    pixels inside the translated kernel support (clipped at the borders).

    ``pose`` is (x, y, theta_radians) of the executed action.
    """
    if r_tp < 0:
        raise ValueError("shaped reward must be nonnegative")
    x, y, theta = pose
    spike = _spike(r_tp, x, y, shape)
    smoothed = convolve_same(spike, gaussian_kernel(theta, params))
    return RewardMap(grid=np.maximum(spike, smoothed),
                     supervised_mask=_support_mask(x, y, params.truncation, shape))


def spike_reward_map(r: float, pose, shape) -> RewardMap:
    """Unsmoothed map for the ablation baseline: one supervised pixel."""
    x, y = pose[0], pose[1]
    mask = np.zeros(shape, dtype=bool)
    mask[y, x] = True
    return RewardMap(grid=_spike(r, x, y, shape), supervised_mask=mask)
