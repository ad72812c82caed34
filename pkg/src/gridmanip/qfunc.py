"""Pixel-wise Q approximator with hand-derived gradients.

One small convolutional stack per primitive (3x3 -> 3x3 -> 1x1, ReLU between,
zero 'same' padding) maps the observation channels plus a previous-action
context to an h x w Q grid. Rotations are handled by counter-rotating the
input, running the stack, and rotating the output back; rotation is a cached
nearest-neighbour gather, exact for multiples of 90 degrees on square grids,
so its gradient is the matching scatter-add.

Forward, backward, the robust training loss and SGD-with-momentum are all
explicit numpy; no autodiff anywhere.
"""

import hashlib
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .gridsim import Action, Observation, Primitive, PRIMITIVE_ORDER, theta_radians
from .reward import RewardMap

N_CONTEXT_CHANNELS = 3
CHECKPOINT_MAGIC = b"GMQN"
CHECKPOINT_VERSION = 1

# Alpha windows where the robust loss must use its exact limit forms; the
# general expression loses ~5e-4 of absolute accuracy per 1e-6 of |alpha-2|.
_ALPHA_QUAD_TOL = 1e-5
_ALPHA_LOG_TOL = 1e-12


class TrainingDivergence(RuntimeError):
    """Loss or parameters became non-finite."""


# ---------------------------------------------------------------------------
# rotation


_ROTATION_CACHE = {}


def _rotation_map(h, w, theta):
    key = (h, w, round(theta, 12))
    hit = _ROTATION_CACHE.get(key)
    if hit is not None:
        return hit
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    dx, dy = xs - cx, ys - cy
    ct, st = math.cos(theta), math.sin(theta)
    # output(p) samples input at R(-theta) (p - c) + c
    sx = np.round(ct * dx + st * dy + cx)
    sy = np.round(-st * dx + ct * dy + cy)
    valid = (sx >= 0) & (sx < w) & (sy >= 0) & (sy < h)
    flat = (np.clip(sy, 0, h - 1) * w + np.clip(sx, 0, w - 1)).astype(np.intp)
    entry = (flat, valid)
    _ROTATION_CACHE[key] = entry
    return entry


def rotate_grid(grid: np.ndarray, theta: float) -> np.ndarray:
    """Rotate grid content by ``theta`` about the grid centre (NN sampling,
    zeros outside)."""
    h, w = grid.shape[-2:]
    flat, valid = _rotation_map(h, w, theta)
    stack = grid.reshape(-1, h * w)
    out = stack[:, flat.ravel()]
    out[:, ~valid.ravel()] = 0.0
    return out.reshape(grid.shape)


def rotate_grid_grad(dout: np.ndarray, theta: float) -> np.ndarray:
    """Gradient of rotate_grid: scatter-add through the same gather map."""
    h, w = dout.shape[-2:]
    flat, valid = _rotation_map(h, w, theta)
    dstack = dout.reshape(-1, h * w)
    din = np.zeros_like(dstack)
    idx = flat.ravel()[valid.ravel()]
    for c in range(dstack.shape[0]):
        np.add.at(din[c], idx, dstack[c][valid.ravel()])
    return din.reshape(dout.shape)


# ---------------------------------------------------------------------------
# convolution layers


_PATCH_CACHE = {}


def _patch_index(c, h, w, k):
    """Flat gather indices turning a zero-padded (c, h+2p, w+2p) input into
    an (h*w, c*k*k) patch matrix."""
    key = (c, h, w, k)
    hit = _PATCH_CACHE.get(key)
    if hit is not None:
        return hit
    p = k // 2
    hp, wp = h + 2 * p, w + 2 * p
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    base = ys.ravel()[:, None] * wp + xs.ravel()[:, None]          # (h*w, 1)
    ci, ki, kj = np.meshgrid(np.arange(c), np.arange(k), np.arange(k),
                             indexing="ij")
    offset = (ci * hp * wp + ki * wp + kj).ravel()[None, :]        # (1, c*k*k)
    idx = (base + offset).astype(np.intp)
    _PATCH_CACHE[key] = (idx, p, hp, wp)
    return _PATCH_CACHE[key]


def _pad(x, p):
    if p == 0:
        return x
    c, h, w = x.shape
    out = np.zeros((c, h + 2 * p, w + 2 * p), dtype=np.float64)
    out[:, p:p + h, p:p + w] = x
    return out


def conv_forward(x, weight, bias):
    """'Same' zero-padded convolution; x (c_in, h, w) -> (c_out, h, w)."""
    c_out, c_in, k, _ = weight.shape
    h, w = x.shape[1:]
    idx, p, hp, wp = _patch_index(c_in, h, w, k)
    patches = _pad(x, p).ravel()[idx]                              # (h*w, cin*k*k)
    out = patches @ weight.reshape(c_out, -1).T + bias             # (h*w, c_out)
    return out.T.reshape(c_out, h, w), patches


def conv_backward(dout, patches, weight, x_shape, need_dx=True):
    """Returns (dx, dweight, dbias) for conv_forward."""
    c_out, c_in, k, _ = weight.shape
    h, w = x_shape[1:]
    idx, p, hp, wp = _patch_index(c_in, h, w, k)
    dflat = dout.reshape(c_out, -1).T                              # (h*w, c_out)
    dweight = (dflat.T @ patches).reshape(weight.shape)
    dbias = dout.sum(axis=(1, 2))
    if not need_dx:
        return None, dweight, dbias
    dpatches = dflat @ weight.reshape(c_out, -1)                   # (h*w, cin*k*k)
    dpadded = np.bincount(idx.ravel(), weights=dpatches.ravel(),
                          minlength=c_in * hp * wp).reshape(c_in, hp, wp)
    dx = dpadded[:, p:p + h, p:p + w] if p else dpadded
    return dx, dweight, dbias


_PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")


@dataclass
class ConvStack:
    """Three-layer map from stacked input channels to one Q grid."""
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    velocity: dict = field(default_factory=dict, repr=False)

    @classmethod
    def init(cls, rng, in_channels, hidden):
        def uniform(shape, fan_in):
            bound = 1.0 / math.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape)

        return cls(
            w1=uniform((hidden, in_channels, 3, 3), in_channels * 9),
            b1=np.zeros(hidden),
            w2=uniform((hidden, hidden, 3, 3), hidden * 9),
            b2=np.zeros(hidden),
            w3=uniform((1, hidden, 1, 1), hidden),
            b3=np.zeros(1),
        )

    def params(self):
        return {name: getattr(self, name) for name in _PARAM_NAMES}

    def forward(self, x):
        """x (c_in, h, w) -> ((h, w) Q grid, cache for backward)."""
        z1, p1 = conv_forward(x, self.w1, self.b1)
        a1 = np.maximum(z1, 0.0)
        z2, p2 = conv_forward(a1, self.w2, self.b2)
        a2 = np.maximum(z2, 0.0)
        z3, p3 = conv_forward(a2, self.w3, self.b3)
        cache = (x.shape, z1, p1, a1.shape, z2, p2, a2.shape, p3)
        return z3[0], cache

    def backward(self, cache, dq, grads):
        """Accumulate parameter gradients for dL/dq into ``grads``."""
        x_shape, z1, p1, a1_shape, z2, p2, a2_shape, p3 = cache
        da2, dw3, db3 = conv_backward(dq[None, :, :], p3, self.w3, a2_shape)
        dz2 = da2 * (z2 > 0.0)
        da1, dw2, db2 = conv_backward(dz2, p2, self.w2, a1_shape)
        dz1 = da1 * (z1 > 0.0)
        _, dw1, db1 = conv_backward(dz1, p1, self.w1, x_shape, need_dx=False)
        for name, g in zip(_PARAM_NAMES, (dw1, db1, dw2, db2, dw3, db3)):
            grads[name] = grads.get(name, 0.0) + g

    def apply_sgd(self, grads, lr, momentum):
        for name in _PARAM_NAMES:
            v = self.velocity.get(name)
            if v is None:
                v = np.zeros_like(getattr(self, name))
            v = momentum * v + grads[name]
            self.velocity[name] = v
            getattr(self, name)[...] -= lr * v


@dataclass(frozen=True)
class PrevActionContext:
    """Sparse conditioning channels: the previous action's Q at its pose, in
    the channel of its primitive; all zero at the start of an episode."""
    channels: np.ndarray         # (3, h, w)

    @classmethod
    def initial(cls, h, w):
        return cls(channels=np.zeros((N_CONTEXT_CHANNELS, h, w)))

    @classmethod
    def from_action(cls, action: Action, h, w):
        channels = np.zeros((N_CONTEXT_CHANNELS, h, w))
        channels[PRIMITIVE_ORDER.index(action.primitive), action.y, action.x] = \
            action.q_value
        return cls(channels=channels)


@dataclass
class QNetwork:
    stacks: dict                 # Primitive -> ConvStack
    in_channels: int
    hidden_channels: int
    rotations: int

    @classmethod
    def init(cls, rng, in_channels=6, hidden_channels=16, rotations=4):
        stacks = {prim: ConvStack.init(rng, in_channels, hidden_channels)
                  for prim in PRIMITIVE_ORDER}
        return cls(stacks=stacks, in_channels=in_channels,
                   hidden_channels=hidden_channels, rotations=rotations)

    def param_arrays(self):
        """(name, array) pairs in the declared checkpoint order."""
        out = []
        for prim in PRIMITIVE_ORDER:
            for name, arr in self.stacks[prim].params().items():
                out.append((f"{prim.value}.{name}", arr))
        return out


def stack_input(obs: Observation, ctx: PrevActionContext) -> np.ndarray:
    return np.concatenate([obs.channels, ctx.channels], axis=0)


def forward_rotation(net: QNetwork, x: np.ndarray, primitive: Primitive,
                     theta_index: int):
    """Q grid for one rotation: counter-rotate input, run stack, rotate back."""
    theta = theta_radians(theta_index, net.rotations)
    x_rot = rotate_grid(x, -theta)
    q, cache = net.stacks[primitive].forward(x_rot)
    return rotate_grid(q, theta), cache, theta


def forward(net: QNetwork, obs: Observation, ctx: PrevActionContext,
            primitive: Primitive) -> np.ndarray:
    """Full (rotations, h, w) Q-map set for one primitive."""
    x = stack_input(obs, ctx)
    maps = [forward_rotation(net, x, primitive, r)[0]
            for r in range(net.rotations)]
    return np.stack(maps)


def forward_all(net: QNetwork, obs, ctx, primitives) -> dict:
    return {prim: forward(net, obs, ctx, prim) for prim in primitives}


# ---------------------------------------------------------------------------
# targets and loss


def compute_target(r_t: float, r_next: float, gamma: float) -> float:
    """Recursive expected reward: r_t + gate * gamma * r_next, where the
    gate opens only when the step's own reward is positive."""
    eta = 1.0 if r_t > 0.0 else 0.0
    return r_t + eta * gamma * r_next


def robust_loss(residual, alpha: float, c: float):
    """General robust loss and its derivative w.r.t. the residual.

    rho(x, alpha, c) = (|2-alpha|/alpha) * [((x/c)^2 / |2-alpha| + 1)^(alpha/2) - 1]
    with the quadratic (alpha=2) and log (alpha=0) limits taken exactly when
    alpha is within snapping distance of them. Accepts scalars or arrays.
    """
    if c <= 0:
        raise ValueError("scale c must be positive")
    x = np.asarray(residual, dtype=np.float64)
    s = (x / c) ** 2
    if abs(alpha - 2.0) <= _ALPHA_QUAD_TOL:
        loss = 0.5 * s
        grad = x / (c * c)
    elif abs(alpha) <= _ALPHA_LOG_TOL:
        loss = np.log1p(0.5 * s)
        grad = (x / (c * c)) / (0.5 * s + 1.0)
    else:
        b = abs(2.0 - alpha)
        log_term = np.log1p(s / b)
        loss = (b / alpha) * np.expm1((alpha / 2.0) * log_term)
        grad = (x / (c * c)) * np.exp((alpha / 2.0 - 1.0) * log_term)
    if np.isscalar(residual):
        return float(loss), float(grad)
    return loss, grad


def build_target_map(reward_map: RewardMap, action: Action, y: float):
    """Per-pixel targets over the supervised mask, scaled so the executed
    pixel carries exactly ``y``; all-zero when the spike itself is zero."""
    executed = reward_map.grid[action.y, action.x]
    if executed > 0.0:
        return y * reward_map.grid / executed
    return np.zeros_like(reward_map.grid)


@dataclass
class TrainHyper:
    lr: float = 0.03
    momentum: float = 0.9
    gamma: float = 0.5
    loss_alpha: float = 1.0
    loss_scale: float = 1.0


def train_step(net: QNetwork, batch, hp: TrainHyper):
    """One SGD step over a batch of finalized transitions.

    Supervision covers only the executed primitive's map at the executed
    rotation, on the reward map's supervised pixels; the other primitive
    networks receive no gradient and are left untouched (including their
    momentum state). Returns (mean batch loss, per-transition losses).
    """
    if not batch:
        raise ValueError("batch must be nonempty")
    grads = {prim: {} for prim in PRIMITIVE_ORDER}
    touched = set()
    per_losses = np.zeros(len(batch))
    n = len(batch)

    for i, tr in enumerate(batch):
        x = stack_input(tr.observation, tr.prev_action_context)
        pred, cache, theta = forward_rotation(net, x, tr.action.primitive,
                                              tr.action.theta_index)
        y = compute_target(tr.r_t, tr.r_next, hp.gamma)
        targets = build_target_map(tr.reward_map, tr.action, y)
        mask = tr.reward_map.supervised_mask
        residuals = pred[mask] - targets[mask]
        losses, dresiduals = robust_loss(residuals, hp.loss_alpha, hp.loss_scale)
        per_losses[i] = float(np.mean(losses))

        dpred = np.zeros_like(pred)
        dpred[mask] = dresiduals / (residuals.size * n)
        dq = rotate_grid_grad(dpred, theta)
        net.stacks[tr.action.primitive].backward(cache, dq,
                                                 grads[tr.action.primitive])
        touched.add(tr.action.primitive)

    mean_loss = float(np.mean(per_losses))
    if not np.isfinite(mean_loss):
        raise TrainingDivergence(f"non-finite training loss {mean_loss}")
    for prim in touched:
        net.stacks[prim].apply_sgd(grads[prim], hp.lr, hp.momentum)
        for name, arr in net.stacks[prim].params().items():
            if not np.all(np.isfinite(arr)):
                raise TrainingDivergence(f"non-finite parameter {prim.value}.{name}")
    return mean_loss, per_losses


# ---------------------------------------------------------------------------
# checkpoints


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def save_checkpoint(path, net: QNetwork, grid_shape, cfg_hash: str = ""):
    """Binary header + parameter arrays (little-endian float64, declared
    order), mirrored by a ``<path>.meta`` text sidecar."""
    h, w = grid_shape
    arrays = net.param_arrays()
    digest = bytes.fromhex(cfg_hash) if cfg_hash else b"\x00" * 32
    header = [CHECKPOINT_MAGIC,
              struct.pack("<6I", CHECKPOINT_VERSION, net.rotations,
                          net.in_channels, net.hidden_channels, h, w),
              digest,
              struct.pack("<I", len(arrays))]
    for name, arr in arrays:
        encoded = name.encode()
        header.append(struct.pack("<H", len(encoded)))
        header.append(encoded)
        header.append(struct.pack("<B", arr.ndim))
        header.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    with open(path, "wb") as fh:
        for chunk in header:
            fh.write(chunk)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    meta = [f"version={CHECKPOINT_VERSION}",
            f"rotations={net.rotations}",
            f"in_channels={net.in_channels}",
            f"hidden_channels={net.hidden_channels}",
            f"grid_height={h}",
            f"grid_width={w}",
            f"config_hash={cfg_hash or '0' * 64}"]
    meta += [f"array={name} {','.join(map(str, arr.shape))}"
             for name, arr in arrays]
    with open(meta_path(path), "w") as fh:
        fh.write("\n".join(meta) + "\n")


def meta_path(path) -> str:
    path = str(path)
    return path[:-4] + ".meta" if path.endswith(".bin") else path + ".meta"


def read_checkpoint_header(path):
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        version, rotations, c_in, hidden, h, w = struct.unpack("<6I", fh.read(24))
        digest = fh.read(32).hex()
        (n_arrays,) = struct.unpack("<I", fh.read(4))
        arrays = []
        for _ in range(n_arrays):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode()
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            arrays.append((name, shape))
        offset = fh.tell()
    return {"version": version, "rotations": rotations, "in_channels": c_in,
            "hidden_channels": hidden, "grid_height": h, "grid_width": w,
            "config_hash": digest, "arrays": arrays, "data_offset": offset}


def load_checkpoint(path):
    header = read_checkpoint_header(path)
    net = QNetwork(stacks={}, in_channels=header["in_channels"],
                   hidden_channels=header["hidden_channels"],
                   rotations=header["rotations"])
    raw = {}
    with open(path, "rb") as fh:
        fh.seek(header["data_offset"])
        for name, shape in header["arrays"]:
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(8 * count), dtype="<f8")
            raw[name] = data.reshape(shape).astype(np.float64)
    for prim in PRIMITIVE_ORDER:
        kwargs = {pname: raw[f"{prim.value}.{pname}"] for pname in _PARAM_NAMES}
        net.stacks[prim] = ConvStack(**kwargs)
    return net, header
