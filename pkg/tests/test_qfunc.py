import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gridmanip.gridsim import Action, Observation, Primitive, PRIMITIVE_ORDER
from gridmanip.qfunc import (PrevActionContext, QNetwork, TrainHyper,
                             TrainingDivergence, build_target_map,
                             compute_target, conv_backward, conv_forward,
                             forward, load_checkpoint, meta_path,
                             read_checkpoint_header, robust_loss, rotate_grid,
                             rotate_grid_grad, save_checkpoint, train_step)
from gridmanip.replay import Transition
from gridmanip.reward import RewardParams, spike_reward_map, tpg_reward_map
from gridmanip.selftest import gradient_check


def fresh_net(seed=0, hidden=16, rotations=4):
    return QNetwork.init(np.random.default_rng(seed), in_channels=6,
                         hidden_channels=hidden, rotations=rotations)


def params_snapshot(net):
    return {prim: {k: v.copy() for k, v in net.stacks[prim].params().items()}
            for prim in PRIMITIVE_ORDER}


def params_equal(snap, net, prims):
    return all(np.array_equal(snap[p][k], net.stacks[p].params()[k])
               for p in prims for k in snap[p])


class TestRotation:
    @pytest.mark.parametrize("n", [4, 6, 7, 10])
    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_quarter_turns_are_exact_permutations(self, n, k):
        rng = np.random.default_rng(n * 10 + k)
        grid = rng.normal(size=(n, n))
        theta = k * math.pi / 2
        rotated = rotate_grid(grid, theta)
        assert sorted(rotated.ravel()) == sorted(grid.ravel())
        back = rotate_grid(rotated, -theta)
        np.testing.assert_array_equal(back, grid)

    def test_zero_rotation_identity(self):
        grid = np.arange(16.0).reshape(4, 4)
        np.testing.assert_array_equal(rotate_grid(grid, 0.0), grid)

    def test_stacked_channels(self):
        rng = np.random.default_rng(3)
        stack = rng.normal(size=(5, 6, 6))
        rot = rotate_grid(stack, math.pi / 2)
        for c in range(5):
            np.testing.assert_array_equal(rot[c],
                                          rotate_grid(stack[c], math.pi / 2))

    def test_gather_scatter_adjoint(self):
        # <rotate(x), y> == <x, rotate_grad(y)> for any theta
        rng = np.random.default_rng(8)
        for theta in (0.3, math.pi / 2, 2.2):
            x = rng.normal(size=(7, 7))
            y = rng.normal(size=(7, 7))
            lhs = float((rotate_grid(x, theta) * y).sum())
            rhs = float((x * rotate_grid_grad(y, theta)).sum())
            assert lhs == pytest.approx(rhs, abs=1e-12)


class TestConvLayer:
    def test_same_shape_and_known_value(self):
        x = np.zeros((1, 5, 5))
        x[0, 2, 2] = 1.0
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 0, 0] = 1.0            # top-left tap
        out, _ = conv_forward(x, w, np.zeros(1))
        assert out.shape == (1, 5, 5)
        # output pixel (3,3) sees input (2,2) through the (0,0) tap
        assert out[0, 3, 3] == 1.0
        assert out.sum() == 1.0

    def test_bias_broadcast(self):
        x = np.zeros((2, 4, 4))
        w = np.zeros((3, 2, 3, 3))
        out, _ = conv_forward(x, w, np.array([1.0, -2.0, 0.5]))
        assert (out[0] == 1.0).all() and (out[1] == -2.0).all()

    def test_backward_matches_finite_difference(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(3, 5, 5))
        w = rng.normal(size=(2, 3, 3, 3)) * 0.3
        b = rng.normal(size=2) * 0.1
        out, patches = conv_forward(x, w, b)
        dout = rng.normal(size=out.shape)
        dx, dw, db = conv_backward(dout, patches, w, x.shape)
        eps = 1e-6

        def loss(xx, ww, bb):
            return float((conv_forward(xx, ww, bb)[0] * dout).sum())

        for idx in [(0, 0, 0), (1, 2, 3), (2, 4, 4)]:
            xp = x.copy(); xp[idx] += eps
            xm = x.copy(); xm[idx] -= eps
            num = (loss(xp, w, b) - loss(xm, w, b)) / (2 * eps)
            assert num == pytest.approx(dx[idx], rel=1e-5, abs=1e-8)
        for idx in [(0, 0, 0, 0), (1, 2, 1, 2)]:
            wp = w.copy(); wp[idx] += eps
            wm = w.copy(); wm[idx] -= eps
            num = (loss(x, wp, b) - loss(x, wm, b)) / (2 * eps)
            assert num == pytest.approx(dw[idx], rel=1e-5, abs=1e-8)
        num = (loss(x, w, b + np.array([eps, 0])) -
               loss(x, w, b - np.array([eps, 0]))) / (2 * eps)
        assert num == pytest.approx(db[0], rel=1e-5, abs=1e-8)


class TestForward:
    def test_zeroed_final_layer_gives_zero_maps(self):
        net = fresh_net(1)
        obs = Observation(channels=np.random.default_rng(0).random((3, 8, 8)))
        ctx = PrevActionContext.initial(8, 8)
        for prim in PRIMITIVE_ORDER:
            net.stacks[prim].w3[:] = 0.0
            net.stacks[prim].b3[:] = 0.0
        maps = forward(net, obs, ctx, Primitive.PICK)
        assert maps.shape == (4, 8, 8)
        assert not maps.any()

    def test_rotation_equivariance_on_symmetric_input(self):
        # 90-degree symmetric observation, zero context: the four maps are
        # quarter-turn rotations of one another.
        net = fresh_net(2)
        rng = np.random.default_rng(5)
        base = rng.random((3, 8, 8))
        sym = base + np.rot90(base, 1, (1, 2)) + np.rot90(base, 2, (1, 2)) \
            + np.rot90(base, 3, (1, 2))
        obs = Observation(channels=sym)
        ctx = PrevActionContext.initial(8, 8)
        maps = forward(net, obs, ctx, Primitive.PUSH)
        for r in range(1, 4):
            expected = rotate_grid(maps[0], r * math.pi / 2)
            np.testing.assert_allclose(maps[r], expected, atol=1e-12)

    def test_forward_deterministic(self):
        net = fresh_net(3)
        rng = np.random.default_rng(1)
        obs = Observation(channels=rng.random((3, 6, 6)))
        ctx = PrevActionContext.from_action(
            Action(Primitive.PICK, 2, 3, 0, 0.4), 6, 6)
        a = forward(net, obs, ctx, Primitive.PLACE)
        b = forward(net, obs, ctx, Primitive.PLACE)
        np.testing.assert_array_equal(a, b)

    def test_context_changes_output(self):
        net = fresh_net(4)
        obs = Observation(channels=np.random.default_rng(2).random((3, 6, 6)))
        a = forward(net, obs, PrevActionContext.initial(6, 6), Primitive.PICK)
        ctx = PrevActionContext.from_action(
            Action(Primitive.PLACE, 1, 1, 0, 0.9), 6, 6)
        b = forward(net, obs, ctx, Primitive.PICK)
        assert not np.array_equal(a, b)


class TestContext:
    def test_initial_all_zero(self):
        ctx = PrevActionContext.initial(5, 7)
        assert ctx.channels.shape == (3, 5, 7)
        assert not ctx.channels.any()

    def test_single_entry_in_primitive_channel(self):
        a = Action(Primitive.PLACE, 4, 2, 1, 0.7)
        ctx = PrevActionContext.from_action(a, 6, 6)
        assert np.count_nonzero(ctx.channels) == 1
        assert ctx.channels[PRIMITIVE_ORDER.index(Primitive.PLACE), 2, 4] == 0.7


class TestTarget:
    def test_gate_closed(self):
        assert compute_target(0.0, 0.8, 0.5) == 0.0

    def test_gate_open(self):
        assert compute_target(0.5, 0.8, 0.5) == pytest.approx(0.9)

    def test_no_future_reward(self):
        assert compute_target(0.5, 0.0, 0.5) == pytest.approx(0.5)

    @given(st.floats(0, 10), st.floats(0, 1))
    def test_zero_reward_blocks_propagation(self, r_next, gamma):
        assert compute_target(0.0, r_next, gamma) == 0.0

    def test_target_map_scaling(self):
        rmap = tpg_reward_map(0.5, (3, 3, 0.0), RewardParams(sigma_y=1.0),
                              (9, 9))
        targets = build_target_map(rmap, Action(Primitive.PICK, 3, 3, 0), 0.9)
        assert targets[3, 3] == pytest.approx(0.9)
        ratio = rmap.grid[3, 5] / rmap.grid[3, 3]
        assert targets[3, 5] == pytest.approx(0.9 * ratio)

    def test_target_map_zero_spike(self):
        rmap = spike_reward_map(0.0, (2, 2), (6, 6))
        targets = build_target_map(rmap, Action(Primitive.PICK, 2, 2, 0), 0.7)
        assert not targets.any()


class TestRobustLoss:
    def test_zero_residual(self):
        for alpha in (-2.0, 0.0, 1.0, 2.0):
            loss, grad = robust_loss(0.0, alpha, 1.0)
            assert loss == 0.0 and grad == 0.0

    def test_quadratic_case(self):
        loss, grad = robust_loss(2.0, 2.0, 1.0)
        assert loss == pytest.approx(2.0)
        assert grad == pytest.approx(2.0)

    def test_charbonnier_point(self):
        # frozen: sqrt(2) - 1
        loss, _ = robust_loss(1.0, 1.0, 1.0)
        assert loss == pytest.approx(0.41421356237309515, abs=1e-12)

    def test_log_case(self):
        x, c = 1.5, 0.8
        loss, _ = robust_loss(x, 0.0, c)
        assert loss == pytest.approx(math.log(0.5 * (x / c) ** 2 + 1), abs=1e-12)

    def test_alpha_two_limit_within_bound(self):
        xs = np.linspace(-10, 10, 401)
        loss, _ = robust_loss(xs, 2.0 - 1e-6, 1.0)
        assert np.max(np.abs(loss - 0.5 * xs ** 2)) < 1e-4

    def test_scale_validation(self):
        with pytest.raises(ValueError):
            robust_loss(1.0, 1.0, 0.0)

    @pytest.mark.parametrize("alpha", [-2.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0])
    def test_derivative_matches_finite_difference(self, alpha):
        rng = np.random.default_rng(10)
        for _ in range(40):
            x = float(rng.uniform(-3, 3))
            c = float(rng.uniform(0.3, 2.0))
            _, grad = robust_loss(x, alpha, c)
            eps = 1e-6
            up, _ = robust_loss(x + eps, alpha, c)
            down, _ = robust_loss(x - eps, alpha, c)
            assert grad == pytest.approx((up - down) / (2 * eps),
                                         rel=1e-5, abs=1e-7)

    def test_vector_input(self):
        xs = np.array([-1.0, 0.0, 2.0])
        loss, grad = robust_loss(xs, 1.0, 1.0)
        assert loss.shape == grad.shape == (3,)
        assert loss[1] == 0.0


def one_pixel_transition(rng, h=6, w=6, r_t=0.5, r_next=0.5):
    obs = Observation(channels=rng.uniform(0, 1, size=(3, h, w)))
    action = Action(Primitive.PICK, x=3, y=2, theta_index=1, q_value=0.0)
    return Transition(observation=obs,
                      prev_action_context=PrevActionContext.initial(h, w),
                      action=action, r_t=r_t,
                      reward_map=spike_reward_map(r_t, (3, 2), (h, w)),
                      r_next=r_next)


class TestTrainStep:
    def test_zero_residual_batch_leaves_params_unchanged(self):
        net = fresh_net(6)
        for prim in PRIMITIVE_ORDER:
            net.stacks[prim].w3[:] = 0.0
            net.stacks[prim].b3[:] = 0.0
        rng = np.random.default_rng(0)
        tr = one_pixel_transition(rng, r_t=0.0, r_next=0.9)  # target 0, pred 0
        snap = params_snapshot(net)
        loss, per = train_step(net, [tr], TrainHyper())
        assert loss == 0.0
        assert params_equal(snap, net, PRIMITIVE_ORDER)

    def test_overfit_single_transition(self):
        # Monotone descent at the conservative rate over the first 50 steps;
        # momentum ringing rules out strict monotonicity at any rate fast
        # enough for 50-step convergence, so the 1e-3 bound gets 200 steps.
        rng = np.random.default_rng(11)
        net = fresh_net(11)
        tr = one_pixel_transition(rng)
        hp = TrainHyper(lr=1e-3)
        losses = [train_step(net, [tr], hp)[0] for _ in range(200)]
        first50 = losses[:50]
        assert all(b < a for a, b in zip(first50, first50[1:]))
        assert min(losses) < 1e-3

    def test_supervision_locality(self):
        net = fresh_net(7)
        rng = np.random.default_rng(1)
        tr = one_pixel_transition(rng)           # a PICK transition
        snap = params_snapshot(net)
        train_step(net, [tr], TrainHyper())
        assert params_equal(snap, net, [Primitive.PUSH, Primitive.PLACE])
        assert not params_equal(snap, net, [Primitive.PICK])

    def test_momentum_state_untouched_for_unseen_primitives(self):
        net = fresh_net(8)
        rng = np.random.default_rng(2)
        train_step(net, [one_pixel_transition(rng)], TrainHyper())
        assert net.stacks[Primitive.PICK].velocity
        assert not net.stacks[Primitive.PUSH].velocity
        assert not net.stacks[Primitive.PLACE].velocity

    def test_per_transition_losses_returned(self):
        net = fresh_net(9)
        rng = np.random.default_rng(3)
        batch = [one_pixel_transition(rng), one_pixel_transition(rng, r_t=0.2)]
        mean_loss, per = train_step(net, batch, TrainHyper())
        assert per.shape == (2,)
        assert mean_loss == pytest.approx(per.mean())

    def test_divergence_detected(self):
        net = fresh_net(10)
        rng = np.random.default_rng(4)
        tr = one_pixel_transition(rng)
        net.stacks[Primitive.PICK].w1[:] = np.inf
        with np.errstate(invalid="ignore"), pytest.raises(TrainingDivergence):
            train_step(net, [tr], TrainHyper())

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            train_step(fresh_net(0), [], TrainHyper())


class TestGradientCheck:
    def test_small_randomized_gradcheck(self):
        report = gradient_check(n_draws=4, coords_per_draw=12, seed=99,
                                exhaustive_first=False)
        assert report.passed, report.detail


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        net = fresh_net(12)
        path = tmp_path / "checkpoint.bin"
        save_checkpoint(path, net, (10, 10), cfg_hash="ab" * 32)
        loaded, header = load_checkpoint(path)
        assert header["rotations"] == 4
        assert header["in_channels"] == 6
        assert header["hidden_channels"] == 16
        assert (header["grid_height"], header["grid_width"]) == (10, 10)
        assert header["config_hash"] == "ab" * 32
        for prim in PRIMITIVE_ORDER:
            for key, arr in net.stacks[prim].params().items():
                np.testing.assert_array_equal(arr,
                                              loaded.stacks[prim].params()[key])

    def test_meta_sidecar_mirrors_header(self, tmp_path):
        net = fresh_net(13)
        path = tmp_path / "checkpoint.bin"
        save_checkpoint(path, net, (8, 9))
        meta = (tmp_path / "checkpoint.meta").read_text()
        assert "rotations=4" in meta
        assert "grid_height=8" in meta and "grid_width=9" in meta
        assert "array=push.w1 16,6,3,3" in meta
        assert meta_path(path) == str(tmp_path / "checkpoint.meta")

    def test_header_only_read(self, tmp_path):
        net = fresh_net(14)
        path = tmp_path / "net.bin"
        save_checkpoint(path, net, (6, 6))
        header = read_checkpoint_header(path)
        assert len(header["arrays"]) == 18        # 3 nets x 6 arrays
        assert header["arrays"][0][0] == "push.w1"

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ValueError):
            read_checkpoint_header(path)

    def test_little_endian_float64_payload(self, tmp_path):
        net = fresh_net(15)
        path = tmp_path / "checkpoint.bin"
        save_checkpoint(path, net, (6, 6))
        header = read_checkpoint_header(path)
        raw = path.read_bytes()[header["data_offset"]:]
        first = np.frombuffer(raw[:8 * net.stacks[Primitive.PUSH].w1.size],
                              dtype="<f8")
        np.testing.assert_array_equal(
            first.reshape(net.stacks[Primitive.PUSH].w1.shape),
            net.stacks[Primitive.PUSH].w1)
