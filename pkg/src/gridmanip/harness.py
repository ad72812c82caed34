"""Training, evaluation and the three-rung ablation ladder.

Training is strictly sequential: each step's network input depends on the
previous action's Q prediction. Every random draw flows from named
SeedSequence streams of the run seed, so a (config, seed) pair fully
determines all logged numbers. Evaluation runs greedy episodes on frozen
weights and never touches the network.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import gridsim
from .gridsim import (DoneReason, Primitive, TaskConfig, TaskKind,
                      theta_radians, valid_action_mask)
from .policy import (ExplorationState, NoValidActionError, epsilon_greedy_decay,
                     greedy_action, select_action, update_exploration)
from .qfunc import (PrevActionContext, QNetwork, TrainHyper, compute_target,
                    forward_all, train_step)
from .replay import ReplayBuffer, Transition
from .reward import (RewardParams, baseline_reward, spike_reward_map,
                     step_reward, tpg_reward_map)

REWARD_KINDS = ("tpg", "baseline")
EXPLORATION_KINDS = ("lae", "decay")

# SeedSequence stream tags.
_STREAM_EPISODE = 0
_STREAM_POLICY = 1
_STREAM_REPLAY = 2
_STREAM_INIT = 3
_STREAM_EVAL = 4


def derive_seed(seed, stream, index=0):
    return int(np.random.SeedSequence([seed, stream, index])
               .generate_state(1, np.uint64)[0])


@dataclass
class RunConfig:
    task: TaskConfig
    reward: RewardParams = field(default_factory=RewardParams)
    exploration: ExplorationState = field(default_factory=ExplorationState)
    hyper: TrainHyper = field(default_factory=TrainHyper)
    reward_kind: str = "tpg"
    exploration_kind: str = "lae"
    decay_floor: float = 0.1
    decay_span: float = 0.4
    decay_rate: float = 0.9998
    hidden_channels: int = 16
    batch_size: int = 8
    replay_capacity: int = 2000
    rank_exponent: float = 0.7
    train_steps: int = 2000
    eval_runs: int = 30
    seed: int = 0
    checkpoint_every: int = 500
    window: int = 100

    def validate(self):
        self.task.validate()
        self.reward.validate()
        self.exploration.validate()
        if self.reward_kind not in REWARD_KINDS:
            raise ValueError(f"reward_kind must be one of {REWARD_KINDS}")
        if self.exploration_kind not in EXPLORATION_KINDS:
            raise ValueError(f"exploration_kind must be one of {EXPLORATION_KINDS}")
        if self.batch_size < 1 or self.train_steps < 0 or self.eval_runs < 1:
            raise ValueError("batch_size/train_steps/eval_runs out of range")


@dataclass(frozen=True)
class StepRecord:
    step: int
    primitive: str
    x: int
    y: int
    theta_index: int
    q_value: float
    success: int
    progress: float
    r_tp: float
    y_target: float | None
    loss: float | None
    epsilon: float
    done: bool
    done_reason: str


@dataclass
class EpisodeSummary:
    end_step: int
    actions: int
    done_reason: str
    final_progress: float


@dataclass
class TrainReport:
    records: list
    episodes: list
    success_curve: np.ndarray
    efficiency_curve: np.ndarray
    net: QNetwork
    final_exploration: ExplorationState
    replay_buffer: ReplayBuffer


@dataclass
class EvalRun:
    seed: int
    completed: bool
    done_reason: str
    actions: int
    picks_attempted: int
    picks_succeeded: int
    tallest_stack_picks: int
    records: list


@dataclass
class Metrics:
    completion_rate: float
    pick_success: float | None
    action_efficiency: float | None
    runs: list


def ideal_actions(task: TaskConfig) -> int:
    """Minimum actions to finish the task in this simulator."""
    if task.kind is TaskKind.BLOCK_STACKING:
        return 2 * (task.goal_stack_height - 1)
    return task.n_blocks


def _fresh_network(cfg: RunConfig) -> QNetwork:
    rng = np.random.default_rng(derive_seed(cfg.seed, _STREAM_INIT))
    return QNetwork.init(rng, in_channels=6, hidden_channels=cfg.hidden_channels,
                         rotations=cfg.task.rotations)


def _reward_for_step(cfg, action, success, progress, prev_progress, shape):
    if cfg.reward_kind == "tpg":
        r_tp = step_reward(action.primitive, success, progress, prev_progress,
                           cfg.reward)
        theta = theta_radians(action.theta_index, cfg.task.rotations)
        rmap = tpg_reward_map(r_tp, (action.x, action.y, theta), cfg.reward, shape)
    else:
        r_tp = baseline_reward(success)
        rmap = spike_reward_map(r_tp, (action.x, action.y), shape)
    return r_tp, rmap


def train(cfg: RunConfig, checkpoint_cb=None) -> TrainReport:
    """Run the training loop for cfg.train_steps actions.

    ``checkpoint_cb(step, net)``, when given, is invoked every
    cfg.checkpoint_every steps (the CLI uses it to write checkpoint files).
    """
    cfg.validate()
    shape = (cfg.task.height, cfg.task.width)
    net = _fresh_network(cfg)
    policy_rng = np.random.default_rng(derive_seed(cfg.seed, _STREAM_POLICY))
    replay_rng = np.random.default_rng(derive_seed(cfg.seed, _STREAM_REPLAY))
    buffer = ReplayBuffer(capacity=cfg.replay_capacity,
                          rank_exponent=cfg.rank_exponent)
    lae = cfg.exploration
    allowed = cfg.task.allowed_primitives

    episode = 0
    ws, obs = gridsim.reset(cfg.task, derive_seed(cfg.seed, _STREAM_EPISODE, episode))
    ctx = PrevActionContext.initial(*shape)
    prev_progress = gridsim.task_progress(ws)
    records, episodes = [], []

    for step_i in range(cfg.train_steps):
        masks = {p: valid_action_mask(ws, p) for p in allowed}
        if not any(m.any() for m in masks.values()):
            # Dead end (cannot occur in the stock tasks): drop the episode.
            if buffer.has_pending:
                buffer.finalize_pending(0.0)
            episodes.append(EpisodeSummary(step_i, ws.step_count,
                                           "no_valid_action", prev_progress))
            episode += 1
            ws, obs = gridsim.reset(cfg.task,
                                    derive_seed(cfg.seed, _STREAM_EPISODE, episode))
            ctx = PrevActionContext.initial(*shape)
            prev_progress = gridsim.task_progress(ws)
            masks = {p: valid_action_mask(ws, p) for p in allowed}
            if not any(m.any() for m in masks.values()):
                raise NoValidActionError(
                    "task offers no valid action even after a fresh reset")

        q_maps = forward_all(net, obs, ctx, allowed)
        if cfg.exploration_kind == "lae":
            eps = lae.epsilon
            sel_state = lae
        else:
            eps = epsilon_greedy_decay(step_i, cfg.decay_floor, cfg.decay_span,
                                       cfg.decay_rate)
            sel_state = replace(lae, epsilon=eps)
        action = select_action(q_maps, masks, sel_state, policy_rng)
        result = gridsim.step(ws, action)

        r_tp, rmap = _reward_for_step(cfg, action, result.primitive_success,
                                      result.progress, prev_progress, shape)
        y_target = None
        if buffer.has_pending:
            y_target = compute_target(buffer.pending_item().r_t, r_tp,
                                      cfg.hyper.gamma)
            buffer.finalize_pending(r_tp)
        buffer.push(Transition(observation=obs, prev_action_context=ctx,
                               action=action, r_t=r_tp, reward_map=rmap))
        if result.done:
            buffer.finalize_pending(0.0)

        loss = None
        if buffer.sampleable_count() >= cfg.batch_size:
            batch, ids = buffer.sample(cfg.batch_size, replay_rng)
            loss, per_losses = train_step(net, batch, cfg.hyper)
            buffer.update_priorities(ids, per_losses)
            if cfg.exploration_kind == "lae":
                lae = update_exploration(lae, loss)

        records.append(StepRecord(
            step=step_i, primitive=action.primitive.value, x=action.x,
            y=action.y, theta_index=action.theta_index, q_value=action.q_value,
            success=result.primitive_success, progress=result.progress,
            r_tp=r_tp, y_target=y_target, loss=loss, epsilon=eps,
            done=result.done,
            done_reason=result.done_reason.value if result.done_reason else ""))

        if checkpoint_cb and cfg.checkpoint_every > 0 \
                and (step_i + 1) % cfg.checkpoint_every == 0:
            checkpoint_cb(step_i + 1, net)

        if result.done:
            episodes.append(EpisodeSummary(step_i, ws.step_count,
                                           result.done_reason.value,
                                           result.progress))
            episode += 1
            ws, obs = gridsim.reset(cfg.task,
                                    derive_seed(cfg.seed, _STREAM_EPISODE, episode))
            ctx = PrevActionContext.initial(*shape)
            prev_progress = gridsim.task_progress(ws)
        else:
            obs = result.next_observation
            ctx = PrevActionContext.from_action(action, *shape)
            prev_progress = result.progress

    success_curve, efficiency_curve = _learning_curves(cfg, records, episodes)
    return TrainReport(records=records, episodes=episodes,
                       success_curve=success_curve,
                       efficiency_curve=efficiency_curve,
                       net=net, final_exploration=lae, replay_buffer=buffer)


def _learning_curves(cfg, records, episodes):
    """Windowed action success rate and completed-episode action efficiency
    (nan for windows without a completion)."""
    n_windows = math.ceil(len(records) / cfg.window) if records else 0
    success = np.full(n_windows, np.nan)
    efficiency = np.full(n_windows, np.nan)
    ideal = ideal_actions(cfg.task)
    for k in range(n_windows):
        chunk = records[k * cfg.window:(k + 1) * cfg.window]
        success[k] = float(np.mean([r.success for r in chunk]))
        effs = [ideal / ep.actions for ep in episodes
                if ep.done_reason == DoneReason.GOAL.value
                and k * cfg.window <= ep.end_step < (k + 1) * cfg.window]
        if effs:
            efficiency[k] = float(np.mean(effs))
    return success, efficiency


def evaluate(net: QNetwork, cfg: RunConfig) -> Metrics:
    """Greedy deterministic evaluation over cfg.eval_runs fresh seeds.

    Weights are read-only; a run completes iff the task goal is reached
    before a fail streak or the step budget ends the episode.
    """
    cfg.validate()
    shape = (cfg.task.height, cfg.task.width)
    allowed = cfg.task.allowed_primitives
    runs = []
    for run_i in range(cfg.eval_runs):
        seed = derive_seed(cfg.seed, _STREAM_EVAL, run_i)
        ws, obs = gridsim.reset(cfg.task, seed)
        ctx = PrevActionContext.initial(*shape)
        picks_attempted = picks_succeeded = tallest_picks = 0
        reason = "no_valid_action"
        records = []
        while True:
            masks = {p: valid_action_mask(ws, p) for p in allowed}
            try:
                action = greedy_action(forward_all(net, obs, ctx, allowed), masks)
            except NoValidActionError:
                break
            if action.primitive is Primitive.PICK:
                picks_attempted += 1
                target_height = len(ws.stack_at(action.x, action.y))
                max_height = ws.max_stack_height()
                if target_height == max_height and max_height >= 2:
                    tallest_picks += 1
            result = gridsim.step(ws, action)
            if action.primitive is Primitive.PICK and result.primitive_success:
                picks_succeeded += 1
            records.append(StepRecord(
                step=ws.step_count - 1, primitive=action.primitive.value,
                x=action.x, y=action.y, theta_index=action.theta_index,
                q_value=action.q_value, success=result.primitive_success,
                progress=result.progress, r_tp=0.0, y_target=None, loss=None,
                epsilon=0.0, done=result.done,
                done_reason=result.done_reason.value if result.done_reason else ""))
            if result.done:
                reason = result.done_reason.value
                break
            obs = result.next_observation
            ctx = PrevActionContext.from_action(action, *shape)
        runs.append(EvalRun(seed=seed,
                            completed=reason == DoneReason.GOAL.value,
                            done_reason=reason, actions=ws.step_count,
                            picks_attempted=picks_attempted,
                            picks_succeeded=picks_succeeded,
                            tallest_stack_picks=tallest_picks,
                            records=records))

    completed = [r for r in runs if r.completed]
    completion_rate = len(completed) / len(runs)
    with_picks = [r for r in completed if r.picks_attempted > 0]
    pick_success = (float(np.mean([r.picks_succeeded / r.picks_attempted
                                   for r in with_picks]))
                    if with_picks else None)
    ideal = ideal_actions(cfg.task)
    action_efficiency = (float(np.mean([ideal / r.actions for r in completed]))
                         if completed else None)
    return Metrics(completion_rate=completion_rate, pick_success=pick_success,
                   action_efficiency=action_efficiency, runs=runs)


ABLATION_VARIANTS = (
    ("baseline", "baseline", "decay"),
    ("tpgr", "tpg", "decay"),
    ("full", "tpg", "lae"),
)


def variant_config(cfg: RunConfig, name: str) -> RunConfig:
    for variant, reward_kind, exploration_kind in ABLATION_VARIANTS:
        if variant == name:
            return replace(cfg, reward_kind=reward_kind,
                           exploration_kind=exploration_kind)
    raise ValueError(f"unknown ablation variant {name!r}")


@dataclass
class AblationEntry:
    name: str
    report: TrainReport
    metrics: Metrics


def run_ablation(cfg: RunConfig) -> dict:
    """Train and evaluate the reward/exploration ladder with shared seeds."""
    out = {}
    for name, _, _ in ABLATION_VARIANTS:
        vcfg = variant_config(cfg, name)
        report = train(vcfg)
        metrics = evaluate(report.net, vcfg)
        out[name] = AblationEntry(name=name, report=report, metrics=metrics)
    return out
