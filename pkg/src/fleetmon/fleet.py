"""Deployment orchestration: a tick-based fleet engine with oracle or live
human arbitration, runtime monitoring, buffer recording, and system metrics.

One engine loop advances every robot slot in robot-id order, so a full round
is a pure function of (suite, policy, monitor, seed). The engine is
tick-steppable from outside, which is how the live gateway drives it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datastore import TrajectoryRecord
from .envsuite import Env, EnvSuite, quantize_image
from .monitor import AnomalyMonitor
from .policy import Policy
from .seeding import seeded_rng

STATUS_AUTONOMOUS = "autonomous"
STATUS_FLAGGED = "flagged"
STATUS_HUMAN = "human_control"
STATUS_DONE = "done"


class FleetConfigError(Exception):
    pass


@dataclass
class OracleConfig:
    resume_steps: int = 10      # corrective steps before control is released
    speed: float = 1.0          # rescue controller speed factor
    noise: float = 0.0


@dataclass
class MetricsReport:
    round_index: int
    episodes: int
    successes: int
    cpp: float
    rohe: float
    p_h: float
    p_h_per_task: dict
    intervention_count: int
    human_steps: int
    total_steps: int
    autonomous: dict | None = None       # filled by the campaign driver
    overlap_accuracy: dict | None = None

    def to_dict(self) -> dict:
        return {
            "round_index": self.round_index,
            "episodes": self.episodes,
            "successes": self.successes,
            "cpp": self.cpp,
            "rohe": self.rohe,
            "p_h": self.p_h,
            "p_h_per_task": {str(k): v for k, v in sorted(self.p_h_per_task.items())},
            "intervention_count": self.intervention_count,
            "human_steps": self.human_steps,
            "total_steps": self.total_steps,
            "autonomous": self.autonomous,
            "overlap_accuracy": self.overlap_accuracy,
        }


def compute_rohe(records: list[TrajectoryRecord]) -> float:
    """Mean episode return divided by (1 + H/T), H human steps, T total steps."""
    if not records:
        raise FleetConfigError("empty buffer")
    returns = [1.0 if r.success else 0.0 for r in records]
    human = sum(int(r.control_flags.sum()) for r in records)
    total = sum(r.num_steps for r in records)
    return float(np.mean(returns) / (1.0 + human / total))


def compute_cpp(records: list[TrajectoryRecord]) -> float:
    if not records:
        raise FleetConfigError("empty buffer")
    return sum(1 for r in records if r.success) / len(records)


def intervention_ratio(records: list[TrajectoryRecord], task_id: int | None = None) -> float:
    recs = [r for r in records if task_id is None or r.task_id == task_id]
    total = sum(r.num_steps for r in recs)
    if total == 0:
        return 0.0
    return sum(int(r.control_flags.sum()) for r in recs) / total


@dataclass
class RobotSlot:
    robot_id: int
    task_id: int
    env: Env
    episodes_left: int
    state: object = None
    status: str = STATUS_AUTONOMOUS
    episode_index: int = -1
    frames: list = field(default_factory=list)       # uint8 images
    proprios: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    goals: list = field(default_factory=list)
    controls: list = field(default_factory=list)
    tokens: list = field(default_factory=list)       # policy frame tokens
    latents: list = field(default_factory=list)      # world-model embeddings
    flag_streak: int = 0
    pending_verdict: object = None
    rescue_steps_left: int = 0
    rescue_stage: int | None = None
    last_verdict: object = None

    @property
    def live(self) -> bool:
        return self.status != STATUS_DONE and self.state is not None


@dataclass
class RoundResult:
    records: list[TrajectoryRecord]
    metrics: MetricsReport
    decision_log: list[dict]
    verdict_log: list[dict]


class HumanOracle:
    """Scripted operator: one robot under control at a time, FIFO alert queue."""

    def __init__(self, cfg: OracleConfig = OracleConfig()):
        self.cfg = cfg
        self.controlled: int | None = None
        self.queue: list[int] = []

    def enqueue(self, robot_id: int):
        if robot_id not in self.queue and robot_id != self.controlled:
            self.queue.append(robot_id)

    def drop(self, robot_id: int):
        if robot_id in self.queue:
            self.queue.remove(robot_id)


class FleetEngine:
    """Advances N robot slots tick by tick; deterministic under its seed."""

    def __init__(self, suite: EnvSuite, policy: Policy, monitor: AnomalyMonitor | None,
                 human: HumanOracle | None, round_index: int, episodes_per_task: int,
                 seed: int, robots_per_task: int = 2, full_supervision: bool = False,
                 passive_monitor: bool = False, live_mode: bool = False,
                 low_noise: bool = True):
        if round_index >= 2 and monitor is None and not full_supervision and not live_mode:
            raise FleetConfigError(f"round {round_index} requires a monitor")
        if full_supervision and human is None:
            raise FleetConfigError("full supervision requires a human oracle")
        self.suite = suite
        self.policy = policy
        self.monitor = monitor
        self.human = human
        self.round_index = round_index
        self.seed = seed
        self.full_supervision = full_supervision
        self.passive_monitor = passive_monitor
        self.live_mode = live_mode
        self.low_noise = low_noise
        self.tick_index = 0
        self.records: list[TrajectoryRecord] = []
        self.decision_log: list[dict] = []
        self.verdict_log: list[dict] = []
        self.alerts_this_tick: list[dict] = []
        self.live_controlled: int | None = None
        self._pending_teleop: dict[int, np.ndarray] = {}

        self.policy_rng = seeded_rng("fleet-policy", seed, round_index)
        self.monitor_rng = seeded_rng("fleet-monitor", seed, round_index)

        n_tasks = len(suite.tasks)
        self.slots: list[RobotSlot] = []
        per_robot = {}
        for t in range(n_tasks):
            base, extra = divmod(episodes_per_task, robots_per_task)
            for k in range(robots_per_task):
                per_robot[(t, k)] = base + (1 if k < extra else 0)
        rid = 0
        for k in range(robots_per_task):
            for task in suite.tasks:
                self.slots.append(RobotSlot(
                    robot_id=rid, task_id=task.task_id,
                    env=suite.make_env(task.task_id),
                    episodes_left=per_robot[(task.task_id, k)]))
                rid += 1
        self._episode_counter = {task.task_id: 0 for task in suite.tasks}
        for slot in self.slots:
            self._start_episode(slot)

    # -- episode lifecycle ------------------------------------------------------

    def _episode_seed(self, task_id: int, episode_index: int) -> int:
        mix = seeded_rng("episode", self.seed, self.round_index, task_id, episode_index)
        return int(mix.integers(0, 2 ** 31 - 1))

    def _start_episode(self, slot: RobotSlot):
        if slot.episodes_left <= 0:
            slot.status = STATUS_DONE
            slot.state = None
            return
        slot.episodes_left -= 1
        slot.episode_index = self._episode_counter[slot.task_id]
        self._episode_counter[slot.task_id] += 1
        state, obs = slot.env.reset(self._episode_seed(slot.task_id, slot.episode_index))
        slot.state = state
        slot.status = STATUS_AUTONOMOUS
        slot.flag_streak = 0
        slot.pending_verdict = None
        slot.last_verdict = None
        slot.rescue_steps_left = 0
        for name in ("frames", "proprios", "actions", "goals", "controls", "tokens", "latents"):
            getattr(slot, name).clear()
        self._observe(slot, obs)

    def _observe(self, slot: RobotSlot, obs):
        slot.frames.append(quantize_image(obs.image))
        slot.proprios.append(obs.proprio)

    def _finalize_episode(self, slot: RobotSlot):
        steps = len(slot.actions)
        rec = TrajectoryRecord(
            trajectory_id=f"r{self.round_index}-t{slot.task_id}-e{slot.episode_index}",
            round_index=self.round_index, robot_id=slot.robot_id, task_id=slot.task_id,
            images=np.stack(slot.frames[:steps]), proprios=np.stack(slot.proprios[:steps]),
            actions=np.stack(slot.actions).astype(np.float32),
            goal_flags=np.array(slot.goals, dtype=np.uint8),
            control_flags=np.array(slot.controls, dtype=np.uint8))
        rec.validate()
        self.records.append(rec)
        if self.human and self.human.controlled == slot.robot_id:
            self.human.controlled = None
        if self.human:
            self.human.drop(slot.robot_id)
        if self.live_controlled == slot.robot_id:
            self.live_controlled = None
        self._start_episode(slot)

    # -- per-tick helpers -------------------------------------------------------

    def _encode_new_frames(self):
        """Batched policy tokens (+ world-model latents) for each live robot's newest frame."""
        todo = [s for s in self.slots if s.live and len(s.tokens) < len(s.frames)]
        if not todo:
            return
        imgs = np.stack([s.frames[-1] for s in todo])
        props = np.stack([s.proprios[-1] for s in todo])
        tasks = np.array([s.task_id for s in todo])
        toks = self.policy.frame_tokens(imgs, props, tasks)
        if self.monitor is not None:
            zs = self.monitor.world_model.encode(imgs, props)
        for i, s in enumerate(todo):
            s.tokens.append(toks[i])
            if self.monitor is not None:
                s.latents.append(zs[i])

    def _policy_actions(self, slots: list[RobotSlot]) -> dict[int, np.ndarray]:
        if not slots:
            return {}
        ctx = self.policy.cfg.context
        windows = np.stack([
            self._padded_window(np.stack(s.tokens), ctx) for s in slots])
        acts = self.policy.act_from_tokens(windows, self.policy_rng, low_noise=self.low_noise)
        return {s.robot_id: acts[i] for i, s in enumerate(slots)}

    @staticmethod
    def _padded_window(arr: np.ndarray, length: int) -> np.ndarray:
        if len(arr) >= length:
            return arr[-length:]
        pad = np.repeat(arr[:1], length - len(arr), axis=0)
        return np.concatenate([pad, arr], axis=0)

    def _oracle_action(self, slot: RobotSlot) -> np.ndarray:
        return slot.env.expert_action(slot.state, noise_seed=self.seed ^ slot.robot_id,
                                      noise_scale=self.human.cfg.noise,
                                      speed=self.human.cfg.speed)

    # -- monitoring ---------------------------------------------------------------

    def _run_monitor(self):
        mon = self.monitor
        eligible = [s for s in self.slots
                    if s.live and s.status in (STATUS_AUTONOMOUS, STATUS_FLAGGED)]
        if not eligible:
            return
        T = mon.world_model.cfg.history_length
        hist = np.stack([self._padded_window(np.stack(s.latents), T) for s in eligible])
        tasks = np.array([s.task_id for s in eligible])
        verdicts = mon.evaluate_batch(hist, tasks, self.monitor_rng)
        for s, v in zip(eligible, verdicts):
            s.last_verdict = v
            entry = mon.ood.tasks.get(s.task_id)
            self.verdict_log.append({
                "tick": self.tick_index, "robot_id": s.robot_id, "task_id": s.task_id,
                "episode_index": s.episode_index, "step": s.state.step_count,
                "failure_score": v.failure_score, "ood_distance": v.ood_distance,
                "failure_flag": v.failure_flag, "ood_flag": v.ood_flag,
                "combined_flag": v.combined_flag,
                "alpha": entry.alpha if entry else None,
            })
            if self.passive_monitor:
                continue
            if v.combined_flag:
                s.flag_streak += 1
            else:
                s.flag_streak = 0
                if s.status == STATUS_FLAGGED and s.pending_verdict is None:
                    s.status = STATUS_AUTONOMOUS
            if s.flag_streak >= mon.cfg.hysteresis and s.status == STATUS_AUTONOMOUS:
                s.status = STATUS_FLAGGED
                s.pending_verdict = v
                self.alerts_this_tick.append({
                    "tick": self.tick_index, "robot_id": s.robot_id, "task_id": s.task_id,
                    "failure_score": v.failure_score, "ood_distance": v.ood_distance,
                    "failure_flag": v.failure_flag, "ood_flag": v.ood_flag})
                if self.human:
                    self.human.enqueue(s.robot_id)

    # -- oracle arbitration ----------------------------------------------------------

    def _log_decision(self, kind: str, robot_id: int, action=None):
        entry = {"tick": self.tick_index, "kind": kind, "robot_id": robot_id}
        if action is not None:
            entry["action"] = [float(x) for x in action]
        self.decision_log.append(entry)

    def _oracle_arbitrate(self):
        oracle = self.human
        slot_by_id = {s.robot_id: s for s in self.slots}

        # release check for the currently held robot
        if oracle.controlled is not None:
            s = slot_by_id[oracle.controlled]
            release = (not s.live or s.rescue_steps_left <= 0
                       or s.state.prog_stage != s.rescue_stage)
            if release:
                if s.live:
                    s.status = STATUS_AUTONOMOUS
                    s.flag_streak = 0
                    s.pending_verdict = None
                self._log_decision("release_control", oracle.controlled)
                oracle.controlled = None

        if self.full_supervision:
            # round-1 style: watch every robot, treat hazards as implicit alerts
            for s in self.slots:
                if s.live and s.status == STATUS_AUTONOMOUS and s.env.true_failure(s.state):
                    oracle.enqueue(s.robot_id)

        if oracle.controlled is not None or not oracle.queue:
            return
        rid = oracle.queue.pop(0)
        s = slot_by_id[rid]
        if not s.live:
            return
        if self.full_supervision:
            should_take = s.env.true_failure(s.state)
        else:
            should_take = s.env.true_failure(s.state) or s.env.goal_regressing(s.state)
        if should_take:
            oracle.controlled = rid
            s.status = STATUS_HUMAN
            s.rescue_steps_left = oracle.cfg.resume_steps
            s.rescue_stage = s.state.prog_stage
            self._log_decision("take_control", rid)
        else:
            if s.status == STATUS_FLAGGED:
                s.status = STATUS_AUTONOMOUS
            s.flag_streak = 0
            s.pending_verdict = None
            self._log_decision("dismiss_alert", rid)

    # -- live-operator commands -------------------------------------------------------

    def apply_command(self, cmd: dict) -> dict:
        """Validate and apply one operator command; returns an ack/rejection dict."""
        kind = cmd.get("kind")
        rid = cmd.get("robot_id")
        slot = next((s for s in self.slots if s.robot_id == rid), None)
        if kind in ("take_control", "release_control", "teleop_action", "dismiss_alert") \
                and slot is None:
            return {"ok": False, "error": f"unknown robot {rid}"}
        if kind == "take_control":
            if self.live_controlled is not None and self.live_controlled != rid:
                return {"ok": False, "error": "another robot is already under control"}
            if not slot.live:
                return {"ok": False, "error": "robot has no active episode"}
            self.live_controlled = rid
            slot.status = STATUS_HUMAN
            return {"ok": True}
        if kind == "release_control":
            if self.live_controlled != rid:
                return {"ok": False, "error": "robot not under control"}
            self.live_controlled = None
            if slot.live:
                slot.status = STATUS_AUTONOMOUS
                slot.flag_streak = 0
                slot.pending_verdict = None
            return {"ok": True}
        if kind == "teleop_action":
            if self.live_controlled != rid:
                return {"ok": False, "error": "teleop requires control of the robot"}
            try:
                delta = np.asarray(cmd.get("action"), dtype=np.float64).reshape(3)
            except Exception:
                return {"ok": False, "error": "malformed action"}
            self._pending_teleop[rid] = delta
            return {"ok": True}
        if kind == "dismiss_alert":
            if slot.status == STATUS_FLAGGED:
                slot.status = STATUS_AUTONOMOUS
            slot.flag_streak = 0
            slot.pending_verdict = None
            return {"ok": True}
        return {"ok": False, "error": f"unknown command kind {kind!r}"}

    # -- main loop ----------------------------------------------------------------

    @property
    def done(self) -> bool:
        return all(s.status == STATUS_DONE for s in self.slots)

    def tick(self) -> dict:
        """Advance every live robot one step; returns the telemetry event."""
        self.alerts_this_tick = []
        self._encode_new_frames()

        live = [s for s in self.slots if s.live]
        policy_slots = [s for s in live if s.status in (STATUS_AUTONOMOUS, STATUS_FLAGGED)]
        actions = self._policy_actions(policy_slots)

        for s in live:
            if s.status == STATUS_HUMAN:
                if self.human and self.human.controlled == s.robot_id:
                    act = self._oracle_action(s)
                    self._log_decision("teleop_action", s.robot_id, act)
                    s.rescue_steps_left -= 1
                else:
                    act = self._pending_teleop.pop(s.robot_id, np.zeros(3))
                controlled = 1
            else:
                act = actions[s.robot_id]
                controlled = 0
            state, obs, goal = s.env.step(s.state, act)
            s.state = state
            s.actions.append(np.asarray(act, dtype=np.float32))
            s.goals.append(goal)
            s.controls.append(controlled)
            if not goal and state.step_count < s.env.task.horizon:
                self._observe(s, obs)

        if self.monitor is not None and self.tick_index % self.monitor.cfg.decision_stride == 0:
            self._run_monitor()
        if self.human is not None:
            self._oracle_arbitrate()

        event = self._emit_event()
        for s in list(self.slots):
            if s.live and (s.state.goal_reached or s.state.step_count >= s.env.task.horizon):
                self._finalize_episode(s)
        self.tick_index += 1
        return event

    def _emit_event(self) -> dict:
        robots = []
        for s in self.slots:
            v = s.last_verdict
            entry_alpha = None
            if self.monitor is not None:
                e = self.monitor.ood.tasks.get(s.task_id)
                entry_alpha = e.alpha if e else None
            robots.append({
                "robot_id": s.robot_id,
                "task_id": s.task_id,
                "task": self.suite.task(s.task_id).name,
                "status": s.status,
                "step": s.state.step_count if s.live else None,
                "episode_index": s.episode_index,
                "episodes_left": s.episodes_left,
                "failure_score": v.failure_score if v else None,
                "ood_distance": v.ood_distance if v else None,
                "alpha": entry_alpha,
                "failure_flag": v.failure_flag if v else False,
                "ood_flag": v.ood_flag if v else False,
            })
        finished = len(self.records)
        succ = sum(1 for r in self.records if r.success)
        human_steps = sum(int(r.control_flags.sum()) for r in self.records)
        total_steps = sum(r.num_steps for r in self.records)
        return {
            "tick": self.tick_index,
            "robots": robots,
            "alerts": list(self.alerts_this_tick),
            "metrics": {
                "episodes": finished,
                "successes": succ,
                "cpp": succ / finished if finished else None,
                "p_h": human_steps / total_steps if total_steps else 0.0,
            },
        }

    def result(self) -> RoundResult:
        if not self.done:
            raise FleetConfigError("round still in progress")
        recs = self.records
        p_h_per_task = {t.task_id: intervention_ratio(recs, t.task_id) for t in self.suite.tasks}
        human_steps = sum(int(r.control_flags.sum()) for r in recs)
        total_steps = sum(r.num_steps for r in recs)
        takeovers = sum(1 for d in self.decision_log if d["kind"] == "take_control")
        metrics = MetricsReport(
            round_index=self.round_index, episodes=len(recs),
            successes=sum(1 for r in recs if r.success),
            cpp=compute_cpp(recs), rohe=compute_rohe(recs),
            p_h=intervention_ratio(recs), p_h_per_task=p_h_per_task,
            intervention_count=takeovers, human_steps=human_steps, total_steps=total_steps)
        return RoundResult(records=recs, metrics=metrics,
                           decision_log=self.decision_log, verdict_log=self.verdict_log)


def run_round(suite: EnvSuite, policy: Policy, monitor: AnomalyMonitor | None,
              human: HumanOracle | None, round_index: int, episodes_per_task: int,
              seed: int, robots_per_task: int = 2, full_supervision: bool = False,
              passive_monitor: bool = False, max_ticks: int = 100000) -> RoundResult:
    engine = FleetEngine(suite, policy, monitor, human, round_index, episodes_per_task,
                         seed, robots_per_task=robots_per_task,
                         full_supervision=full_supervision, passive_monitor=passive_monitor)
    ticks = 0
    while not engine.done:
        engine.tick()
        ticks += 1
        if ticks > max_ticks:
            raise FleetConfigError("round exceeded tick budget")
    return engine.result()


def compute_overlap_accuracy(records: list[TrajectoryRecord], verdict_log: list[dict],
                             window: int, flavor: str = "combined_flag") -> dict:
    """Per task: fraction of human-takeover onsets preceded by a flag within
    `window` steps of the same episode. Tasks without takeovers are omitted."""
    by_episode: dict[tuple, list[dict]] = {}
    for v in verdict_log:
        by_episode.setdefault((v["task_id"], v["episode_index"]), []).append(v)
    hits: dict[int, list[int]] = {}
    for rec in records:
        c = rec.control_flags.astype(np.int64)
        onsets = np.flatnonzero((c[1:] == 1) & (c[:-1] == 0)) + 1
        if len(c) and c[0] == 1:
            onsets = np.concatenate([[0], onsets])
        if not len(onsets):
            continue
        key = (rec.task_id, int(rec.trajectory_id.split("-e")[-1]))
        verdicts = by_episode.get(key, [])
        for onset in onsets:
            flagged = any(v[flavor] and onset - window <= v["step"] < onset for v in verdicts)
            hits.setdefault(rec.task_id, []).append(1 if flagged else 0)
    return {tid: float(np.mean(h)) for tid, h in sorted(hits.items())}
