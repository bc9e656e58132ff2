"""Multi-task behavior-cloned policy: conv encoder with per-task feature
modulation, a causal transformer over a 20-step context, and a GMM action head.

Training minimizes negative mixture log-likelihood at every window position;
deployment reads the final position of the (left-padded) context window, so
train and test see identically shaped inputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datastore import TrajectoryRecord
from .envsuite import EnvSuite, dequantize_image
from .learncore import (
    Adam,
    Conv2d,
    Dense,
    GroupNorm,
    Lambda,
    Module,
    Sequential,
    Tensor,
    concat,
    floor_std,
    gmm_log_prob,
    gmm_sample,
    load_module,
    no_grad,
    save_module,
)
from .seeding import seeded_rng


@dataclass
class PolicyConfig:
    num_tasks: int = 5
    action_dim: int = 3
    context: int = 20
    width: int = 64
    depth: int = 2
    heads: int = 4
    gmm_modes: int = 5
    min_std: float = 0.005
    feature_dim: int = 64
    enc_channels: tuple = (8, 16, 24)
    crop: int = 28
    image_size: int = 32
    proprio_dim: int = 4

    def to_json(self) -> str:
        import dataclasses
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PolicyConfig":
        doc = json.loads(text)
        doc["enc_channels"] = tuple(doc["enc_channels"])
        return cls(**doc)


@dataclass
class FinetuneSpec:
    """Optimization budget and control-mode sample weights.

    Budgets are gradient steps; bootstrap:finetune defaults keep the 3:1 ratio.
    """
    steps: int = 400
    batch_size: int = 8
    lr: float = 1e-4
    weight_decay: float = 1e-4
    control_weights: dict = None   # label -> weight; human steps upweighted

    def __post_init__(self):
        if self.control_weights is None:
            self.control_weights = {"rollout": 1.0, "human": 3.0}
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if any(w <= 0 for w in self.control_weights.values()):
            raise ValueError("control weights must be positive")


# the transformer sees conv features + proprio and task embeddings per frame
def _token_dim(cfg: PolicyConfig) -> int:
    return cfg.feature_dim + 16 + 8


class Policy(Module):
    def __init__(self, cfg: PolicyConfig, seed: int):
        from .learncore import Transformer

        rng = seeded_rng("policy-init", seed)
        self.cfg = cfg
        c1, c2, c3 = cfg.enc_channels
        self.conv = Sequential(
            Conv2d(3, c1, rng, stride=2), GroupNorm(min(8, c1), c1), Lambda(lambda t: t.silu()),
            Conv2d(c1, c2, rng, stride=2), GroupNorm(8, c2), Lambda(lambda t: t.silu()),
            Conv2d(c2, c3, rng, stride=2), GroupNorm(8, c3), Lambda(lambda t: t.silu()),
        )
        side = (cfg.crop + 7) // 8
        self.flat_dim = c3 * side * side
        self.feat_fc = Dense(self.flat_dim, cfg.feature_dim, rng)
        self.film = Dense(cfg.num_tasks, 2 * cfg.feature_dim, rng)
        self.proprio_fc = Dense(cfg.proprio_dim, 16, rng)
        self.task_fc = Dense(cfg.num_tasks, 8, rng)
        self.trunk = Transformer(_token_dim(cfg), cfg.width, cfg.depth, cfg.heads,
                                 max_len=cfg.context, rng=rng, causal=True)
        # the head sees the current token alongside the temporal summary, so the
        # present state is never washed out by history
        K, A = cfg.gmm_modes, cfg.action_dim
        self.head = Dense(cfg.width + _token_dim(cfg), K * (2 * A + 1), rng)

    # -- per-frame encoding ----------------------------------------------------

    def encode_frames(self, images: Tensor, proprios: Tensor, task_onehot: Tensor) -> Tensor:
        """Cropped images (B,3,c,c) + proprio (B,P) + one-hot (B,NT) -> tokens (B, token_dim)."""
        B = images.shape[0]
        h = self.feat_fc(self.conv(images).reshape(B, self.flat_dim))
        gamma_beta = self.film(task_onehot)
        gamma = gamma_beta[:, :self.cfg.feature_dim]
        beta = gamma_beta[:, self.cfg.feature_dim:]
        h = h * (1.0 + gamma) + beta
        p = self.proprio_fc(proprios).tanh()
        t = self.task_fc(task_onehot).tanh()
        return concat([h, p, t], axis=1)

    def gmm_params(self, tokens: Tensor):
        """Token windows (B, T, token_dim) -> per-position mixture parameters."""
        B, T, _ = tokens.shape
        K, A = self.cfg.gmm_modes, self.cfg.action_dim
        trunk_out = self.trunk(tokens)
        out = self.head(concat([trunk_out, tokens], axis=2)).reshape(B, T, K, 2 * A + 1)
        means = out[:, :, :, :A].tanh() * 1.2        # actions live in [-1, 1]
        log_stds = floor_std(out[:, :, :, A:2 * A], self.cfg.min_std)
        logits = out[:, :, :, 2 * A].reshape(B, T, K)
        return means, log_stds, logits

    # -- inference --------------------------------------------------------------

    def crop_center(self, images_u8: np.ndarray) -> np.ndarray:
        c = self.cfg.crop
        off = (self.cfg.image_size - c) // 2
        return images_u8[..., off:off + c, off:off + c]

    def frame_tokens(self, images_u8: np.ndarray, proprios: np.ndarray,
                     task_ids: np.ndarray) -> np.ndarray:
        """Inference-path token computation (center crop, no tape)."""
        onehot = np.zeros((len(task_ids), self.cfg.num_tasks), dtype=np.float32)
        onehot[np.arange(len(task_ids)), task_ids] = 1.0
        with no_grad():
            toks = self.encode_frames(Tensor(dequantize_image(self.crop_center(images_u8))),
                                      Tensor(proprios.astype(np.float32)), Tensor(onehot))
        return toks.data

    def act_from_tokens(self, token_windows: np.ndarray, rng: np.random.Generator,
                        low_noise: bool = True) -> np.ndarray:
        """(B, n<=context, token_dim) -> (B, action_dim); left-pads short windows."""
        tw = np.asarray(token_windows, dtype=np.float32)
        if tw.ndim == 2:
            tw = tw[None]
        n = tw.shape[1]
        if n == 0:
            raise ValueError("empty observation history")
        if n < self.cfg.context:
            pad = np.repeat(tw[:, :1], self.cfg.context - n, axis=1)
            tw = np.concatenate([pad, tw], axis=1)
        elif n > self.cfg.context:
            tw = tw[:, -self.cfg.context:]
        with no_grad():
            means, log_stds, logits = self.gmm_params(Tensor(tw))
        m = means.data[:, -1]
        s = log_stds.data[:, -1]
        lg = logits.data[:, -1]
        return np.clip(gmm_sample(m, s, lg, rng, low_noise=low_noise), -1.0, 1.0)

    def act(self, images_u8: np.ndarray, proprios: np.ndarray, task_id: int,
            rng: np.random.Generator, low_noise: bool = True) -> np.ndarray:
        """Single-robot convenience path over a (n, 3, H, W) history."""
        if task_id < 0 or task_id >= self.cfg.num_tasks:
            raise ValueError(f"unknown task id {task_id}")
        toks = self.frame_tokens(images_u8, proprios, np.full(len(images_u8), task_id))
        return self.act_from_tokens(toks[None], rng, low_noise=low_noise)[0]

    # -- persistence -----------------------------------------------------------

    def save(self, path: str | Path):
        path = Path(path)
        save_module(path, self)
        path.with_suffix(".config.json").write_text(self.cfg.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "Policy":
        path = Path(path)
        cfg = PolicyConfig.from_json(path.with_suffix(".config.json").read_text())
        policy = cls(cfg, seed=0)
        load_module(path, policy)
        return policy


# -- training -------------------------------------------------------------------


def _control_label(c: int) -> str:
    return "human" if c else "rollout"


def _train(policy: Policy, records: list[TrajectoryRecord], spec: FinetuneSpec,
           seed: int, weighted: bool, log_fn=None) -> list[float]:
    cfg = policy.cfg
    rng = seeded_rng("policy-train", seed)
    all_images = np.concatenate([r.images for r in records], axis=0)
    all_props = np.concatenate([r.proprios for r in records], axis=0).astype(np.float32)
    all_actions = np.concatenate([r.actions for r in records], axis=0).astype(np.float32)
    all_ctrl = np.concatenate([r.control_flags for r in records], axis=0)
    task_of = np.concatenate([np.full(r.num_steps, r.task_id) for r in records])
    offsets = np.cumsum([0] + [r.num_steps for r in records])

    # window row per anchor step: indices clipped low to repeat the first frame
    rows = []
    for i, r in enumerate(records):
        ends = np.arange(r.num_steps)
        idx = np.clip(ends[:, None] + np.arange(-cfg.context + 1, 1)[None, :], 0, None)
        rows.append(offsets[i] + idx)
    rows = np.concatenate(rows, axis=0)

    if weighted:
        w = np.array([spec.control_weights.get(_control_label(c), 1.0) for c in all_ctrl])
        probs = w / w.sum()
    else:
        probs = None

    opt = Adam(policy.parameters(), lr=spec.lr, weight_decay=spec.weight_decay,
               decoupled_weight_decay=True)
    losses = []
    onehot_lut = np.eye(cfg.num_tasks, dtype=np.float32)
    crop_span = cfg.image_size - cfg.crop
    for step in range(spec.steps):
        pick = rng.choice(len(rows), size=spec.batch_size, replace=True, p=probs)
        idx = rows[pick]                                   # (B, T)
        B, T = idx.shape
        flat = idx.reshape(-1)
        imgs = all_images[flat]
        # random crop augmentation, one offset per frame
        offs = rng.integers(0, crop_span + 1, size=(len(flat), 2))
        cropped = np.empty((len(flat), 3, cfg.crop, cfg.crop), dtype=imgs.dtype)
        for j in range(len(flat)):
            oy, ox = offs[j]
            cropped[j] = imgs[j, :, oy:oy + cfg.crop, ox:ox + cfg.crop]

        toks = policy.encode_frames(Tensor(dequantize_image(cropped)),
                                    Tensor(all_props[flat]),
                                    Tensor(onehot_lut[task_of[flat]]))
        means, log_stds, logits = policy.gmm_params(toks.reshape(B, T, _token_dim(cfg)))
        actions = Tensor(all_actions[flat].reshape(B, T, cfg.action_dim))
        nll = -gmm_log_prob(means, log_stds, logits, actions).mean()

        policy.zero_grad()
        nll.backward()
        opt.step()
        losses.append(nll.item())
        if log_fn and (step + 1) % 100 == 0:
            log_fn(f"policy step {step + 1}/{spec.steps}: nll={np.mean(losses[-100:]):.4f}")
    return losses


def train_bc(records: list[TrajectoryRecord], cfg: PolicyConfig, spec: FinetuneSpec,
             seed: int, log_fn=None) -> tuple[Policy, list[float]]:
    """Bootstrap a policy by behavioral cloning of demonstrations."""
    if not records:
        raise ValueError("empty dataset")
    tasks_present = {r.task_id for r in records}
    policy = Policy(cfg, seed)
    losses = _train(policy, records, spec, seed, weighted=False, log_fn=log_fn)
    if not tasks_present:
        raise ValueError("no tasks in dataset")
    return policy, losses


def finetune(policy: Policy, records: list[TrajectoryRecord], spec: FinetuneSpec,
             seed: int, log_fn=None) -> list[float]:
    """Continue optimization on aggregated deployment data with control-weighted sampling."""
    if not records:
        raise ValueError("empty buffer")
    return _train(policy, records, spec, seed, weighted=True, log_fn=log_fn)


# -- evaluation -------------------------------------------------------------------


def evaluate_autonomous(policy: Policy, suite: EnvSuite, episodes_per_task: int,
                        seed: int, low_noise: bool = True) -> dict:
    """Per-task and mean success without interventions; episodes run in lockstep."""
    from .envsuite import quantize_image

    if episodes_per_task < 1:
        raise ValueError("episodes_per_task must be >= 1")
    per_task = {}
    for task in suite.tasks:
        E = episodes_per_task
        envs = [suite.make_env(task.task_id) for _ in range(E)]
        states, frames, props = [], [], []
        for e, env in enumerate(envs):
            st, obs = env.reset(seed ^ (e + 1) ^ (task.task_id << 16))
            states.append(st)
            frames.append(quantize_image(obs.image))
            props.append(obs.proprio)
        toks = policy.frame_tokens(np.stack(frames), np.stack(props), np.full(E, task.task_id))
        windows = [[toks[e]] for e in range(E)]
        done, success = [False] * E, [False] * E
        rng = seeded_rng("eval", seed, task.task_id)
        for _ in range(task.horizon):
            live = [e for e in range(E) if not done[e]]
            if not live:
                break
            batch = np.stack([np.stack(windows[e][-policy.cfg.context:]) for e in live])
            acts = policy.act_from_tokens(batch, rng, low_noise=low_noise)
            new_frames, new_props, alive = [], [], []
            for bi, e in enumerate(live):
                st, obs, goal = envs[e].step(states[e], acts[bi])
                states[e] = st
                if goal:
                    done[e], success[e] = True, True
                elif st.step_count >= task.horizon:
                    done[e] = True
                else:
                    alive.append(e)
                    new_frames.append(quantize_image(obs.image))
                    new_props.append(obs.proprio)
            if alive:
                toks = policy.frame_tokens(np.stack(new_frames), np.stack(new_props),
                                           np.full(len(alive), task.task_id))
                for bi, e in enumerate(alive):
                    windows[e].append(toks[bi])
        per_task[task.name] = sum(success) / E
    per_task["mean"] = float(np.mean([v for k, v in per_task.items() if k != "mean"]))
    return per_task
