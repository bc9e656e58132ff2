"""Visual world model: image encoder/decoder plus stochastic latent dynamics.

The encoder maps an image + proprio frame to an RMS-normalized latent; the
decoder reconstructs the image; the dynamics model is a conditional VAE over a
fixed-length latent history (transformer trunk, Gaussian posterior, learnable
mixture prior) predicting the next latent. Trained once on demonstrations,
then frozen as the backbone for runtime anomaly prediction.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datastore import TrajectoryRecord
from .envsuite import dequantize_image
from .learncore import (
    Adam,
    Conv2d,
    Dense,
    GroupNorm,
    Lambda,
    Module,
    Sequential,
    Tensor,
    Transformer,
    concat,
    gaussian_reparameterize,
    kl_to_gaussian_mixture,
    load_arrays,
    load_module,
    no_grad,
    save_module,
    upsample2x,
)
from .seeding import seeded_rng


@dataclass
class WorldModelConfig:
    latent_dim: int = 32
    history_length: int = 10        # T
    future_horizon: int = 10        # L used for training unrolls
    num_futures: int = 20           # N sampled futures at monitoring time
    kl_weight: float = 1e-4
    width: int = 128
    depth: int = 2
    heads: int = 4
    prior_nodes: int = 10
    vae_latent_dim: int = 16
    enc_channels: tuple = (8, 16, 32)
    image_size: int = 32
    proprio_dim: int = 4
    stop_grad_targets: bool = False

    def validate(self):
        if min(self.history_length, self.future_horizon, self.num_futures) < 1:
            raise ValueError("history_length, future_horizon, num_futures must be >= 1")
        if self.latent_dim <= 0:
            raise ValueError("latent_dim must be positive")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "WorldModelConfig":
        doc = json.loads(text)
        doc["enc_channels"] = tuple(doc["enc_channels"])
        return cls(**doc)


def rms_norm(z: Tensor, eps: float = 1e-6) -> Tensor:
    """Fixed (non-learned) scale normalization; keeps latents comparable across models."""
    return z * ((z * z).mean(axis=-1, keepdims=True) + eps) ** -0.5


def _mlp(rng, in_dim, hidden, out_dim):
    return Sequential(Dense(in_dim, hidden, rng), Lambda(lambda t: t.gelu()), Dense(hidden, out_dim, rng))


class ImageEncoder(Module):
    def __init__(self, cfg: WorldModelConfig, rng):
        c1, c2, c3 = cfg.enc_channels
        self.conv = Sequential(
            Conv2d(3, c1, rng, stride=2), GroupNorm(min(8, c1), c1), Lambda(lambda t: t.silu()),
            Conv2d(c1, c2, rng, stride=2), GroupNorm(8, c2), Lambda(lambda t: t.silu()),
            Conv2d(c2, c3, rng, stride=2), GroupNorm(8, c3), Lambda(lambda t: t.silu()),
        )
        side = cfg.image_size // 8
        self.flat_dim = c3 * side * side
        self.proprio_fc = Dense(cfg.proprio_dim, 16, rng)
        self.head = Dense(self.flat_dim + 16, cfg.latent_dim, rng)

    def forward(self, images: Tensor, proprios: Tensor) -> Tensor:
        B = images.shape[0]
        h = self.conv(images).reshape(B, self.flat_dim)
        p = self.proprio_fc(proprios).tanh()
        return rms_norm(self.head(concat([h, p], axis=1)))


class ImageDecoder(Module):
    def __init__(self, cfg: WorldModelConfig, rng):
        c1, c2, c3 = cfg.enc_channels
        self.side = cfg.image_size // 8
        self.c3 = c3
        self.fc = Dense(cfg.latent_dim, c3 * self.side * self.side, rng)
        self.conv1 = Conv2d(c3, c2, rng, stride=1)
        self.gn1 = GroupNorm(8, c2)
        self.conv2 = Conv2d(c2, c1, rng, stride=1)
        self.gn2 = GroupNorm(min(8, c1), c1)
        self.conv3 = Conv2d(c1, 3, rng, stride=1)

    def forward(self, z: Tensor) -> Tensor:
        B = z.shape[0]
        h = self.fc(z).reshape(B, self.c3, self.side, self.side)
        h = self.gn1(self.conv1(upsample2x(h))).silu()
        h = self.gn2(self.conv2(upsample2x(h))).silu()
        return self.conv3(upsample2x(h)).sigmoid()


class DynamicsModel(Module):
    """cVAE over latent histories: shared trunk, posterior/prior/output heads."""

    def __init__(self, cfg: WorldModelConfig, rng):
        self.cfg = cfg
        self.trunk = Transformer(cfg.latent_dim, cfg.width, cfg.depth, cfg.heads,
                                 max_len=cfg.history_length, rng=rng, causal=False)
        v = cfg.vae_latent_dim
        self.posterior = _mlp(rng, cfg.width + cfg.latent_dim, cfg.width, 2 * v)
        self.prior = _mlp(rng, cfg.width, cfg.width, cfg.prior_nodes * (2 * v + 1))
        self.out = _mlp(rng, cfg.width + v, cfg.width, cfg.latent_dim)

    def summarize(self, history: Tensor) -> Tensor:
        """(B, T, D) latent history -> (B, width) context, read at the last token."""
        feats = self.trunk(history)
        return feats[:, -1, :]

    def prior_params(self, h: Tensor):
        B = h.shape[0]
        K, v = self.cfg.prior_nodes, self.cfg.vae_latent_dim
        raw = self.prior(h).reshape(B, K, 2 * v + 1)
        means = raw[:, :, :v]
        log_vars = raw[:, :, v:2 * v].tanh() * 4.0      # keep variances in a sane range
        logits = raw[:, :, 2 * v].reshape(B, K)
        return means, log_vars, logits

    def posterior_params(self, h: Tensor, z_next: Tensor):
        stats = self.posterior(concat([h, z_next], axis=1))
        v = self.cfg.vae_latent_dim
        return stats[:, :v], stats[:, v:].tanh() * 4.0

    def decode_step(self, h: Tensor, v_sample: Tensor, z_prev: Tensor) -> Tensor:
        """Residual prediction: the head learns the latent delta from the last step."""
        return rms_norm(z_prev + self.out(concat([h, v_sample], axis=1)))


class WorldModel(Module):
    def __init__(self, cfg: WorldModelConfig, seed: int):
        cfg.validate()
        rng = seeded_rng("worldmodel-init", seed)
        self.cfg = cfg
        self.seed = seed
        self.encoder = ImageEncoder(cfg, rng)
        self.decoder = ImageDecoder(cfg, rng)
        self.dynamics = DynamicsModel(cfg, rng)

    # -- inference ------------------------------------------------------------

    def encode(self, images_u8: np.ndarray, proprios: np.ndarray) -> np.ndarray:
        """(B, 3, H, W) uint8 + (B, P) -> (B, latent_dim) float32."""
        if images_u8.ndim != 4 or images_u8.shape[1:] != (3, self.cfg.image_size, self.cfg.image_size):
            raise ValueError(f"bad image batch shape {images_u8.shape}")
        with no_grad():
            z = self.encoder(Tensor(dequantize_image(images_u8)), Tensor(proprios.astype(np.float32)))
        return z.data

    def decode(self, z: np.ndarray) -> np.ndarray:
        if z.ndim != 2 or z.shape[1] != self.cfg.latent_dim:
            raise ValueError(f"bad latent shape {z.shape}")
        with no_grad():
            x = self.decoder(Tensor(z.astype(np.float32)))
        return x.data

    def _pad_history(self, history: np.ndarray) -> np.ndarray:
        """Left-pad (n, D) with repeats of the earliest latent up to T."""
        if history.ndim == 2:
            history = history[None]
        n = history.shape[1]
        if n == 0:
            raise ValueError("empty latent history")
        T = self.cfg.history_length
        if n >= T:
            return history[:, -T:]
        pad = np.repeat(history[:, :1], T - n, axis=1)
        return np.concatenate([pad, history], axis=1)

    def predict_next(self, history: np.ndarray, rng: np.random.Generator,
                     use_prior: bool = True, sample_mode: str = "sample") -> np.ndarray:
        """One-step latent prediction from a (n<=T, D) or (B, n, D) history."""
        hist = self._pad_history(np.asarray(history, dtype=np.float32))
        with no_grad():
            hist_t = Tensor(hist)
            h = self.dynamics.summarize(hist_t)
            v = self._sample_prior(h, rng, sample_mode)
            z = self.dynamics.decode_step(h, Tensor(v), hist_t[:, -1, :])
        out = z.data
        return out[0] if np.asarray(history).ndim == 2 else out

    def _sample_prior(self, h: Tensor, rng: np.random.Generator, sample_mode: str) -> np.ndarray:
        means, log_vars, logits = self.dynamics.prior_params(h)
        m, lv, lg = means.data, log_vars.data, logits.data
        B, K, v = m.shape
        if sample_mode == "mean":
            idx = np.argmax(lg, axis=-1)
            return m[np.arange(B), idx]
        shifted = lg - lg.max(axis=-1, keepdims=True)
        probs = np.exp(shifted)
        probs /= probs.sum(axis=-1, keepdims=True)
        # one categorical draw + one gaussian draw per row, in row order
        u = rng.random(B)
        cdf = np.cumsum(probs, axis=-1)
        ks = (u[:, None] > cdf).sum(axis=-1)
        eps = rng.standard_normal((B, v)).astype(np.float32)
        sel = np.arange(B)
        return m[sel, ks] + np.exp(0.5 * lv[sel, ks]) * eps

    def rollout_futures(self, history: np.ndarray, L: int, N: int,
                        rng: np.random.Generator, sample_mode: str = "sample") -> np.ndarray:
        """N autoregressive L-step latent futures from one history: (N, L, D)."""
        if N < 1 or L < 1:
            raise ValueError("N and L must be >= 1")
        hist = self._pad_history(np.asarray(history, dtype=np.float32))
        return self.rollout_futures_batch(np.repeat(hist, N, axis=0), L, rng, sample_mode).reshape(N, L, -1)

    def rollout_futures_batch(self, histories: np.ndarray, L: int,
                              rng: np.random.Generator, sample_mode: str = "sample") -> np.ndarray:
        """(B, T, D) histories -> (B, L, D) one future per row, batched."""
        window = self._pad_history(histories).copy()
        B, T, D = window.shape
        out = np.empty((B, L, D), dtype=np.float32)
        with no_grad():
            for step in range(L):
                window_t = Tensor(window)
                h = self.dynamics.summarize(window_t)
                v = self._sample_prior(h, rng, sample_mode)
                z = self.dynamics.decode_step(h, Tensor(v), window_t[:, -1, :]).data
                out[:, step] = z
                window = np.concatenate([window[:, 1:], z[:, None, :]], axis=1)
        return out

    # -- persistence ---------------------------------------------------------

    def save(self, path: str | Path):
        path = Path(path)
        save_module(path, self)
        path.with_suffix(".config.json").write_text(self.cfg.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "WorldModel":
        path = Path(path)
        cfg = WorldModelConfig.from_json(path.with_suffix(".config.json").read_text())
        model = cls(cfg, seed=0)
        load_module(path, model)
        return model


# -- training ------------------------------------------------------------------


def _episode_arrays(records: list[TrajectoryRecord]):
    images = [r.images for r in records]
    proprios = [r.proprios.astype(np.float32) for r in records]
    return images, proprios


def encode_records(model: WorldModel, records: list[TrajectoryRecord],
                   batch: int = 256) -> list[np.ndarray]:
    """Frozen-encoder embeddings per trajectory."""
    images = np.concatenate([r.images for r in records], axis=0)
    proprios = np.concatenate([r.proprios for r in records], axis=0).astype(np.float32)
    zs = []
    for i in range(0, len(images), batch):
        zs.append(model.encode(images[i:i + batch], proprios[i:i + batch]))
    z = np.concatenate(zs, axis=0)
    out, off = [], 0
    for r in records:
        out.append(z[off:off + r.num_steps])
        off += r.num_steps
    return out


@dataclass
class TrainReport:
    epochs: list[dict]

    def final(self) -> dict:
        return self.epochs[-1]


def train_world_model(records: list[TrajectoryRecord], cfg: WorldModelConfig, seed: int,
                      epochs: int = 8, batch_size: int = 48, lr: float = 3e-4,
                      val_records: list[TrajectoryRecord] | None = None,
                      recon_frames: int = 64, recon_warmup_steps: int = 250,
                      log_fn=None) -> tuple[WorldModel, TrainReport]:
    """Joint training: image L2 + future-embedding L2 + beta * mixture KL.

    A reconstruction-only warmup settles the encoder/decoder before windowed
    joint training. During joint epochs, history latents come from a per-epoch
    cache (conditioning only); target latents are encoded fresh so the
    prediction loss reaches the encoder. Deterministic under (records, cfg, seed).
    """
    cfg.validate()
    if not records:
        raise ValueError("empty dataset")
    T, L = cfg.history_length, cfg.future_horizon
    usable = [r for r in records if r.num_steps >= L + 1]
    if not usable:
        raise ValueError(f"no trajectory long enough for a {L}-step unroll")

    model = WorldModel(cfg, seed)
    opt = Adam(model.parameters(), lr=lr)
    rng = seeded_rng("worldmodel-train", seed)

    images, proprios = _episode_arrays(usable)
    all_images = np.concatenate(images, axis=0)
    all_props = np.concatenate(proprios, axis=0)
    n_frames = len(all_images)
    offsets = np.cumsum([0] + [len(x) for x in images])
    # valid window anchor t: targets are steps t+1 .. t+L; flat step index rows
    anchor_rows = []
    for i, r in enumerate(usable):
        for t in range(r.num_steps - L):
            steps = np.clip(np.arange(t - T + 1, t + L + 1), 0, r.num_steps - 1)
            anchor_rows.append(offsets[i] + steps)
    anchor_rows = np.asarray(anchor_rows)
    joint_steps = epochs * (len(anchor_rows) // batch_size)
    kl_ramp = max(1, joint_steps // 3)

    report = TrainReport(epochs=[])

    # phase A: reconstruction warmup on plain frame batches
    warm_sum, warm_n = 0.0, 0
    for step in range(recon_warmup_steps):
        pick = rng.choice(n_frames, size=min(96, n_frames), replace=False)
        imgs = dequantize_image(all_images[pick])
        z = model.encoder(Tensor(imgs), Tensor(all_props[pick]))
        loss = ((model.decoder(z) - Tensor(imgs)) ** 2).mean()
        model.zero_grad()
        loss.backward()
        opt.step()
        warm_sum += loss.item()
        warm_n += 1
        if log_fn and (step + 1) % 100 == 0:
            log_fn(f"worldmodel warmup {step + 1}/{recon_warmup_steps}: img={warm_sum / warm_n:.5f}")
            warm_sum, warm_n = 0.0, 0

    def encode_all() -> np.ndarray:
        out = np.empty((n_frames, cfg.latent_dim), dtype=np.float32)
        with no_grad():
            for i in range(0, n_frames, 512):
                out[i:i + 512] = model.encoder(
                    Tensor(dequantize_image(all_images[i:i + 512])),
                    Tensor(all_props[i:i + 512])).data
        return out

    # phase B: joint windowed training
    step_counter = 0
    for epoch in range(epochs):
        z_cache = encode_all()
        order = rng.permutation(len(anchor_rows))
        sums = {"img": 0.0, "pred": 0.0, "kl": 0.0}
        nb = 0
        for bi in range(len(anchor_rows) // batch_size):
            rows = anchor_rows[order[bi * batch_size:(bi + 1) * batch_size]]
            B = len(rows)
            tgt_rows = rows[:, T:].reshape(-1)
            z_hist = z_cache[rows[:, :T]]

            tgt_imgs = dequantize_image(all_images[tgt_rows])
            z_tgt_flat = model.encoder(Tensor(tgt_imgs), Tensor(all_props[tgt_rows]))

            # image reconstruction on a seeded subsample of the target frames
            pick = rng.choice(B * L, size=min(recon_frames, B * L), replace=False)
            recon = model.decoder(z_tgt_flat[pick])
            img_loss = ((recon - Tensor(tgt_imgs[pick])) ** 2).mean()

            # autoregressive latent unroll with posterior samples
            targets = z_tgt_flat.reshape(B, L, cfg.latent_dim)
            if cfg.stop_grad_targets:
                targets = targets.detach()
            window = Tensor(z_hist)
            pred_terms, kl_terms = [], []
            for j in range(L):
                h = model.dynamics.summarize(window)
                z_tgt = targets[:, j, :]
                mu, log_var = model.dynamics.posterior_params(h, z_tgt)
                pm, plv, plg = model.dynamics.prior_params(h)
                v = gaussian_reparameterize(mu, log_var, rng)
                z_hat = model.dynamics.decode_step(h, v, window[:, -1, :])
                pred_terms.append(((z_hat - z_tgt) ** 2).mean())
                kl_terms.append(kl_to_gaussian_mixture(mu, log_var, pm, plv, plg))
                window = concat([window[:, 1:, :], z_hat.reshape(B, 1, cfg.latent_dim)], axis=1)

            pred_loss = sum(pred_terms[1:], pred_terms[0]) * (1.0 / L)
            kl_loss = sum(kl_terms[1:], kl_terms[0]) * (1.0 / L)
            beta = cfg.kl_weight * min(1.0, (step_counter + 1) / kl_ramp)
            loss = img_loss + pred_loss + beta * kl_loss

            model.zero_grad()
            loss.backward()
            opt.step()
            step_counter += 1
            nb += 1
            sums["img"] += img_loss.item()
            sums["pred"] += pred_loss.item()
            sums["kl"] += kl_loss.item()

        entry = {k: v / max(nb, 1) for k, v in sums.items()}
        entry["epoch"] = epoch
        if val_records:
            entry["val_pred"] = eval_prediction_mse(model, val_records)
        report.epochs.append(entry)
        if log_fn:
            log_fn(f"worldmodel epoch {epoch}: " + " ".join(f"{k}={v:.5f}" for k, v in entry.items() if k != "epoch"))
    return model, report


def eval_prediction_mse(model: WorldModel, records: list[TrajectoryRecord],
                        max_windows: int = 400) -> float:
    """Mean-mode one-step-chain MSE of L-step unrolls on held-out trajectories."""
    cfg = model.cfg
    T, L = cfg.history_length, cfg.future_horizon
    usable = [r for r in records if r.num_steps >= L + 1]
    if not usable:
        return float("nan")
    latents = encode_records(model, usable)
    anchors = [(i, t) for i, z in enumerate(latents) for t in range(len(z) - L)]
    anchors = anchors[:max_windows]
    hist = np.stack([
        latents[i][np.clip(np.arange(t - T + 1, t + 1), 0, None)] for i, t in anchors
    ])
    futs = model.rollout_futures_batch(hist, L, seeded_rng("eval-mse", 0), sample_mode="mean")
    tgts = np.stack([latents[i][t + 1:t + 1 + L] for i, t in anchors])
    return float(np.mean((futs - tgts) ** 2))
