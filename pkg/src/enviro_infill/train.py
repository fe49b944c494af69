"""Conditional flow-matching training for the velocity model.

Every random draw (flow steps, noise, span masks, condition dropout and
dynamic mixing) comes from one numpy ``Generator``; a run is reproducible
from its seed, and a checkpoint stores that generator's state so a resumed
run continues the exact same stream.
"""
import copy
import csv
import json
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import corpus, dsp, infer, net, ses
from .errors import ConfigError, DivergenceError, ShapeError

log = logging.getLogger(__name__)


class DegenerateItemWarning(UserWarning):
    pass


@dataclass
class FlowPoint:
    x0: np.ndarray
    x1: np.ndarray
    t: np.ndarray
    psi_t: np.ndarray


def make_flow_point(x1, t, rng):
    """Noise ``x0``, target ``x1`` and the straight-line point between them.

    ``t`` is a scalar or one value per leading (batch) index of ``x1``.
    """
    x1 = np.asarray(x1, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if np.any((t < 0) | (t > 1)):
        raise ValueError("flow step must lie in [0, 1]")
    x0 = rng.standard_normal(x1.shape)
    tt = t.reshape(t.shape + (1,) * (x1.ndim - t.ndim))
    return FlowPoint(x0, x1, t, (1 - tt) * x0 + tt * x1)


@dataclass
class DropoutPolicy:
    """Condition dropout, resolved in priority order all > env > speech+text."""

    p_all_null: float = 0.1
    p_env_null: float = 0.1
    p_speech_text_null: float = 0.1

    def __post_init__(self):
        for name in ("p_all_null", "p_env_null", "p_speech_text_null"):
            p = getattr(self, name)
            if not 0 <= p <= 1:
                raise ConfigError(f"{name} must lie in [0, 1], got {p}")


PATTERNS = {
    (False, False): "full",
    (False, True): "env_null",
    (True, False): "speech_text_null",
    (True, True): "all_null",
}


def draw_pattern(policy, rng):
    """Return ``(drop_text_speaker, drop_env)`` for one draw."""
    u = rng.random()
    if u < policy.p_all_null:
        return True, True
    u -= policy.p_all_null
    if u < policy.p_env_null:
        return False, True
    u -= policy.p_env_null
    if u < policy.p_speech_text_null:
        return True, False
    return False, False


def pattern_name(drop_text_speaker, drop_env):
    return PATTERNS[(bool(drop_text_speaker), bool(drop_env))]


def apply_dropout(cond, policy, rng):
    return net.null_out(cond, *draw_pattern(policy, rng))


@dataclass
class TrainBatch:
    """Stacked, right-padded training items in the model's normalized domain.

    x1, c_spk, c_env: (B, M, L) float; text: (B, L) int; m_spk, m_env and
    frame_mask: (B, L) with 1 = masked / valid.
    """

    x1: np.ndarray
    c_spk: np.ndarray
    c_env: np.ndarray
    text: np.ndarray
    m_spk: np.ndarray
    m_env: np.ndarray
    frame_mask: np.ndarray

    def __post_init__(self):
        B, M, L = self.x1.shape
        for name in ("c_spk", "c_env"):
            if getattr(self, name).shape != (B, M, L):
                raise ShapeError(f"{name} must be {(B, M, L)}")
        for name in ("text", "m_spk", "m_env", "frame_mask"):
            if getattr(self, name).shape != (B, L):
                raise ShapeError(f"{name} must be {(B, L)}")

    def __len__(self):
        return self.x1.shape[0]

    @classmethod
    def stack(cls, items):
        """``items``: dicts with x1, c_spk, c_env (M, L_i), text, m_spk, m_env (L_i,)."""
        if not items:
            raise ConfigError("empty batch")
        M = items[0]["x1"].shape[0]
        L = max(it["x1"].shape[1] for it in items)
        B = len(items)
        out = {k: np.zeros((B, M, L)) for k in ("x1", "c_spk", "c_env")}
        out["text"] = np.full((B, L), corpus.FILL_ID, dtype=np.int64)
        for k in ("m_spk", "m_env", "frame_mask"):
            out[k] = np.zeros((B, L), dtype=np.int8)
        for b, it in enumerate(items):
            n = it["x1"].shape[1]
            for k in ("x1", "c_spk", "c_env"):
                out[k][b, :, :n] = it[k]
            out["text"][b, :n] = it["text"]
            out["m_spk"][b, :n] = it["m_spk"]
            out["m_env"][b, :n] = it["m_env"]
            out["frame_mask"][b, :n] = 1
        return cls(**out)


def _t(a, dtype):
    return torch.as_tensor(np.asarray(a), dtype=dtype)


def model_inputs(model, batch, psi_t, t, drop_text_speaker=None, drop_env=None):
    """Velocity for a batch with conditions gated by their span masks.

    Masked speaker frames are zero-filled.  Masked environment frames are
    also left out of cross-attention, so the visible part acts like an env
    prompt of that length; an item with no visible env frame gets the null env.
    """
    dtype = next(model.parameters()).dtype
    keep_spk = _t(1 - batch.m_spk, dtype)[:, None, :]
    keep_env = _t(1 - batch.m_env, dtype)[:, None, :]
    frame_mask = torch.as_tensor(batch.frame_mask.astype(bool))
    env_mask = frame_mask & torch.as_tensor(np.asarray(batch.m_env) == 0)
    no_env = ~env_mask.any(dim=1)
    if drop_env is not None:
        no_env = no_env | torch.as_tensor(np.asarray(drop_env), dtype=torch.bool)
    return model(
        psi_t if torch.is_tensor(psi_t) else _t(psi_t, dtype),
        _t(t, dtype),
        torch.as_tensor(batch.text, dtype=torch.long),
        _t(batch.c_spk, dtype) * keep_spk,
        _t(batch.c_env, dtype) * keep_env,
        frame_mask=frame_mask,
        env_mask=env_mask,
        drop_text_speaker=drop_text_speaker,
        drop_env=no_env,
    )


def masked_mse(v, target, m_spk):
    """Mean of squared error over the masked (to-generate) entries."""
    w = torch.as_tensor(np.asarray(m_spk), dtype=v.dtype)[:, None, :]
    n = float(w.sum()) * v.shape[1]
    if n == 0:
        warnings.warn("span mask is empty; loss defined as 0", DegenerateItemWarning, stacklevel=2)
        return (v * 0).sum()
    return (((v - target) * w) ** 2).sum() / n


def cfm_loss(model, batch, flow, drop_text_speaker=None, drop_env=None, velocity=None):
    """Masked flow-matching loss; ``velocity`` overrides the model output."""
    dtype = next(model.parameters()).dtype
    if velocity is None:
        velocity = model_inputs(model, batch, flow.psi_t, flow.t, drop_text_speaker, drop_env)
    target = _t(flow.x1, dtype) - _t(flow.x0, dtype)
    return masked_mse(velocity, target, batch.m_spk * batch.frame_mask)


def draw_flow(batch, rng):
    t = rng.random(len(batch))
    return make_flow_point(batch.x1, t, rng)


def draw_dropout(n, policy, rng):
    pats = [draw_pattern(policy, rng) for _ in range(n)]
    return np.array([p[0] for p in pats]), np.array([p[1] for p in pats])


def train_step(model, optimizer, batch, rng, policy=None, flow=None, dropout=None, grad_clip=1.0):
    """One gradient update; returns the loss.

    ``flow`` and ``dropout`` pin the flow point and condition pattern (as in an
    overfit-one-batch run); otherwise both are drawn from ``rng``.
    """
    if len(batch) == 0:
        raise ConfigError("empty batch")
    policy = policy or DropoutPolicy()
    if flow is None:
        flow = draw_flow(batch, rng)
    if dropout is None:
        dropout = draw_dropout(len(batch), policy, rng)
    model.train()
    loss = cfm_loss(model, batch, flow, *dropout)
    if not torch.isfinite(loss):
        raise DivergenceError(
            f"non-finite CFM loss {loss.item()} (t={np.round(flow.t, 4).tolist()}, "
            f"masked frames={int(batch.m_spk.sum())})")
    optimizer.zero_grad()
    loss.backward()
    if grad_clip:
        nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
    optimizer.step()
    return float(loss.item())


def gradient_check(model, batch, flow, epsilon=1e-3, n_params=200, rng=None, dropout=(None, None), floor=1e-8):
    """Max relative error between autograd and central finite differences.

    Runs on a float64 copy of ``model`` over ``n_params`` parameter entries
    drawn uniformly from the flattened parameter vector.  Relative error is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    rng = rng or np.random.default_rng(0)
    m = copy.deepcopy(model).double().eval()
    params = [p for p in m.parameters() if p.requires_grad]
    sizes = np.array([p.numel() for p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    picks = rng.choice(offsets[-1], size=min(n_params, offsets[-1]), replace=False)

    m.zero_grad()
    cfm_loss(m, batch, flow, *dropout).backward()
    worst = 0.0
    for flat in picks:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        p = params[k]
        idx = np.unravel_index(int(flat - offsets[k]), tuple(p.shape))
        analytic = 0.0 if p.grad is None else float(p.grad[idx])
        with torch.no_grad():
            orig = p[idx].item()
            p[idx] = orig + epsilon
            up = float(cfm_loss(m, batch, flow, *dropout))
            p[idx] = orig - epsilon
            down = float(cfm_loss(m, batch, flow, *dropout))
            p[idx] = orig
        numeric = (up - down) / (2 * epsilon)
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        worst = max(worst, err)
    return worst


class BatchBuilder:
    """Turns mixer draws into :class:`TrainBatch` objects.

    The target is the log-mel of the mixture; speaker and environment
    conditions are the two branches of the separation net (or of oracle
    masks when ``ses_model`` is None).
    """

    def __init__(self, dit_config, stft_config=None, fb=None, ses_model=None, mask_ratio=(0.7, 1.0), vocab=None):
        self.dit_config = dit_config
        self.stft_config = stft_config or dsp.StftConfig()
        self.fb = fb or dsp.build_mel_filterbank(dit_config.mel_bins, self.stft_config,
                                                 (0.0, self.stft_config.sample_rate / 2))
        self.ses_model = ses_model
        self.mask_ratio = tuple(mask_ratio)
        self.vocab = vocab or corpus.Vocab()

    def conditions(self, mixture, clean=None, env=None):
        """Normalized ``(x1, c_spk, c_env)`` mels of one mixture."""
        cfg = self.stft_config
        mag = dsp.magnitude(dsp.stft(mixture, cfg))
        if self.ses_model is None:
            masks = ses.oracle_masks(dsp.magnitude(dsp.stft(clean, cfg)), dsp.magnitude(dsp.stft(env, cfg)))
        else:
            masks = ses.masking_net_forward(mag, self.ses_model)
        speech, env_mag = ses.apply_masks(mag, masks)
        mels = [dsp.mag_to_mel(m, self.fb) for m in (mag, speech, env_mag)]
        mels[2] = infer.floor_silent(mels[2])
        return tuple(net.normalize_mel(m, self.dit_config) for m in mels)

    def item(self, clean, env, mixture, text, rng, view=None):
        x1, c_spk, c_env = self.conditions(mixture, clean, env)
        if view is not None:
            c_spk = self.conditions(view[0], clean, view[1])[1]
        L = x1.shape[1]
        return {
            "x1": x1, "c_spk": c_spk, "c_env": c_env,
            "text": corpus.extend_text(text, L, self.vocab),
            "m_spk": corpus.sample_span_mask(L, self.mask_ratio, rng),
            "m_env": corpus.sample_span_mask(L, self.mask_ratio, rng),
        }

    def build(self, draws, rng):
        """``draws``: ``(clean, env, mixture, text, ...)`` tuples from a mixer.

        A sixth element, when present and not None, is a speaker view
        ``(mixture, env)``: c_spk is then taken from that remix instead.
        """
        return TrainBatch.stack([self.item(d[0], d[1], d[2], d[3], rng, d[5] if len(d) > 5 else None)
                                 for d in draws])


@dataclass
class TtsTrainConfig:
    steps: int = 10_000
    batch_size: int = 8
    lr: float = 1e-4
    warmup_frac: float = 0.05
    grad_clip: float = 1.0
    seed: int = 0
    checkpoint_every: int = 1000
    log_every: int = 100
    mask_ratio: tuple = (0.7, 1.0)
    dropout: DropoutPolicy = field(default_factory=DropoutPolicy)


def make_optimizer(model, lr):
    return torch.optim.Adam(model.parameters(), lr=lr)


def optimizer_arrays(optimizer, model):
    """Adam moments keyed by parameter name, for the checkpoint payload."""
    names = {id(p): n for n, p in model.named_parameters()}
    out, steps = {}, {}
    for group in optimizer.param_groups:
        for p in group["params"]:
            st = optimizer.state.get(p)
            if not st:
                continue
            n = names[id(p)]
            out[f"opt.exp_avg.{n}"] = st["exp_avg"].detach().cpu().numpy()
            out[f"opt.exp_avg_sq.{n}"] = st["exp_avg_sq"].detach().cpu().numpy()
            steps[n] = float(st["step"])
    return out, steps


def restore_optimizer(optimizer, model, arrays, steps):
    params = dict(model.named_parameters())
    for n, step in steps.items():
        p = params[n]
        optimizer.state[p] = {
            "step": torch.tensor(float(step)),
            "exp_avg": torch.from_numpy(arrays[f"opt.exp_avg.{n}"]).to(p.dtype),
            "exp_avg_sq": torch.from_numpy(arrays[f"opt.exp_avg_sq.{n}"]).to(p.dtype),
        }


def save_training_state(path, model, optimizer, step, rng, config):
    arrays, steps = optimizer_arrays(optimizer, model)
    extra = {
        "train.step": step,
        "train.rng": json.dumps(rng.bit_generator.state),
        "train.opt_steps": json.dumps(steps),
        "train.config": json.dumps(_config_dict(config)),
    }
    return net.save_model(path, model, extra, arrays)


def _config_dict(config):
    d = asdict(config)
    d["mask_ratio"] = list(config.mask_ratio)
    return d


def load_training_state(path, config):
    model, meta, arrays = net.load_model(path)
    model.train()
    optimizer = make_optimizer(model, config.lr)
    restore_optimizer(optimizer, model, arrays, json.loads(meta["train.opt_steps"]))
    rng = np.random.default_rng()
    rng.bit_generator.state = json.loads(meta["train.rng"])
    return model, optimizer, int(meta["train.step"]), rng


def train_tts(draw_batch, dit_config, config=None, out_dir=None, model=None, resume=None, on_step=None):
    """Flow-matching training loop.

    ``draw_batch(batch_size, rng)`` returns a :class:`TrainBatch`.  With
    ``out_dir`` set, writes ``loss.csv`` (step, loss, wall_ms) and checkpoints
    ``tts_step{N}.ckpt`` plus ``tts_last.ckpt``.  ``resume`` names a
    checkpoint written by this loop.  Returns ``(model, losses)``.
    """
    config = config or TtsTrainConfig()
    if resume is not None:
        model, optimizer, start, rng = load_training_state(resume, config)
    else:
        rng = np.random.default_rng(config.seed)
        if model is None:
            model = net.init_params(dit_config, config.seed)
        optimizer = make_optimizer(model, config.lr)
        start = 0
    out = Path(out_dir) if out_dir is not None else None
    loss_log = LossLog(out / "loss.csv" if out is not None else None, start)
    if out is not None and start == 0:
        save_training_state(out / "tts_step0.ckpt", model, optimizer, 0, rng, config)
    losses = []
    with loss_log:
        for step in range(start, config.steps):
            for g in optimizer.param_groups:
                g["lr"] = ses.lr_schedule(step, config.steps, config.lr, config.warmup_frac)
            batch = draw_batch(config.batch_size, rng)
            loss = train_step(model, optimizer, batch, rng, config.dropout, grad_clip=config.grad_clip)
            losses.append(loss)
            wall_ms = loss_log.write(step, loss)
            if config.log_every and (step + 1) % config.log_every == 0:
                log.info("tts step %d loss %.5f (%.0f ms)", step + 1, float(np.mean(losses[-config.log_every:])), wall_ms)
            if on_step is not None:
                on_step(step, loss, model, optimizer)
            done = step + 1
            if out is not None and config.checkpoint_every and (done % config.checkpoint_every == 0 or done == config.steps):
                save_training_state(out / f"tts_step{done}.ckpt", model, optimizer, done, rng, config)
                save_training_state(out / "tts_last.ckpt", model, optimizer, done, rng, config)
    model.eval()
    return model, losses


class LossLog:
    """``loss.csv`` writer (step, loss, wall_ms); resuming keeps rows before ``start``
    and continues the wall clock from the last kept row."""

    def __init__(self, path, start=0):
        self.path = Path(path) if path is not None else None
        self.start = start
        self.fh = self.writer = None
        self.offset = 0.0

    def __enter__(self):
        self.t0 = time.perf_counter()
        if self.path is None:
            return self
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fresh = self.start == 0 or not self.path.exists()
        if not fresh:
            self.offset = _truncate_log(self.path, self.start)
        self.fh = open(self.path, "w" if fresh else "a", newline="")
        self.writer = csv.writer(self.fh)
        if fresh:
            self.writer.writerow(["step", "loss", "wall_ms"])
        return self

    def write(self, step, loss):
        wall_ms = self.offset + (time.perf_counter() - self.t0) * 1000.0
        if self.writer is not None:
            self.writer.writerow([step, repr(loss), f"{wall_ms:.1f}"])
        return wall_ms

    def __exit__(self, *exc):
        if self.fh is not None:
            self.fh.close()
        return False


def save_ses_state(path, model, optimizer, step, rng, opt):
    arrays, steps = optimizer_arrays(optimizer, model)
    extra = {
        "train.step": step,
        "train.rng": json.dumps(rng.bit_generator.state),
        "train.opt_steps": json.dumps(steps),
        "train.config": json.dumps(asdict(opt)),
    }
    return ses.save_ses(path, model, extra, arrays)


def load_ses_state(path, opt):
    model, meta, arrays = ses.load_ses(path)
    optimizer = ses.make_optimizer(model, opt.lr)
    restore_optimizer(optimizer, model, arrays, json.loads(meta.get("train.opt_steps", "{}")))
    rng = np.random.default_rng(opt.seed)
    if "train.rng" in meta:
        rng.bit_generator.state = json.loads(meta["train.rng"])
    return model, optimizer, int(meta.get("train.step", 0)), rng


def train_ses_run(source, ses_config, opt, stft_config, out_dir, resume=None, checkpoint_every=500):
    """SES training with ``ses_loss.csv``, ``ses_step{N}.ckpt`` and a final ``ses.ckpt``."""
    out = Path(out_dir)
    if resume is not None:
        model, optimizer, start, rng = load_ses_state(resume, opt)
    else:
        model = ses.init_ses(ses_config, opt.seed)
        optimizer = ses.make_optimizer(model, opt.lr)
        start, rng = 0, np.random.default_rng(opt.seed)
    loss_log = LossLog(out / "ses_loss.csv", start)
    if start == 0:
        out.mkdir(parents=True, exist_ok=True)
        save_ses_state(out / "ses_step0.ckpt", model, optimizer, 0, rng, opt)

    def on_step(step, loss, m, o):
        loss_log.write(step, loss)
        done = step + 1
        if checkpoint_every and done % checkpoint_every == 0:
            save_ses_state(out / f"ses_step{done}.ckpt", m, o, done, rng, opt)

    with loss_log:
        model, losses = ses.train_ses(source, ses_config, opt, model, stft_config, on_step,
                                      optimizer=optimizer, start=start, rng=rng)
    save_ses_state(out / "ses.ckpt", model, optimizer, opt.steps, rng, opt)
    return model, losses


def _truncate_log(path, start):
    """Drop rows at or after ``start``; return the last kept wall time (ms)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    keep = [rows[0]] + [r for r in rows[1:] if int(r[0]) < start]
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(keep)
    return float(keep[-1][2]) if len(keep) > 1 else 0.0


def read_loss_log(path):
    with open(path, newline="") as fh:
        return [(int(r["step"]), float(r["loss"]), float(r["wall_ms"])) for r in csv.DictReader(fh)]
