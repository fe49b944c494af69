"""Desk-scale end-to-end experiment on the tone-coded corpus.

Builds the corpus, trains the separation net and the velocity model, then
measures three things: overfitting a single batch, intelligibility of
synthesis with a silent environment prompt (tone decoder), and environment
control (band energy with a noise-band prompt against the silent baseline).
Artifacts go to one directory keyed by the run configuration, so repeated
calls reuse finished stages.
"""
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import torch

from . import corpus, dsp, infer, net, ses, train

log = logging.getLogger(__name__)

SPEECH_HZ = 5000.0


@dataclass
class DeskRunConfig:
    n_items: int = 500
    seed: int = 0
    ses_steps: int = 2000
    ses_lr: float = 1e-3
    tts_steps: int = 10_000
    tts_batch: int = 8
    tts_lr: float = 5e-4
    speaker_remix: float = 1.0
    overfit_steps: int = 1000
    overfit_batch: int = 2
    overfit_lr: float = 1e-3
    n_eval: int = 20
    ode_steps: int = 32
    alpha_speech: float = 2.0
    alpha_env: float = 2.0
    gl_iterations: int = 60
    checkpoint_every: int = 1000
    dit: net.DitConfig = field(default_factory=net.DitConfig)
    ses_config: ses.SesConfig = field(default_factory=ses.SesConfig)

    def key(self):
        blob = json.dumps(asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


def band_energy(wave, band, config):
    mag = dsp.magnitude(dsp.stft(wave, config))
    freqs = np.arange(config.n_freqs) * config.sample_rate / config.fft_size
    sel = (freqs >= band[0]) & (freqs <= band[1])
    return float(np.sum(mag[sel] ** 2))


def split_snr(wave, config, split_hz=SPEECH_HZ):
    """Spectrogram-domain SNR by the oracle band split of the desk corpus."""
    mag = dsp.magnitude(dsp.stft(wave, config))
    freqs = np.arange(config.n_freqs) * config.sample_rate / config.fft_size
    low = freqs < split_hz
    return dsp.snr_db(float(np.sum(mag[low] ** 2)), float(np.sum(mag[~low] ** 2)))


def occupied_band(env, config, rel_db=-10.0):
    """Frequency span where the environment's average power is within ``rel_db`` of its peak."""
    p = np.mean(dsp.magnitude(dsp.stft(env, config)) ** 2, axis=1)
    freqs = np.arange(config.n_freqs) * config.sample_rate / config.fft_size
    idx = np.flatnonzero(p >= p.max() * 10 ** (rel_db / 10))
    return float(freqs[idx[0]]), float(freqs[idx[-1]])


class DeskRun:
    def __init__(self, root, config=None):
        self.config = config or DeskRunConfig()
        self.root = Path(root) / f"desk-{self.config.key()}"
        self.root.mkdir(parents=True, exist_ok=True)
        self.spec = corpus.DeskCorpusSpec(n_items=self.config.n_items)
        self.stft = dsp.StftConfig(sample_rate=self.spec.sample_rate)
        self.fb = dsp.build_mel_filterbank(self.config.dit.mel_bins, self.stft, (0.0, self.spec.sample_rate / 2))
        self.timings = {}
        self._items = None

    @property
    def items(self):
        if self._items is None:
            t0 = time.perf_counter()
            self._items = corpus.build_desk_corpus(self.spec, self.config.seed)
            self.timings["corpus_s"] = time.perf_counter() - t0
        return self._items

    def records(self):
        return [dict(clean=it.clean, env=it.env, text=it.text, snr_db=it.snr_db) for it in self.items]

    def ses_model(self):
        path = self.root / "ses.ckpt"
        if path.exists():
            return ses.load_ses(path)[0]
        c = self.config
        mixer = corpus.DynamicMixer.from_records(self.records(), self.spec.mix, np.random.default_rng([c.seed, 1]),
                                                 self.spec.sample_rate)

        def source(batch, rng):
            return [(m, cl, e) for cl, e, m, _, _ in mixer.draw(batch)]

        t0 = time.perf_counter()
        model, losses = ses.train_ses(source, c.ses_config, ses.SesTrainConfig(steps=c.ses_steps, lr=c.ses_lr, seed=c.seed),
                                      stft_config=self.stft)
        self.timings["ses_s"] = time.perf_counter() - t0
        np.savetxt(self.root / "ses_loss.txt", losses)
        ses.save_ses(path, model, {"train.steps": c.ses_steps, "train.seconds": self.timings["ses_s"]})
        return model

    def builder(self, ses_model):
        return train.BatchBuilder(self.config.dit, self.stft, self.fb, ses_model)

    def drawer(self, ses_model):
        mixer = corpus.DynamicMixer.from_records(self.records(), self.spec.mix, None, self.spec.sample_rate)
        builder = self.builder(ses_model)

        def draw(batch, rng):
            mixer.rng = rng
            return builder.build(mixer.draw_paired(batch, self.config.speaker_remix), rng)
        return draw

    def tts_model(self, ses_model):
        c = self.config
        out = self.root / "tts"
        final = out / f"tts_step{c.tts_steps}.ckpt"
        if final.exists():
            return net.load_model(final)[0]
        last = out / "tts_last.ckpt"
        resume = last if last.exists() else None
        tc = train.TtsTrainConfig(steps=c.tts_steps, batch_size=c.tts_batch, lr=c.tts_lr, seed=c.seed,
                                  checkpoint_every=c.checkpoint_every)
        t0 = time.perf_counter()
        model, _ = train.train_tts(self.drawer(ses_model), c.dit, tc, out_dir=out, resume=resume)
        self.timings["tts_s"] = time.perf_counter() - t0
        return model

    def overfit(self, ses_model):
        """Loss ratio (final / initial) when fitting one fixed batch and flow point."""
        c = self.config
        rng = np.random.default_rng([c.seed, 2])
        items = self.items[: c.overfit_batch]
        batch = self.builder(ses_model).build([(it.clean, it.env, it.mixture, it.text) for it in items], rng)
        flow = train.draw_flow(batch, rng)
        model = net.init_params(c.dit, c.seed)
        opt = train.make_optimizer(model, c.overfit_lr)
        keep = (np.zeros(len(batch), bool), np.zeros(len(batch), bool))
        losses = [train.train_step(model, opt, batch, rng, flow=flow, dropout=keep) for _ in range(c.overfit_steps)]
        return losses[-1] / losses[0], losses

    @cached_property
    def prompts(self):
        """Held-in speaker prompts, fresh target texts and noisy environment prompts."""
        c = self.config
        rng = np.random.default_rng([c.seed, 3])
        picks = rng.choice(len(self.items), c.n_eval, replace=False)
        noisy = [it for it in self.items if it.snr_db is not None]
        out = []
        for k, i in enumerate(picks):
            item = self.items[int(i)]
            env_item = noisy[int(rng.integers(len(noisy)))]
            snr = float(rng.uniform(*self.spec.mix.eval_snr_range))
            env_prompt, env_part = corpus.mix_at_snr(env_item.clean, env_item.env, snr, rng, self.spec.sample_rate)
            out.append({
                "speaker": item.mixture, "ref_text": item.text,
                "gen_text": corpus.random_text(rng, self.spec),
                "env_prompt": env_prompt, "env_speech": env_item.clean, "env_part": env_part, "env_snr_db": snr,
            })
        return out

    def synth(self, ses_model, model, prompt, env_prompt, snr_adapt=False, seed=0):
        c = self.config
        req = infer.SynthesisRequest(
            prompt["speaker"], env_prompt, prompt["ref_text"], prompt["gen_text"],
            infer.GuidanceConfig(c.alpha_speech, c.alpha_env, c.ode_steps), snr_adapt, seed)
        return infer.synthesize(req, ses_model, model, self.fb, self.stft, c.gl_iterations)

    def evaluate(self, ses_model, model):
        """Token accuracy (silent env), band-energy gain (noise env) and SNR adaptation error."""
        silence = np.zeros(self.spec.sample_rate)
        correct = total = 0
        gains, snr_errs, rows = [], [], []
        for k, p in enumerate(self.prompts):
            quiet = self.synth(ses_model, model, p, silence, seed=k)
            decoded = corpus.decode_tones(quiet.waveform, len(p["gen_text"]), self.spec.tone, self.stft, self.fb)
            hits = sum(a == b for a, b in zip(decoded, p["gen_text"]))
            correct += hits
            total += len(p["gen_text"])
            noisy = self.synth(ses_model, model, p, p["env_prompt"], seed=k)
            band = occupied_band(p["env_part"], self.stft)
            gain = 10 * np.log10((band_energy(noisy.waveform, band, self.stft) + 1e-20)
                                 / (band_energy(quiet.waveform, band, self.stft) + 1e-20))
            gains.append(gain)
            adapted = self.synth(ses_model, model, p, p["env_prompt"], snr_adapt=True, seed=k)
            prompt_snr = dsp.snr_db(dsp.energy(dsp.magnitude(dsp.stft(p["env_speech"], self.stft))),
                                    dsp.energy(dsp.magnitude(dsp.stft(p["env_part"], self.stft))))
            achieved = split_snr(adapted.waveform, self.stft)
            snr_errs.append(achieved - prompt_snr)
            rows.append({"gen_text": p["gen_text"], "decoded": decoded, "band": band, "band_gain_db": gain,
                         "prompt_snr_db": prompt_snr, "adapted_snr_db": achieved, "scale": adapted.scale,
                         "silent_env_detected": quiet.env_silent})
            log.info("eval %d: %s -> %s, band gain %.1f dB, snr %.1f -> %.1f dB",
                     k, p["gen_text"], decoded, gain, prompt_snr, achieved)
        return {
            "token_accuracy": correct / total,
            "band_gain_db_mean": float(np.mean(gains)),
            "band_gain_db_min": float(np.min(gains)),
            "snr_error_db_mean_abs": float(np.mean(np.abs(snr_errs))),
            "snr_error_db_mean": float(np.mean(snr_errs)),
            "rows": rows,
        }

    def run(self):
        """Every stage, reusing cached artifacts; returns (and stores) the results dict."""
        path = self.root / "results.json"
        if path.exists():
            return json.loads(path.read_text())
        torch.set_num_threads(1)
        t0 = time.perf_counter()
        ses_model = self.ses_model()
        model = self.tts_model(ses_model)
        ratio, _ = self.overfit(ses_model)
        metrics = self.evaluate(ses_model, model)
        metrics["overfit_ratio"] = ratio
        metrics["timings"] = dict(self.timings, total_s=time.perf_counter() - t0)
        metrics["train_seconds"] = self._train_seconds()
        metrics["config"] = json.loads(json.dumps(asdict(self.config), default=str))
        path.write_text(json.dumps(metrics, indent=1))
        return metrics

    def _train_seconds(self):
        """Wall time of both training stages as recorded with the artifacts."""
        _, meta, _ = ses.load_ses(self.root / "ses.ckpt")
        tts_log = train.read_loss_log(self.root / "tts" / "loss.csv")
        return float(meta.get("train.seconds", 0.0)) + (tts_log[-1][2] / 1000.0 if tts_log else 0.0)
