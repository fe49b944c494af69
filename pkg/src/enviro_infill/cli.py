"""``enviro-infill`` command line.

Numeric defaults live in :data:`DEFAULTS`; a ``--config`` file overrides
them and explicit flags override the file.  Exit codes: 0 success,
1 verification failure, 2 usage error, 3 I/O error.
"""
import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import torch

from . import config as cfgfile
from . import corpus, dsp, infer, net, ses, train, wavio
from .errors import ConfigError, DivergenceError, EnviroInfillError, SampleRateError

log = logging.getLogger("enviro_infill")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

DEFAULTS = {
    "seed": 0,
    "threads": 1,
    "mel_bins": 80,
    "corpus.n_items": 500,
    "corpus.snr_range": [-5.0, 15.0],
    "corpus.augment_prob": 0.5,
    "corpus.format": "float32",
    "ses.steps": 2000,
    "ses.batch_size": 8,
    "ses.crop_frames": 40,
    "ses.lr": 1e-3,
    "ses.checkpoint_every": 500,
    "tts.steps": 10_000,
    "tts.batch_size": 8,
    "tts.lr": 1e-4,
    "tts.checkpoint_every": 1000,
    "tts.log_every": 100,
    "tts.mask_ratio": [0.7, 1.0],
    "tts.speaker_remix": 0.0,
    "synth.alpha_speech": 2.0,
    "synth.alpha_env": 2.0,
    "synth.ode_steps": 32,
    "synth.gl_iterations": 60,
    "synth.snr_adapt": False,
    "mix.snr": 5.0,
}


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


class Settings:
    """Built-ins, then the config file, then flags."""

    def __init__(self, args):
        file_values = cfgfile.load(args.config) if getattr(args, "config", None) else {}
        unknown = [k for k in file_values if k not in DEFAULTS and not _is_model_key(k)]
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        self.values = cfgfile.merge(DEFAULTS, file_values)

    def get(self, key, flag=None):
        return flag if flag is not None else self.values[key]

    def section(self, prefix):
        return cfgfile.section(self.values, prefix)


def _is_model_key(key):
    return key.startswith(("ses.model.", "tts.model."))


def _dataclass_from(cls, base, overrides):
    names = {f.name for f in fields(cls)}
    bad = set(overrides) - names
    if bad:
        raise ConfigError(f"unknown {cls.__name__} fields: {', '.join(sorted(bad))}")
    return cls(**{**{f.name: getattr(base, f.name) for f in fields(cls)}, **overrides})


def dit_config(settings):
    base = net.DitConfig(mel_bins=settings.get("mel_bins"))
    return _dataclass_from(net.DitConfig, base, settings.section("tts.model"))


def ses_config(settings):
    return _dataclass_from(ses.SesConfig, ses.SesConfig(), settings.section("ses.model"))


def stft_config():
    return dsp.StftConfig()


def filterbank(mel_bins, cfg):
    return dsp.build_mel_filterbank(mel_bins, cfg, (0.0, cfg.sample_rate / 2))


def out_dir(args):
    path = Path(args.output_dir)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {path}: {exc}", EXIT_IO)
    if not os.access(path, os.W_OK):
        raise CliError(f"output directory {path} is not writable", EXIT_IO)
    return path


def require_file(path, what):
    if path is None:
        raise CliError(f"{what} is required", EXIT_USAGE)
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} not found: {p}", EXIT_IO)
    return p


def read_audio(path, what, cfg):
    return wavio.read_wav(require_file(path, what), cfg.sample_rate).samples


def load_records(path, cfg):
    return corpus.read_manifest(require_file(path, "manifest"), expected_rate=cfg.sample_rate)


def cmd_build_corpus(args, s):
    out = out_dir(args)
    lo, hi = s.get("corpus.snr_range", args.snr_range)
    mix = corpus.MixSpec(train_snr_range=(float(lo), float(hi)),
                         augment_prob=float(s.get("corpus.augment_prob", args.augment_prob)))
    spec = corpus.DeskCorpusSpec(n_items=int(s.get("corpus.n_items", args.n_items)), mix=mix)
    items = corpus.build_desk_corpus(spec, int(s.get("seed", args.seed)))
    manifest = corpus.write_corpus(items, out, spec, s.get("corpus.format"))
    print(manifest)


def _mix_source(records, cfg, remix=None):
    mixer = corpus.DynamicMixer.from_records(records, corpus.MixSpec(), None, cfg.sample_rate)

    def draw(batch, rng):
        mixer.rng = rng
        return mixer.draw(batch) if remix is None else mixer.draw_paired(batch, remix)
    return draw


def cmd_train_ses(args, s):
    cfg = stft_config()
    records = load_records(args.manifest, cfg)
    out = out_dir(args)
    opt = ses.SesTrainConfig(
        steps=int(s.get("ses.steps", args.steps)), batch_size=int(s.get("ses.batch_size", args.batch_size)),
        crop_frames=int(s.get("ses.crop_frames")), lr=float(s.get("ses.lr", args.lr)),
        seed=int(s.get("seed", args.seed)))
    draw = _mix_source(records, cfg)

    def source(batch, rng):
        return [(m, c, e) for c, e, m, _, _ in draw(batch, rng)]

    resume = require_file(args.resume, "resume checkpoint") if args.resume else None
    train.train_ses_run(source, ses_config(s), opt, cfg, out, resume,
                        int(s.get("ses.checkpoint_every", args.checkpoint_every)))
    print(out / "ses.ckpt")


def cmd_train_tts(args, s):
    cfg = stft_config()
    records = load_records(args.manifest, cfg)
    out = out_dir(args)
    dit = dit_config(s)
    if args.oracle_masks:
        ses_model = None
    else:
        ses_model = ses.load_ses(require_file(args.ses_checkpoint, "SES checkpoint"))[0]
    builder = train.BatchBuilder(dit, cfg, filterbank(dit.mel_bins, cfg), ses_model,
                                 mask_ratio=tuple(s.get("tts.mask_ratio")))
    draw = _mix_source(records, cfg, float(s.get("tts.speaker_remix")))
    tc = train.TtsTrainConfig(
        steps=int(s.get("tts.steps", args.steps)), batch_size=int(s.get("tts.batch_size", args.batch_size)),
        lr=float(s.get("tts.lr", args.lr)), seed=int(s.get("seed", args.seed)),
        checkpoint_every=int(s.get("tts.checkpoint_every", args.checkpoint_every)),
        log_every=int(s.get("tts.log_every")), mask_ratio=tuple(s.get("tts.mask_ratio")))
    resume = require_file(args.resume, "resume checkpoint") if args.resume else None
    train.train_tts(lambda b, rng: builder.build(draw(b, rng), rng), dit, tc, out, resume=resume)
    print(out / "tts_last.ckpt")


def cmd_separate(args, s):
    cfg = stft_config()
    wave = read_audio(args.input, "input", cfg)
    out = out_dir(args)
    spec = dsp.stft(wave, cfg)
    mag = dsp.magnitude(spec)
    if args.oracle_masks:
        clean = read_audio(args.clean, "--clean reference", cfg)
        env = read_audio(args.env, "--env reference", cfg)
        masks = ses.oracle_masks(dsp.magnitude(dsp.stft(clean, cfg)), dsp.magnitude(dsp.stft(env, cfg)))
    else:
        masks = ses.masking_net_forward(mag, ses.load_ses(require_file(args.ses_checkpoint, "SES checkpoint"))[0])
    speech, env_mag = ses.apply_masks(mag, masks)
    fb = filterbank(int(s.get("mel_bins", args.mel_bins)), cfg)
    phase = np.exp(1j * np.angle(spec))
    for name, m in (("speech", speech), ("env", env_mag)):
        y = dsp.istft(m * phase, cfg, length=wave.size)
        wavio.write_wav(out / f"{name}.wav", dsp.Waveform(y, cfg.sample_rate))
        wavio.write_mel_dump(out / f"{name}.mel", dsp.mag_to_mel(m, fb))
    print(out / "speech.wav")
    print(out / "env.wav")


def cmd_mix(args, s):
    cfg = stft_config()
    clean = read_audio(args.clean, "--clean", cfg)
    env = read_audio(args.env, "--env", cfg)
    out = out_dir(args)
    rng = np.random.default_rng(int(s.get("seed", args.seed)))
    mixture, scaled = corpus.mix_at_snr(clean, env, float(s.get("mix.snr", args.snr)), rng, cfg.sample_rate)
    wavio.write_wav(out / "mixture.wav", dsp.Waveform(mixture, cfg.sample_rate))
    wavio.write_wav(out / "env_scaled.wav", dsp.Waveform(scaled, cfg.sample_rate))
    print(out / "mixture.wav")


def cmd_synth(args, s):
    cfg = stft_config()
    speaker = read_audio(args.speaker_prompt, "--speaker-prompt", cfg)
    env = read_audio(args.env_prompt, "--env-prompt", cfg)
    model = net.load_model(require_file(args.tts_checkpoint, "TTS checkpoint"))[0]
    if args.oracle_masks:
        raise CliError("--oracle-masks needs ground-truth components; use it with 'separate'", EXIT_USAGE)
    ses_model = ses.load_ses(require_file(args.ses_checkpoint, "SES checkpoint"))[0]
    out = out_dir(args)
    guidance = infer.GuidanceConfig(float(s.get("synth.alpha_speech", args.alpha_speech)),
                                    float(s.get("synth.alpha_env", args.alpha_env)),
                                    int(s.get("synth.ode_steps", args.ode_steps)))
    req = infer.SynthesisRequest(speaker, env, args.ref_text, args.gen_text, guidance,
                                 bool(s.get("synth.snr_adapt", True if args.snr_adapt else None)),
                                 int(s.get("seed", args.seed)))
    res = infer.synthesize(req, ses_model, model, filterbank(model.config.mel_bins, cfg), cfg,
                           int(s.get("synth.gl_iterations")))
    path = Path(args.output) if args.output else out / "synth.wav"
    wavio.write_wav(path, dsp.Waveform(res.waveform, cfg.sample_rate))
    if args.mel_dump:
        wavio.write_mel_dump(out / "synth.mel", res.mel)
    log.info("generated %d frames, env scale %.4f, silent env %s", res.gen_frames, res.scale, res.env_silent)
    print(path)


def cmd_check(args, s):
    from . import check

    report = check.run(args.suite or None, fault=args.inject_fault, desk_dir=args.desk_dir)
    text = json.dumps(report, indent=1)
    if args.report:
        Path(args.report).write_text(text)
    print(text)
    if not report["passed"]:
        raise CliError("check failed: " + ", ".join(r["name"] for r in report["suites"] if r["status"] == "fail"),
                       EXIT_FAIL)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value settings file")
    common.add_argument("--seed", type=int)
    common.add_argument("--output-dir", default=".")
    common.add_argument("--threads", type=int)

    p = argparse.ArgumentParser(prog="enviro-infill", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("build-corpus", parents=[common], help="write the tone-coded desk corpus")
    c.add_argument("--n-items", type=int)
    c.add_argument("--snr-range", type=float, nargs=2, metavar=("LO", "HI"))
    c.add_argument("--augment-prob", type=float)
    c.set_defaults(func=cmd_build_corpus)

    for name, func, text in (("train-ses", cmd_train_ses, "pretrain the separation net"),
                             ("train-tts", cmd_train_tts, "train the flow-matching velocity model")):
        t = sub.add_parser(name, parents=[common], help=text)
        t.add_argument("--manifest", required=True)
        t.add_argument("--steps", type=int)
        t.add_argument("--batch-size", type=int)
        t.add_argument("--lr", type=float)
        t.add_argument("--checkpoint-every", type=int)
        t.add_argument("--resume")
        if name == "train-tts":
            t.add_argument("--ses-checkpoint")
            t.add_argument("--oracle-masks", action="store_true", help="condition on ideal ratio masks")
        t.set_defaults(func=func)

    c = sub.add_parser("separate", parents=[common], help="split a recording into speech and environment")
    c.add_argument("--input", required=True)
    c.add_argument("--ses-checkpoint")
    c.add_argument("--oracle-masks", action="store_true", help="use ideal ratio masks from --clean/--env")
    c.add_argument("--clean")
    c.add_argument("--env")
    c.add_argument("--mel-bins", type=int)
    c.set_defaults(func=cmd_separate)

    c = sub.add_parser("mix", parents=[common], help="mix speech and environment at a target SNR")
    c.add_argument("--clean", required=True)
    c.add_argument("--env", required=True)
    c.add_argument("--snr", type=float)
    c.set_defaults(func=cmd_mix)

    c = sub.add_parser("synth", parents=[common], help="environment-aware infilling synthesis")
    c.add_argument("--speaker-prompt", required=True)
    c.add_argument("--env-prompt", required=True)
    c.add_argument("--ref-text", required=True)
    c.add_argument("--gen-text", required=True)
    c.add_argument("--ses-checkpoint", required=True)
    c.add_argument("--tts-checkpoint", required=True)
    c.add_argument("--alpha-speech", type=float)
    c.add_argument("--alpha-env", type=float)
    c.add_argument("--ode-steps", type=int)
    c.add_argument("--snr-adapt", action="store_true")
    c.add_argument("--oracle-masks", action="store_true")
    c.add_argument("--output")
    c.add_argument("--mel-dump", action="store_true")
    c.set_defaults(func=cmd_synth)

    c = sub.add_parser("check", parents=[common], help="run the verification suites")
    c.add_argument("--suite", action="append")
    c.add_argument("--inject-fault", choices=["euler-step"])
    c.add_argument("--desk-dir", help="run (or reuse) the desk-scale experiment under this directory")
    c.add_argument("--report")
    c.set_defaults(func=cmd_check)
    return p


def setup_logging():
    level = os.environ.get("ENVIRO_INFILL_LOG", "WARNING").upper()
    if level not in ("DEBUG", "INFO", "WARNING", "ERROR"):
        level = "WARNING"
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)


def main(argv=None):
    setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        settings = Settings(args)
        torch.set_num_threads(int(settings.get("threads", args.threads)))
        args.func(args, settings)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (SampleRateError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (ConfigError, EnviroInfillError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
