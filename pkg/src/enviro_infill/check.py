"""Self-verification suites behind ``enviro-infill check``.

Each suite returns ``(passed, details)``; :func:`run` wraps them into a
machine-readable report.  The ``euler-step`` fault perturbs the Euler step
size so the ODE suite should fail while the others keep passing.
"""
import contextlib
import csv
import hashlib
import io
import tempfile
import time
from pathlib import Path

import numpy as np
import torch

from . import corpus, dsp, infer, net, ses, train

FAULTS = {"euler-step": ("EULER_STEP_PERTURBATION", 1e-3)}
TINY = net.DitConfig.tiny(mel_bins=8)


def _voiced(n, f0, seed, sr=24000):
    rng = np.random.default_rng(seed)
    t = np.arange(n) / sr
    return sum(rng.uniform(0.05, 0.2) / k * np.sin(2 * np.pi * k * f0 * t + rng.uniform(0, 6.3)) for k in range(1, 9))


def suite_dsp():
    cfg = dsp.StftConfig()
    rng = np.random.default_rng(0)
    x = rng.standard_normal(24000 + 123)
    round_trip = float(np.max(np.abs(dsp.istft(dsp.stft(x, cfg), cfg, length=x.size) - x)))
    worst = 0.0
    for i in range(20):
        s = _voiced(48000, 100 + 15 * i, i)
        e = rng.uniform(0.01, 0.3) * rng.standard_normal(48000)
        t_snr = dsp.snr_db(dsp.energy(s), dsp.energy(e))
        f_snr = dsp.snr_db(dsp.energy(dsp.magnitude(dsp.stft(s, cfg))), dsp.energy(dsp.magnitude(dsp.stft(e, cfg))))
        worst = max(worst, abs(t_snr - f_snr))
    mag = dsp.magnitude(dsp.stft(_voiced(24000, 150, 99), cfg))
    _, errors = dsp.griffin_lim(mag, cfg, iterations=40, return_errors=True)
    rise = float(np.max(np.diff(errors)))
    ok = round_trip < 1e-6 and worst < 0.2 and rise <= 1e-8
    return ok, {"round_trip_max_abs": round_trip, "parseval_snr_max_err_db": worst, "gl_max_error_rise": rise}


def desk_prompt(rng, spec, snr):
    """Speech and a band-limited environment from the desk generator, mixed at ``snr``."""
    item = corpus.make_item(int(rng.integers(1_000_000)), int(rng.integers(1 << 30)), spec)
    env = corpus.random_environment(rng, spec, item.clean.size)
    mixture, env_part = corpus.mix_at_snr(item.clean, env, snr, rng, spec.sample_rate)
    return item.clean, env_part, mixture


def suite_snr_adaptation(n_pairs=50):
    spec = corpus.DeskCorpusSpec()
    cfg = dsp.StftConfig()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(n_pairs):
        branches = []
        truth = None
        for _ in range(2):
            snr = float(rng.uniform(*spec.mix.eval_snr_range))
            clean, env, mixture = desk_prompt(rng, spec, snr)
            clean_mag, env_mag = dsp.magnitude(dsp.stft(clean, cfg)), dsp.magnitude(dsp.stft(env, cfg))
            branches.append(infer.prompt_branches(mixture, None, cfg, ses.oracle_masks(clean_mag, env_mag)))
            truth = dsp.snr_db(dsp.energy(clean_mag), dsp.energy(env_mag))
        (spk_speech, _), (env_speech, env_bg) = branches
        s = infer.snr_scale_factor(spk_speech, env_speech, env_bg)
        achieved = dsp.snr_db(dsp.energy(spk_speech), dsp.energy(s * env_bg))
        worst = max(worst, abs(achieved - truth))
    return worst < 0.1, {"pairs": n_pairs, "max_err_db": worst}


def suite_mixing():
    rng = np.random.default_rng(2)
    worst = 0.0
    for lo, hi in ((-5.0, 15.0), (0.0, 20.0)):
        for _ in range(500):
            n = int(rng.integers(2000, 6000))
            clean = rng.standard_normal(n) * rng.uniform(0.01, 1)
            env = corpus.band_noise(int(rng.integers(500, 9000)), rng, level=rng.uniform(0.001, 0.5))
            snr = rng.uniform(lo, hi)
            mixture, _ = corpus.mix_at_snr(clean, env, snr, rng)
            worst = max(worst, abs(dsp.snr_db(dsp.energy(clean), dsp.energy(mixture - clean)) - snr))
    pool = [corpus.band_noise(400, rng)]
    clean = rng.standard_normal(300)
    silent = sum(corpus.augment(clean, pool, corpus.MixSpec(), rng)[2] is None for _ in range(10_000)) / 10_000
    return worst < 1e-6 and abs(silent - 0.5) <= 0.02, {"max_snr_err_db": worst, "silence_fraction": silent}


def _tiny_batch(seed=0):
    items = corpus.build_desk_corpus(corpus.DeskCorpusSpec(n_items=2), seed)
    builder = train.BatchBuilder(TINY)
    return builder.build([(it.clean, it.env, it.mixture, it.text) for it in items], np.random.default_rng(seed))


def _jittered(config, seed, scale=0.1):
    model = net.init_params(config, seed)
    gen = torch.Generator().manual_seed(seed + 100)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(scale * torch.randn(p.shape, generator=gen))
    return model.eval()


def suite_cfm():
    batch = _tiny_batch()
    rng = np.random.default_rng(0)
    flow = train.draw_flow(batch, rng)
    model = _jittered(TINY, 0)
    v = torch.as_tensor(flow.x1, dtype=torch.float32) - torch.as_tensor(flow.x0, dtype=torch.float32)
    perfect = train.cfm_loss(model, batch, flow, velocity=v).item()
    w = torch.as_tensor(rng.standard_normal(flow.x1.shape), dtype=torch.float32).requires_grad_(True)
    train.cfm_loss(model, batch, flow, velocity=w).backward()
    unmasked = torch.as_tensor((batch.m_spk * batch.frame_mask) == 0)[:, None, :].expand_as(w)
    leak = float(w.grad[unmasked].abs().max()) if unmasked.any() else 0.0
    rel = train.gradient_check(model, batch, flow, 1e-3, 200, rng)
    ok = perfect == 0.0 and leak == 0.0 and rel < 1e-3 and net.param_count(TINY) <= 50_000
    return ok, {"perfect_loss": perfect, "unmasked_grad_max": leak, "grad_check_max_rel": rel,
                "params": net.param_count(TINY)}


def _guidance_case(seed=3, L=14):
    model = _jittered(TINY, seed, 0.2).double()
    rng = np.random.default_rng(seed)
    cond = net.ConditionSet(corpus.extend_text("abcab", L), rng.standard_normal((8, L)), rng.standard_normal((8, 9)))
    x = torch.as_tensor(rng.standard_normal((8, L)))
    return model, x, cond


def suite_dcfg():
    model, x, cond = _guidance_case()
    rec = []
    g = infer.GuidanceConfig(1.7, 0.6)
    out = infer.dcfg_velocity(model, x, 0.37, cond, g, record=rec)
    v_full, v_speech, v_env, v_null = rec
    recon = float((out - (v_full + 1.7 * (v_speech - v_null) + 0.6 * (v_env - v_null))).abs().max())
    zero = infer.dcfg_velocity(model, x, 0.37, cond, infer.GuidanceConfig(0.0, 0.0))
    collapse = float((zero - net.velocity(model, x, 0.37, cond)).abs().max())
    null = net.null_out(cond, True, True)
    tele = infer.dcfg_velocity(model, x, 0.37, null, infer.GuidanceConfig(2.0, 2.0))
    telescope = float((tele - net.velocity(model, x, 0.37, null)).abs().max())
    ok = recon <= 1e-12 and collapse == 0.0 and telescope <= 1e-12
    return ok, {"recombination_max_abs": recon, "alpha0_max_abs": collapse, "null_telescope_max_abs": telescope}


def suite_ode():
    rng = np.random.default_rng(4)
    x0 = rng.standard_normal((8, 12))
    c = rng.standard_normal((8, 12))
    const = {}
    for steps in (1, 8, 32):
        got = infer.ode_solve(x0, lambda x, t: c, steps)
        const[steps] = float(np.max(np.abs(got - (x0 + c))))
    got = infer.ode_solve(x0, lambda x, t: -x, 1000)
    decay = float(np.max(np.abs(got - x0 * np.exp(-1.0)) / np.abs(x0 * np.exp(-1.0))))
    ok = all(v == 0.0 for v in const.values()) and decay < 1e-2
    return ok, {"constant_field_max_abs": const, "decay_rel_err": decay}


def _digest(path):
    path = Path(path)
    if path.suffix == ".csv":
        with open(path, newline="") as fh:
            rows = [r[:2] for r in csv.reader(fh)]
        return hashlib.sha256(repr(rows).encode()).hexdigest()
    return hashlib.sha256(path.read_bytes()).hexdigest()


def tree_digest(root):
    root = Path(root)
    return {str(p.relative_to(root)): _digest(p) for p in sorted(root.rglob("*")) if p.is_file()}


TINY_CONFIG = """\
mel_bins = 8
corpus.n_items = 4
ses.steps = 3
ses.batch_size = 2
ses.checkpoint_every = 2
ses.model.layers = 1
ses.model.heads = 2
ses.model.embed_dim = 16
ses.model.ffn_dim = 32
tts.steps = 3
tts.batch_size = 2
tts.checkpoint_every = 2
tts.model.layers = 1
tts.model.heads = 2
tts.model.embed_dim = 16
tts.model.ffn_dim = 32
tts.model.time_embed_dim = 16
tts.model.text_dim = 8
tts.model.conv_kernel = 5
synth.ode_steps = 2
synth.gl_iterations = 3
"""


def pipeline(root, seed):
    """Every subcommand once on a tiny configuration; returns ``{subcommand: exit code}``."""
    from .cli import main

    root = Path(root)
    conf = root / "tiny.conf"
    conf.write_text(TINY_CONFIG)
    base = ["--config", str(conf), "--seed", str(seed), "--threads", "1"]
    c = root / "corpus"
    m = c / "manifest.jsonl"
    steps = [
        ("build-corpus", ["build-corpus", "--output-dir", str(c)]),
        ("train-ses", ["train-ses", "--manifest", str(m), "--output-dir", str(root / "ses")]),
        ("train-tts", ["train-tts", "--manifest", str(m), "--ses-checkpoint", str(root / "ses" / "ses.ckpt"),
                       "--output-dir", str(root / "tts")]),
        ("separate", ["separate", "--input", str(c / "item00001_mix.wav"), "--ses-checkpoint",
                      str(root / "ses" / "ses.ckpt"), "--output-dir", str(root / "sep")]),
        ("mix", ["mix", "--clean", str(c / "item00000_clean.wav"), "--env", str(root / "sep" / "env.wav"),
                 "--snr", "3", "--output-dir", str(root / "mix")]),
        ("synth", ["synth", "--speaker-prompt", str(c / "item00000_mix.wav"), "--env-prompt",
                   str(root / "mix" / "mixture.wav"), "--ref-text", "abc", "--gen-text", "bca",
                   "--ses-checkpoint", str(root / "ses" / "ses.ckpt"), "--tts-checkpoint",
                   str(root / "tts" / "tts_last.ckpt"), "--snr-adapt", "--mel-dump", "--output-dir", str(root / "syn")]),
    ]
    codes = {}
    with contextlib.redirect_stdout(io.StringIO()):
        for name, argv in steps:
            codes[name] = main(argv[:1] + base + argv[1:])
    return codes


def suite_determinism(seed=7):
    with tempfile.TemporaryDirectory() as a, tempfile.TemporaryDirectory() as b:
        codes_a, codes_b = pipeline(a, seed), pipeline(b, seed)
        da, db = tree_digest(a), tree_digest(b)
    per_command = {}
    for name in codes_a:
        prefix = {"build-corpus": "corpus", "train-ses": "ses", "train-tts": "tts", "separate": "sep",
                  "mix": "mix", "synth": "syn"}[name]
        keys = [k for k in da if k.startswith(prefix + "/")]
        per_command[name] = bool(keys) and codes_a[name] == codes_b[name] == 0 and all(da[k] == db.get(k) for k in keys)
    return all(per_command.values()) and da.keys() == db.keys(), {"subcommands": per_command, "files": len(da)}


def suite_desk(desk_dir):
    from . import desk

    res = desk.DeskRun(desk_dir).run()
    checks = {
        "overfit_ratio": res["overfit_ratio"] < 0.05,
        "token_accuracy": res["token_accuracy"] >= 0.9,
        "band_gain_db_mean": res["band_gain_db_mean"] >= 6.0,
        "snr_error_db_mean_abs": res["snr_error_db_mean_abs"] <= 1.5,
        "train_hours": res["train_seconds"] < 4 * 3600,
    }
    details = {k: res[k] for k in ("overfit_ratio", "token_accuracy", "band_gain_db_mean", "snr_error_db_mean_abs",
                                   "train_seconds")}
    details["checks"] = checks
    return all(checks.values()), details


SUITES = {
    "dsp": suite_dsp,
    "snr_adaptation": suite_snr_adaptation,
    "mixing": suite_mixing,
    "cfm": suite_cfm,
    "dcfg": suite_dcfg,
    "ode": suite_ode,
    "desk": suite_desk,
    "determinism": suite_determinism,
}


@contextlib.contextmanager
def injected(fault):
    if fault is None:
        yield
        return
    attr, value = FAULTS[fault]
    old = getattr(infer, attr)
    setattr(infer, attr, value)
    try:
        yield
    finally:
        setattr(infer, attr, old)


def run(names=None, fault=None, desk_dir=None):
    """Report dict: ``{"passed": bool, "fault": ..., "suites": [{name, status, seconds, details}]}``.

    The desk suite trains for hours, so it is reported as skipped unless
    ``desk_dir`` is given.
    """
    names = list(names or SUITES)
    unknown = set(names) - set(SUITES)
    if unknown:
        raise ValueError(f"unknown suites: {', '.join(sorted(unknown))}")
    torch.set_num_threads(1)
    rows = []
    with injected(fault):
        for name in SUITES:
            if name not in names:
                continue
            if name == "desk" and desk_dir is None:
                rows.append({"name": name, "status": "skipped", "seconds": 0.0,
                             "details": {"reason": "pass --desk-dir to run the desk-scale experiment"}})
                continue
            t0 = time.perf_counter()
            try:
                ok, details = SUITES[name](desk_dir) if name == "desk" else SUITES[name]()
            except Exception as exc:
                ok, details = False, {"error": f"{type(exc).__name__}: {exc}"}
            rows.append({"name": name, "status": "pass" if ok else "fail",
                         "seconds": round(time.perf_counter() - t0, 3), "details": details})
    return {"passed": all(r["status"] != "fail" for r in rows), "fault": fault, "suites": rows}
