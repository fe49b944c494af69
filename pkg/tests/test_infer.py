import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from enviro_infill import corpus, dsp, infer, net, ses
from enviro_infill.errors import ConfigError, DivergenceError, UndefinedSnrError

TINY = net.DitConfig.tiny(mel_bins=8)
CFG = dsp.StftConfig()


def jittered(seed=0, scale=0.2):
    model = net.init_params(TINY, seed)
    gen = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(scale * torch.randn(p.shape, generator=gen))
    return model.eval().double()


def case(seed=0, L=16, Le=7):
    rng = np.random.default_rng(seed)
    cond = net.ConditionSet(corpus.extend_text("abcd", L), rng.standard_normal((8, L)), rng.standard_normal((8, Le)))
    return torch.as_tensor(rng.standard_normal((8, L))), cond


def test_scale_factor_examples():
    a = np.ones((4, 4))
    assert infer.snr_scale_factor(a, a, a) == 1.0
    assert math.isclose(infer.snr_scale_factor(2 * a, a, a), 2.0)
    with pytest.raises(UndefinedSnrError):
        infer.snr_scale_factor(a, np.zeros_like(a), a)
    with pytest.raises(UndefinedSnrError):
        infer.snr_scale_factor(a, a, np.zeros_like(a))


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_substituted_scale_reproduces_env_prompt_snr(seed):
    rng = np.random.default_rng(seed)
    spk, env_speech, env_bg = (rng.random((20, 6)) * rng.uniform(0.01, 10) for _ in range(3))
    s = infer.snr_scale_factor(spk, env_speech, env_bg)
    target = dsp.snr_db(dsp.energy(env_speech), dsp.energy(env_bg))
    assert abs(dsp.snr_db(dsp.energy(spk), dsp.energy(s * env_bg)) - target) < 1e-9


def test_oracle_separated_prompts_keep_snr_within_tenth_db():
    spec = corpus.DeskCorpusSpec()
    rng = np.random.default_rng(10)
    for _ in range(50):
        mags, truth = [], None
        for _ in range(2):
            item = corpus.make_item(int(rng.integers(10**6)), 0, spec)
            env = corpus.random_environment(rng, spec, item.clean.size)
            mixture, part = corpus.mix_at_snr(item.clean, env, rng.uniform(0, 20), rng)
            cm, em = dsp.magnitude(dsp.stft(item.clean)), dsp.magnitude(dsp.stft(part))
            mags.append(infer.prompt_branches(mixture, None, CFG, ses.oracle_masks(cm, em)))
            truth = dsp.snr_db(dsp.energy(cm), dsp.energy(em))
        (spk, _), (env_speech, env_bg) = mags
        s = infer.snr_scale_factor(spk, env_speech, env_bg)
        assert abs(dsp.snr_db(dsp.energy(spk), dsp.energy(s * env_bg)) - truth) < 0.1


def test_guidance_recombination_exact():
    model = jittered()
    x, cond = case()
    rec = []
    out = infer.dcfg_velocity(model, x, 0.3, cond, infer.GuidanceConfig(1.3, 0.4), rec)
    full, speech, env, null = rec
    assert torch.allclose(out, full + 1.3 * (speech - null) + 0.4 * (env - null), rtol=0, atol=1e-12)


def test_zero_strengths_collapse_to_conditional():
    model = jittered()
    x, cond = case(1)
    out = infer.dcfg_velocity(model, x, 0.5, cond, infer.GuidanceConfig(0.0, 0.0))
    assert torch.equal(out, net.velocity(model, x, 0.5, cond))


def test_all_null_condition_telescopes():
    model = jittered()
    x, cond = case(2)
    null = net.null_out(cond, True, True)
    out = infer.dcfg_velocity(model, x, 0.5, null, infer.GuidanceConfig(2.0, 2.0))
    assert torch.allclose(out, net.velocity(model, x, 0.5, null), rtol=0, atol=1e-12)


def test_env_only_guidance_vanishes_without_env():
    model = jittered()
    x, cond = case(3)
    no_env = net.null_out(cond, drop_env=True)
    a = infer.dcfg_velocity(model, x, 0.2, no_env, infer.GuidanceConfig(1.5, 0.0))
    b = infer.dcfg_velocity(model, x, 0.2, no_env, infer.GuidanceConfig(1.5, 3.0))
    assert torch.allclose(a, b, rtol=0, atol=1e-12)


def test_guidance_config_validation():
    for bad in (dict(alpha_speech=-1), dict(alpha_env=float("nan")), dict(ode_steps=0), dict(ode_steps=2.5)):
        with pytest.raises(ConfigError):
            infer.GuidanceConfig(**bad)


@pytest.mark.parametrize("steps", [1, 8, 32])
def test_constant_field_is_exact(steps):
    rng = np.random.default_rng(steps)
    x0, c = rng.standard_normal((8, 9)), rng.standard_normal((8, 9))
    assert np.array_equal(infer.ode_solve(x0, lambda x, t: c, steps), x0 + c)


@settings(max_examples=30, deadline=None)
@given(steps=st.integers(1, 64), seed=st.integers(0, 1000))
def test_constant_field_any_step_count(steps, seed):
    rng = np.random.default_rng(seed)
    x0, c = rng.standard_normal(5), rng.standard_normal(5)
    assert np.allclose(infer.ode_solve(x0, lambda x, t: c, steps), x0 + c, rtol=0, atol=1e-14)


def test_exponential_decay_converges():
    x0 = np.random.default_rng(0).standard_normal((4, 4))
    got = infer.ode_solve(x0, lambda x, t: -x, 1000)
    exact = x0 * math.exp(-1)
    assert np.max(np.abs(got - exact) / np.abs(exact)) < 1e-2


def test_field_sees_uniform_times():
    seen = []
    infer.ode_solve(np.zeros(2), lambda x, t: seen.append(t) or np.zeros(2), 4)
    assert seen == [0.0, 0.25, 0.5, 0.75]


def test_divergence_reports_step():
    with pytest.raises(DivergenceError, match="step 2"):
        infer.ode_solve(np.ones(3), lambda x, t: np.inf * x if t >= 0.5 else x, 4)
    with pytest.raises(ConfigError):
        infer.ode_solve(np.ones(3), lambda x, t: x, 0)


def test_step_perturbation_breaks_constant_field(monkeypatch):
    monkeypatch.setattr(infer, "EULER_STEP_PERTURBATION", 1e-3)
    x0, c = np.zeros(3), np.ones(3)
    assert not np.array_equal(infer.ode_solve(x0, lambda x, t: c, 8), x0 + c)


def voiced(n=12000, f0=220.0):
    t = np.arange(n) / 24000
    return sum(0.1 / k * np.sin(2 * np.pi * k * f0 * t) for k in range(1, 6))


def test_mel_to_linear_round_trip():
    fb = dsp.build_mel_filterbank(80, CFG, (0, 12000))
    mel = dsp.mag_to_mel(dsp.magnitude(dsp.stft(voiced())), fb)
    lin = infer.mel_to_linear(mel, fb)
    assert lin.shape == (CFG.n_freqs, mel.shape[1])
    assert np.all(lin >= 0)
    assert np.mean((dsp.mag_to_mel(lin, fb) - mel) ** 2) < 0.1


def test_mel_to_linear_floor_gives_zero():
    fb = dsp.build_mel_filterbank(80, CFG, (0, 12000))
    lin = infer.mel_to_linear(np.full((80, 5), math.log(dsp.MEL_EPS)), fb)
    assert not lin.any()
    with pytest.raises(ConfigError):
        infer.mel_to_linear(np.zeros((40, 5)), fb)


def test_duration_rule():
    assert infer.duration_frames(100, "abcd", "ab") == 50
    assert infer.duration_frames(100, "a" * 10, "a") == 30
    assert infer.duration_frames(10, "a", "a" * 50) == 100


def test_silence_snapping():
    floor = math.log(dsp.MEL_EPS)
    near = np.full((4, 3), floor + 0.5)
    assert infer.is_silent_mel(near)
    assert np.all(infer.floor_silent(near) == floor)
    loud = np.zeros((4, 3))
    assert infer.floor_silent(loud) is loud


def test_request_validation():
    x = voiced()
    with pytest.raises(ConfigError):
        infer.SynthesisRequest(x, x, "ab", "")
    with pytest.raises(ConfigError):
        infer.SynthesisRequest(np.zeros(4000), x, "ab", "cd")
    infer.SynthesisRequest(x, np.zeros(4000), "ab", "cd")


def synth(model, gen_text="bca", seed=0, env=None, snr_adapt=False):
    spec = corpus.DeskCorpusSpec(n_items=1)
    item = corpus.build_desk_corpus(spec, 5)[0]
    env = np.zeros(6000) if env is None else env
    fb = dsp.build_mel_filterbank(8, CFG, (0, 12000))
    req = infer.SynthesisRequest(item.clean, env, item.text, gen_text, infer.GuidanceConfig(2.0, 2.0, 4), snr_adapt, seed)
    oracle = lambda mag: ses.MaskPair(np.zeros_like(mag), np.ones_like(mag))
    return infer.synthesize(req, None, model, fb, CFG, gl_iterations=4, spk_masks=oracle, env_masks=oracle), item


def test_synthesis_shapes_and_prompt_discard():
    model = net.init_params(TINY, 0).eval()
    res, item = synth(model)
    assert res.ref_frames == CFG.frames_for(item.clean.size)
    assert res.gen_frames == infer.duration_frames(res.ref_frames, item.text, "bca")
    assert res.mel.shape == (8, res.gen_frames)
    assert res.waveform.size == (res.gen_frames - 1) * CFG.hop_size
    assert res.env_silent and res.scale == 1.0
    assert not res.c_spk[:, res.ref_frames:].any()


def test_synthesis_is_seeded():
    model = net.init_params(TINY, 0).eval()
    a, _ = synth(model, seed=3)
    b, _ = synth(model, seed=3)
    c, _ = synth(model, seed=4)
    assert np.array_equal(a.waveform, b.waveform)
    assert not np.array_equal(a.waveform, c.waveform)


def test_silent_env_prompt_skips_snr_adaptation():
    model = net.init_params(TINY, 0).eval()
    res, _ = synth(model, snr_adapt=True)
    assert res.scale == 1.0 and res.env_silent
    assert np.all(res.c_env == net.normalize_mel(np.full_like(res.c_env, math.log(dsp.MEL_EPS)), TINY))


def test_env_strength_zero_is_single_guidance():
    model = jittered()
    x, cond = case(4)
    rec = []
    out = infer.dcfg_velocity(model, x, 0.6, cond, infer.GuidanceConfig(2.5, 0.0), rec)
    full, speech, _, null = rec
    assert torch.allclose(out, full + 2.5 * (speech - null), rtol=0, atol=1e-12)
