import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from enviro_infill import corpus, net
from enviro_infill.errors import ConfigError, DomainError, ShapeError

TINY = net.DitConfig.tiny(mel_bins=8)


def randomized(config=TINY, seed=0, scale=0.2):
    """Fresh params with every tensor jittered, so gated paths are active."""
    model = net.init_params(config, seed)
    gen = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(scale * torch.randn(p.shape, generator=gen))
    return model.eval()


def conditions(L, M=8, Le=13, seed=0, text="abcab"):
    rng = np.random.default_rng(seed)
    return net.ConditionSet(
        text=corpus.extend_text(text, L),
        speaker_mel=rng.standard_normal((M, L)),
        env_mel=rng.standard_normal((M, Le)),
    )


def v(model, x, cond, t=0.4):
    return net.velocity(model, torch.as_tensor(x, dtype=torch.float32), t, cond)


def test_timestep_embedding_contract():
    e0 = net.embed_timestep(0.0, 32)
    assert e0.shape == (1, 32)
    assert torch.equal(e0, net.embed_timestep(0.0, 32))
    assert torch.linalg.norm(net.embed_timestep(0.3, 32) - net.embed_timestep(0.7, 32)) > 0
    for bad in (-0.01, 1.01, float("nan")):
        with pytest.raises(DomainError):
            net.embed_timestep(bad, 32)


def test_timestep_embedding_distinguishes_close_steps_and_is_lipschitz():
    ts = torch.linspace(0, 1, 10_001, dtype=torch.float64)
    e = net.embed_timestep(ts, 64)
    d = torch.linalg.norm(e[1:] - e[:-1], dim=1)
    assert torch.all(d > 0)
    ratio = (d / (ts[1:] - ts[:-1])).max().item()
    freq = torch.exp(-np.log(10000.0) * torch.arange(32, dtype=torch.float64) / 32)
    bound = 1000.0 * torch.linalg.norm(freq).item()
    assert np.isfinite(ratio) and ratio <= bound * (1 + 1e-6)


@pytest.mark.parametrize("L", [8, 37, 64])
def test_output_shape_matches_input(L):
    model = randomized()
    out = v(model, np.random.default_rng(L).standard_normal((8, L)), conditions(L))
    assert out.shape == (8, L)


def test_shape_errors():
    model = randomized()
    with pytest.raises(ShapeError):
        v(model, np.zeros((7, 10)), conditions(10))
    bad = conditions(10)
    bad.speaker_mel = np.zeros((8, 9))
    with pytest.raises(ShapeError):
        v(model, np.zeros((8, 10)), bad)
    bad = conditions(10)
    bad.text = bad.text[:5]
    with pytest.raises(ShapeError):
        v(model, np.zeros((8, 10)), bad)


def test_config_validation():
    with pytest.raises(ConfigError):
        net.DitConfig(embed_dim=30, heads=4)
    with pytest.raises(ConfigError):
        net.DitConfig(layers=0)
    with pytest.raises(ConfigError):
        net.DitConfig(conv_kernel=4)


def test_env_changes_output_through_cross_attention():
    model = randomized()
    x = np.random.default_rng(1).standard_normal((8, 20))
    a, b = conditions(20, seed=1), conditions(20, seed=1)
    b.env_mel = b.env_mel + 1.0
    assert torch.linalg.norm(v(model, x, a) - v(model, x, b)) > 0


def test_zeroed_cross_attention_output_makes_env_irrelevant():
    model = randomized()
    with torch.no_grad():
        for block in model.blocks:
            block.cross_attn.out.weight.zero_()
            block.cross_attn.out.bias.zero_()
    x = np.random.default_rng(2).standard_normal((8, 20))
    a, b = conditions(20, seed=2, Le=5), conditions(20, seed=3, Le=31)
    b.text, b.speaker_mel = a.text, a.speaker_mel
    assert torch.equal(v(model, x, a), v(model, x, b))
    c = net.null_out(a, drop_env=True)
    assert torch.equal(v(model, x, a), v(model, x, c))


def test_null_embeddings_substitute_exactly():
    model = randomized()
    L = 15
    x = np.random.default_rng(4).standard_normal((8, L))
    full = conditions(L, seed=4)
    null_text = net.ConditionSet(None, full.speaker_mel, full.env_mel)
    spliced_text = net.ConditionSet(np.full(L, corpus.NULL_ID), full.speaker_mel, full.env_mel)
    assert torch.equal(v(model, x, null_text), v(model, x, spliced_text))

    spk = model.null_speaker.detach()[:, None].expand(8, L).numpy()
    assert torch.equal(v(model, x, net.ConditionSet(full.text, None, full.env_mel)),
                       v(model, x, net.ConditionSet(full.text, spk, full.env_mel)))

    env = model.null_env.detach()[:, None].numpy()
    assert torch.equal(v(model, x, net.ConditionSet(full.text, full.speaker_mel, None)),
                       v(model, x, net.ConditionSet(full.text, full.speaker_mel, env)))


def test_batched_drop_flags_match_single_null_forward():
    model = randomized().double()
    L = 12
    rng = np.random.default_rng(5)
    x = torch.as_tensor(rng.standard_normal((2, 8, L)))
    text = torch.as_tensor(np.stack([corpus.extend_text("abc", L)] * 2))
    spk = torch.as_tensor(rng.standard_normal((2, 8, L)))
    env = torch.as_tensor(rng.standard_normal((2, 8, L)))
    t = torch.tensor([0.3, 0.6], dtype=torch.float64)
    out = model(x, t, text, spk, env, drop_text_speaker=[True, False], drop_env=[False, True])
    a = model(x[:1], t[:1], None, None, env[:1])
    b = model(x[1:], t[1:], text[1:], spk[1:], None)
    assert torch.allclose(out[0], a[0], atol=1e-12)
    assert torch.allclose(out[1], b[0], atol=1e-12)


def test_null_out_patterns():
    c = conditions(10)
    same = net.null_out(c)
    assert same.text is c.text and same.speaker_mel is c.speaker_mel and same.env_mel is c.env_mel
    n = net.null_out(c, True, True)
    assert n.text is None and n.speaker_mel is None and n.env_mel is None
    e = net.null_out(c, drop_env=True)
    assert e.text is c.text and e.speaker_mel is c.speaker_mel and e.env_mel is None
    s = net.null_out(c, drop_text_speaker=True)
    assert s.text is None and s.speaker_mel is None and s.env_mel is c.env_mel


def test_init_is_seeded_and_does_not_touch_global_rng():
    torch.manual_seed(123)
    before = torch.rand(1)
    torch.manual_seed(123)
    a = net.init_params(TINY, 7)
    after = torch.rand(1)
    b = net.init_params(TINY, 7)
    assert torch.equal(before, after)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)


def test_desk_param_count_and_initial_output_scale():
    cfg = net.DitConfig()
    assert net.param_count(cfg) < 5_000_000
    model = net.init_params(cfg, 0).eval()
    L = 40
    cond = conditions(L, M=80)
    out = v(model, np.random.default_rng(0).standard_normal((80, L)), cond)
    assert torch.all(torch.isfinite(out))
    rms = out.pow(2).mean().sqrt().item()
    assert 1e-4 <= rms <= 1e2


def test_forward_is_deterministic():
    model = randomized()
    x = np.random.default_rng(6).standard_normal((8, 21))
    c = conditions(21)
    assert torch.equal(v(model, x, c), v(model, x, c))


def test_padded_frames_do_not_leak_into_valid_frames():
    model = randomized().double()
    rng = np.random.default_rng(8)
    L, pad = 10, 6
    x = torch.as_tensor(rng.standard_normal((1, 8, L)))
    spk = torch.as_tensor(rng.standard_normal((1, 8, L)))
    env = torch.as_tensor(rng.standard_normal((1, 8, 5)))
    text = torch.as_tensor(corpus.extend_text("abcd", L))[None]
    t = torch.tensor([0.5], dtype=torch.float64)
    ref = model(x, t, text, spk, env)
    xp = torch.cat([x, torch.as_tensor(rng.standard_normal((1, 8, pad)))], dim=2)
    sp = torch.cat([spk, torch.as_tensor(rng.standard_normal((1, 8, pad)))], dim=2)
    tp = torch.cat([text, torch.zeros(1, pad, dtype=torch.long)], dim=1)
    mask = torch.zeros(1, L + pad, dtype=torch.bool)
    mask[:, :L] = True
    out = model(xp, t, tp, sp, env, frame_mask=mask)
    assert torch.allclose(out[..., :L], ref, atol=1e-12)
    assert not out[..., L:].any()


@settings(max_examples=20, deadline=None)
@given(n=st.integers(1, 12), L=st.integers(12, 60))
def test_text_stretch_covers_every_token_in_order(n, L):
    model = net.init_params(TINY)
    text = torch.as_tensor(corpus.extend_text("abcdefghijkl"[:n], L))[None]
    mask = torch.ones(1, L, dtype=torch.bool)
    feats = model.stretch_text(text, mask)[0]
    table = model.text_embed.weight
    ids = [int(torch.argmin(torch.linalg.norm(table - f, dim=1))) for f in feats]
    wanted = corpus.Vocab().encode("abcdefghijkl"[:n])
    runs = [ids[0]] + [b for a, b in zip(ids, ids[1:]) if b != a]
    assert runs == wanted


def test_checkpoint_round_trip(tmp_path):
    model = randomized()
    path = net.save_model(tmp_path / "dit.ckpt", model, {"step": 3})
    loaded, meta, extra = net.load_model(path)
    assert meta["step"] == 3 and extra == {}
    assert loaded.config == model.config
    x = np.random.default_rng(9).standard_normal((8, 11))
    c = conditions(11)
    assert torch.equal(v(model, x, c), v(loaded, x, c))


def test_mel_normalization_round_trip():
    mel = np.random.default_rng(0).uniform(-11.5, 3, (80, 5))
    cfg = net.DitConfig()
    assert np.allclose(net.denormalize_mel(net.normalize_mel(mel, cfg), cfg), mel, atol=1e-12)
