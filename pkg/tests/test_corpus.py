import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from enviro_infill import corpus, dsp
from enviro_infill.errors import ConfigError, TextOverflowError, UndefinedSnrError


def tone(n, f=440.0, sr=24000):
    return 0.2 * np.sin(2 * np.pi * f * np.arange(n) / sr)


def achieved_snr(clean, mixture):
    return dsp.snr_db(dsp.energy(clean), dsp.energy(mixture - clean))


def test_equal_energy_zero_db_gives_unit_gain():
    rng = np.random.default_rng(0)
    clean = tone(4800)
    env = clean[::-1].copy()
    _, scaled = corpus.mix_at_snr(clean, env, 0.0, rng)
    assert np.allclose(scaled, env, rtol=0, atol=1e-14)


def test_equal_energy_twenty_db_gives_gain_tenth():
    rng = np.random.default_rng(0)
    clean = tone(4800)
    env = clean[::-1].copy()
    _, scaled = corpus.mix_at_snr(clean, env, 20.0, rng)
    assert np.allclose(scaled, 0.1 * env, rtol=1e-12, atol=0)


@pytest.mark.parametrize("snr_range", [(-5.0, 15.0), (0.0, 20.0)])
def test_mix_exactness_over_random_cases(snr_range):
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(500):
        n = int(rng.integers(2000, 8000))
        clean = rng.standard_normal(n) * rng.uniform(0.01, 1)
        env = corpus.band_noise(int(rng.integers(500, 12000)), rng, level=rng.uniform(0.001, 0.5))
        snr = rng.uniform(*snr_range)
        mixture, scaled = corpus.mix_at_snr(clean, env, snr, rng)
        assert mixture.shape == clean.shape == scaled.shape
        worst = max(worst, abs(achieved_snr(clean, mixture) - snr))
    assert worst < 1e-6


def test_mix_rejects_silence():
    rng = np.random.default_rng(0)
    with pytest.raises(UndefinedSnrError):
        corpus.mix_at_snr(np.zeros(100), np.ones(100), 0.0, rng)
    with pytest.raises(UndefinedSnrError):
        corpus.mix_at_snr(np.ones(100), np.zeros(100), 0.0, rng)


def test_short_env_is_looped_and_long_env_cropped():
    rng = np.random.default_rng(0)
    short = corpus.band_noise(1000, rng)
    assert corpus.fit_length(short, 5000, rng).shape == (5000,)
    long = np.arange(10000.0)
    crop = corpus.fit_length(long, 300, rng)
    assert np.all(np.diff(crop) == 1.0)


def test_augment_prob_zero_returns_clean_and_silence():
    rng = np.random.default_rng(0)
    clean = tone(3000)
    spec = corpus.MixSpec(augment_prob=0.0)
    for _ in range(20):
        mixture, env, snr = corpus.augment(clean, [np.ones(100)], spec, rng)
        assert np.array_equal(mixture, clean)
        assert not env.any() and env.shape == clean.shape and snr is None


def test_augment_prob_one_snr_histogram_uniform():
    rng = np.random.default_rng(5)
    clean = tone(600)
    pool = [corpus.band_noise(800, rng)]
    spec = corpus.MixSpec(augment_prob=1.0)
    snrs = np.array([corpus.augment(clean, pool, spec, rng)[2] for _ in range(10_000)])
    assert snrs.min() >= -5 and snrs.max() <= 15
    counts, _ = np.histogram(snrs, bins=20, range=(-5, 15))
    assert stats.chisquare(counts).pvalue > 0.01


def test_augment_silence_fraction_half():
    rng = np.random.default_rng(6)
    clean = tone(300)
    pool = [corpus.band_noise(400, rng)]
    spec = corpus.MixSpec()
    silent = sum(corpus.augment(clean, pool, spec, rng)[2] is None for _ in range(10_000))
    assert abs(silent / 10_000 - 0.5) <= 0.02


def test_mixspec_validation():
    with pytest.raises(ConfigError):
        corpus.MixSpec(train_snr_range=(10, 0))
    with pytest.raises(ConfigError):
        corpus.MixSpec(augment_prob=1.5)
    with pytest.raises(ConfigError):
        corpus.augment(tone(10), [], corpus.MixSpec(), np.random.default_rng())


def test_span_mask_examples():
    rng = np.random.default_rng(0)
    assert corpus.sample_span_mask(17, (1.0, 1.0), rng).tolist() == [1] * 17
    m = corpus.sample_span_mask(10, (0.5, 0.5), rng)
    assert m.sum() == 5
    idx = np.flatnonzero(m)
    assert idx[-1] - idx[0] == 4


def test_span_lengths_uniform_ks():
    rng = np.random.default_rng(2)
    L = 1000
    lengths = np.array([corpus.sample_span_mask(L, (0.7, 1.0), rng).sum() for _ in range(10_000)])
    jitter = rng.uniform(-0.5, 0.5, lengths.size)
    assert stats.kstest((lengths + jitter) / L, stats.uniform(0.7, 0.3).cdf).pvalue > 0.01


def test_span_mask_contiguity_many_draws():
    rng = np.random.default_rng(9)
    lengths = rng.integers(1, 200, 100_000)
    lo = rng.uniform(0, 1, 100_000)
    hi = lo + (1 - lo) * rng.uniform(0, 1, 100_000)
    for L, a, b in zip(lengths, lo, hi):
        m = corpus.sample_span_mask(int(L), (a, b), rng)
        idx = np.flatnonzero(m)
        span = m.sum()
        assert round(a * L) - 1 <= span <= round(b * L) + 1
        if span:
            assert idx[-1] - idx[0] + 1 == span


def test_span_mask_bad_range():
    with pytest.raises(ConfigError):
        corpus.sample_span_mask(10, (0.8, 0.2))
    with pytest.raises(ConfigError):
        corpus.sample_span_mask(0, (0.5, 0.6))


def test_extend_text_examples():
    v = corpus.Vocab()
    assert corpus.extend_text("ab", 4, v).tolist() == [v.id_of("a"), v.id_of("b"), corpus.FILL_ID, corpus.FILL_ID]
    assert corpus.extend_text("", 3, v).tolist() == [corpus.FILL_ID] * 3
    with pytest.raises(TextOverflowError):
        corpus.extend_text("abcd", 3, v)


def test_unknown_character_round_trips_through_unk():
    v = corpus.Vocab()
    ids = corpus.extend_text("a#b", 5, v)
    assert ids[1] == corpus.UNK_ID
    assert v.decode(ids) == "a" + corpus.UNK_CHAR + "b"
    assert v.id_of(v.lookup(corpus.UNK_ID)) == corpus.UNK_ID


@settings(max_examples=200, deadline=None)
@given(text=st.text(alphabet="abcdefghijklmnopqrstuvwxyz ?!#", max_size=30), extra=st.integers(0, 20))
def test_extend_text_length_and_ids(text, extra):
    v = corpus.Vocab()
    z = corpus.extend_text(text, len(text) + extra, v)
    assert z.size == len(text) + extra
    assert np.all((z >= 0) & (z < len(v)))
    assert v.decode(z) == "".join(c if c in v.chars else corpus.UNK_CHAR for c in text)


def test_desk_corpus_is_deterministic():
    spec = corpus.DeskCorpusSpec(n_items=6)
    a = corpus.build_desk_corpus(spec, 42)
    b = corpus.build_desk_corpus(spec, 42)
    for x, y in zip(a, b):
        assert x.text == y.text and x.snr_db == y.snr_db
        assert np.array_equal(x.mixture, y.mixture) and np.array_equal(x.env, y.env)
    c = corpus.build_desk_corpus(spec, 43)
    assert any(x.text != z.text for x, z in zip(a, c))


def test_desk_corpus_snr_in_training_range():
    spec = corpus.DeskCorpusSpec(n_items=40)
    items = corpus.build_desk_corpus(spec, 1)
    lo, hi = spec.mix.train_snr_range
    for it in items:
        if it.snr_db is None:
            assert not it.env.any()
            assert np.array_equal(it.mixture, it.clean)
        else:
            got = achieved_snr(it.clean, it.mixture)
            assert lo - 1e-6 <= got <= hi + 1e-6
            assert abs(got - it.snr_db) < 1e-6


def test_tone_decoder_recovers_text_on_clean_and_mixture():
    spec = corpus.DeskCorpusSpec(n_items=30)
    for it in corpus.build_desk_corpus(spec, 3):
        assert corpus.decode_tones(it.clean, len(it.text)) == it.text
        assert corpus.decode_tones(it.mixture, len(it.text)) == it.text


def test_desk_environment_sits_above_speech_band():
    spec = corpus.DeskCorpusSpec(n_items=10)
    freqs = np.fft.rfftfreq(48000, 1 / 24000)
    for it in corpus.build_desk_corpus(spec, 4):
        if it.snr_db is None:
            continue
        p = np.abs(np.fft.rfft(it.env, 48000)) ** 2
        assert p[freqs < 5000].sum() / p.sum() < 1e-4


def test_manifest_round_trip(tmp_path):
    spec = corpus.DeskCorpusSpec(n_items=4)
    items = corpus.build_desk_corpus(spec, 0)
    manifest = corpus.write_corpus(items, tmp_path, spec)
    recs = corpus.read_manifest(manifest, expected_rate=spec.sample_rate)
    assert len(recs) == 4
    assert set(recs[0]) >= {"id", "clean_path", "env_path", "mixture_path", "snr_db", "text"}
    for r, it in zip(recs, items):
        assert r["text"] == it.text
        assert np.allclose(r["mixture"], it.mixture, atol=1e-7)


def test_dynamic_mixing_differs_across_epochs_but_reproduces_under_seed():
    spec = corpus.DeskCorpusSpec(n_items=6)
    items = corpus.build_desk_corpus(spec, 0)
    recs = [dict(clean=it.clean, env=it.env, text=it.text, snr_db=it.snr_db) for it in items]
    recs[0]["snr_db"] = 1.0
    recs[0]["env"] = corpus.band_noise(3000, np.random.default_rng(0))

    def epoch(mixer):
        return [m for _, _, m, _, _ in mixer.draw(6, augment_prob=1.0)]

    live = corpus.DynamicMixer.from_records(recs, spec.mix, np.random.default_rng(1))
    e1, e2 = epoch(live), epoch(live)
    assert any(a.shape != b.shape or not np.array_equal(a, b) for a, b in zip(e1, e2))
    again = epoch(corpus.DynamicMixer.from_records(recs, spec.mix, np.random.default_rng(1)))
    assert all(np.array_equal(a, b) for a, b in zip(e1, again))


def test_paired_draw_remixes_the_same_utterance():
    spec = corpus.DeskCorpusSpec(n_items=6)
    items = corpus.build_desk_corpus(spec, 0)
    recs = [dict(clean=it.clean, env=it.env, text=it.text, snr_db=it.snr_db) for it in items]
    recs[0]["snr_db"] = 1.0
    recs[0]["env"] = corpus.band_noise(3000, np.random.default_rng(0))
    mixer = corpus.DynamicMixer.from_records(recs, spec.mix, np.random.default_rng(2))
    for clean, _, mixture, _, _, view in mixer.draw_paired(20, 1.0):
        mix2, env2 = view
        assert mix2.shape == mixture.shape
        assert np.allclose(mix2 - env2, clean, atol=1e-12)
    assert all(d[5] is None for d in mixer.draw_paired(20, 0.0))
