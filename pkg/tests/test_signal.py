import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from meanflow_tse.signal import (ComplexSpectrogram, Waveform, f0_of, gen_dataset, hann, istft,
                                 load_split, mix, save_split, stft, synth_source)


def direct_dft(x, n_bins):
    """O(N * n_bins) real-input DFT, independent of numpy.fft."""
    n = np.arange(x.size)
    k = np.arange(n_bins)[:, None]
    return (x[None, :] * np.exp(-2j * np.pi * k * n / x.size)).sum(axis=1)


def test_synth_deterministic():
    a = synth_source(0, 1.0, 8000, seed=7)
    b = synth_source(0, 1.0, 8000, seed=7)
    assert a.samples.tobytes() == b.samples.tobytes()


@pytest.mark.parametrize("sid,seed", [(0, 1), (5, 2), (30, 3)])
def test_synth_unit_rms(sid, seed):
    assert abs(synth_source(sid, 0.5, 8000, seed).rms() - 1.0) < 1e-6


def test_same_identity_shares_f0_peak():
    a = synth_source(0, 1.0, 8000, seed=1).samples
    b = synth_source(0, 1.0, 8000, seed=2).samples
    assert not np.allclose(a, b)
    # 1 s at 8 kHz: bin k is k Hz
    pa = np.abs(direct_dft(a, 1000)).argmax()
    pb = np.abs(direct_dft(b, 1000)).argmax()
    assert pa == pb == round(f0_of(0))


def test_synth_rejects_bad_duration():
    with pytest.raises(ValueError):
        synth_source(0, 0.0)
    with pytest.raises(ValueError):
        synth_source(0, -1.0)


def test_mix_endpoints_and_arithmetic():
    s = synth_source(1, 0.25, 8000, 1)
    b = synth_source(25, 0.25, 8000, 2)
    assert np.array_equal(mix(s, b, 1.0).samples, s.samples)
    assert np.array_equal(mix(s, b, 0.0).samples, b.samples)
    out = mix(Waveform([1.0, 0.0], 8000), Waveform([0.0, 1.0], 8000), 0.5)
    assert out.samples.tolist() == [0.5, 0.5]


def test_mix_errors():
    s = Waveform(np.ones(10), 8000)
    with pytest.raises(ValueError):
        mix(s, Waveform(np.ones(11), 8000), 0.5)
    with pytest.raises(ValueError):
        mix(s, s, 1.5)
    with pytest.raises(ValueError):
        mix(s, s, -0.1)


@settings(max_examples=25, deadline=None)
@given(lam=st.floats(0, 1), seed=st.integers(0, 2**16))
def test_stft_linearity(lam, seed):
    rng = np.random.default_rng(seed)
    s = Waveform(rng.standard_normal(1000), 8000)
    b = Waveform(rng.standard_normal(1000), 8000)
    S, B = stft(s).data, stft(b).data
    Y = stft(mix(s, b, lam)).data
    ref = lam * S + (1 - lam) * B
    assert np.max(np.abs(Y - ref)) <= 1e-10 * np.max(np.abs(ref))


def test_stft_zero_and_bins():
    X = stft(Waveform(np.zeros(500), 8000), 64, 16)
    assert X.data.shape[1] == 33
    assert not np.any(X.data)


def test_stft_frame_of_hann_signal_matches_direct_dft():
    N, hop = 64, 16
    w = hann(N)
    X = stft(Waveform(w, 8000), N, hop)
    # frame N/(2 hop) starts exactly at sample 0 of the unpadded signal
    frame = X.data[N // (2 * hop)]
    oracle = direct_dft(w * w, N // 2 + 1)
    np.testing.assert_allclose(frame, oracle, atol=1e-12)


def test_stft_rejects_long_window():
    with pytest.raises(ValueError):
        stft(Waveform(np.ones(32), 8000), 64, 16)


@pytest.mark.parametrize("seed,length", [(0, 400), (1, 1000), (2, 8000), (3, 257)])
def test_round_trip(seed, length):
    w = Waveform(np.random.default_rng(seed).standard_normal(length), 8000)
    back = istft(stft(w), length).samples
    assert np.linalg.norm(back - w.samples) / np.linalg.norm(w.samples) < 1e-6


def test_istft_zero_and_linearity():
    X = ComplexSpectrogram(np.zeros((20, 33), complex), 16, 64)
    assert not np.any(istft(X, 300).samples)
    w = Waveform(np.random.default_rng(4).standard_normal(600), 8000)
    one = istft(stft(w), 600).samples
    two = istft(stft(Waveform(2 * w.samples, 8000)), 600).samples
    assert np.max(np.abs(two - 2 * one)) < 1e-10


def test_gen_dataset_degenerate_range_and_determinism():
    ds = gen_dataset(4, (0.5, 0.5), 0.25, seed=3)
    assert all(ex.lam == 0.5 for ex in ds)
    again = gen_dataset(4, (0.5, 0.5), 0.25, seed=3)
    for a, b in zip(ds, again):
        for name in "sbey":
            assert getattr(a, name).samples.tobytes() == getattr(b, name).samples.tobytes()


def test_gen_dataset_invariants():
    ds = gen_dataset(6, (0.3, 0.7), 0.25, seed=9)
    for ex in ds:
        assert 0.3 <= ex.lam <= 0.7
        np.testing.assert_array_equal(ex.y.samples, ex.lam * ex.s.samples + (1 - ex.lam) * ex.b.samples)
        assert len(ex.s) == len(ex.b) == len(ex.y)
        assert ex.target_id != ex.background_id
    assert {ex.target_id for ex in ds}.isdisjoint({ex.background_id for ex in ds})


def test_gen_dataset_errors():
    with pytest.raises(ValueError):
        gen_dataset(0)
    with pytest.raises(ValueError):
        gen_dataset(2, (0.7, 0.3))
    with pytest.raises(ValueError):
        gen_dataset(2, (0.0, 1.2))


def test_enrollment_shares_identity():
    ex = gen_dataset(1, seed=5, duration_s=0.25)[0]
    assert not np.allclose(ex.e.samples, ex.s.samples)
    pe = np.abs(direct_dft(ex.e.samples, 1000)).argmax()
    ps = np.abs(direct_dft(ex.s.samples, 1000)).argmax()
    assert abs(pe - ps) <= 4  # 0.25 s: 4 Hz per bin


def test_split_round_trip(tmp_path):
    ds = gen_dataset(3, seed=1, duration_s=0.1)
    save_split(ds, tmp_path / "train")
    back = load_split(tmp_path / "train")
    assert [e.example_id for e in back] == [e.example_id for e in ds]
    for a, b in zip(ds, back):
        assert a.lam == b.lam and a.target_id == b.target_id and a.background_id == b.background_id
        np.testing.assert_allclose(b.s.samples, a.s.samples, rtol=1e-6, atol=1e-6)
        np.testing.assert_array_equal(b.y.samples, b.lam * b.s.samples + (1 - b.lam) * b.b.samples)
    raw = (tmp_path / "train" / "ex00000_s.f32").read_bytes()
    assert len(raw) == 4 * len(ds[0].s)


def test_waveform_validation():
    with pytest.raises(ValueError):
        Waveform(np.array([]), 8000)
    with pytest.raises(ValueError):
        Waveform(np.array([1.0, np.nan]), 8000)
