import numpy as np
import pytest

from rtivae import metrics as mt
from rtivae import synthgen as sg


def attrs(**kw):
    base = dict(f0=220.0, rate=1.0, pause_frames=6, accent=0, noise_level=0.0)
    base.update(kw)
    return sg.StyleAttributes(**base)


TOKENS = [3, 7, 1, 12, 5]


def test_sample_deterministic():
    a = sg.generate_sample(11, attrs(noise_level=0.1), TOKENS)
    b = sg.generate_sample(11, attrs(noise_level=0.1), TOKENS)
    assert np.array_equal(a.frames, b.frames) and np.array_equal(a.waveform, b.waveform)


def test_length_formula_exact():
    for rate, n, pause in [(0.7, 3, 0), (1.0, 5, 6), (1.3, 12, 12), (0.85, 7, 3)]:
        s = sg.generate_sample(0, attrs(rate=rate, pause_frames=pause), list(range(n)))
        assert s.length == sg.expected_length(rate, n, pause) == \
            int(round(rate * sg.FRAMES_PER_TOKEN * n)) + pause


def test_no_pause_means_no_quiet_run():
    s = sg.generate_sample(0, attrs(pause_frames=0), TOKENS)
    assert mt.measure_pause(s.frames) <= 1


@pytest.mark.parametrize("pause", [2, 5, 8, 12])
def test_pause_recoverable(pause):
    s = sg.generate_sample(3, attrs(pause_frames=pause, noise_level=0.02), TOKENS)
    assert abs(mt.measure_pause(s.frames) - pause) <= 1


@pytest.mark.parametrize("f0,accent", [(130.0, 0), (200.0, 1), (245.0, 0), (290.0, 1)])
def test_pitch_recoverable(f0, accent):
    s = sg.generate_sample(0, attrs(f0=f0, accent=accent), TOKENS)
    est = mt.estimate_f0(s.waveform[: 6 * sg.HOP * 4])
    assert est == pytest.approx(f0, rel=0.02)


def test_attribute_validation():
    with pytest.raises(ValueError):
        attrs(f0=500.0)
    with pytest.raises(ValueError):
        attrs(pause_frames=13)
    with pytest.raises(ValueError):
        sg.generate_sample(0, attrs(), [1, 2])


def test_noisy_preset_snr_margin():
    # additive frame noise: SNR drops by 20 log10(0.2 / 0.02) = 20 dB
    clean_cfg = sg.DatasetConfig(n_per_class=20, preset="clean", seed=5)
    noisy_cfg = sg.DatasetConfig(n_per_class=20, preset="noisy", seed=5)

    def snr_db(cfg):
        ds = sg.generate_dataset(cfg)
        sig = noise = 0.0
        for s in ds.samples:
            ref = sg.frame_energies(s.waveform)
            sig += np.sum(ref ** 2)
            noise += np.sum((s.frames - ref) ** 2)
        return 10 * np.log10(sig / noise)

    margin = 20 * np.log10(sg.PRESETS["noisy"]["noise_level"] / sg.PRESETS["clean"]["noise_level"])
    assert snr_db(clean_cfg) - snr_db(noisy_cfg) == pytest.approx(margin, abs=1.0)


def test_minimal_dataset():
    ds = sg.generate_dataset(sg.DatasetConfig(n_per_class=1, seed=2))
    assert len(ds) == 2
    assert [s.split for s in ds.samples] == \
        [s.split for s in sg.generate_dataset(sg.DatasetConfig(n_per_class=1, seed=2)).samples]


def test_class_f0_gap_and_disjoint_splits():
    ds = sg.generate_dataset(sg.DatasetConfig(n_per_class=300, seed=0))
    train = ds.split("train")
    f0 = {c: np.mean([s.attrs.f0 for s in train if s.y_o == c]) for c in (0, 1)}
    assert f0[1] - f0[0] == pytest.approx(40.0, abs=5.0)
    ids = {split: {s.id for s in ds.split(split)} for split in sg.SPLITS}
    assert not (ids["train"] & ids["val"] or ids["train"] & ids["test"] or ids["val"] & ids["test"])
    assert sum(len(v) for v in ids.values()) == 600
    assert len(ds.split("val")) == len(ds.split("test")) == 60


def test_dataset_seed_changes_content():
    a = sg.generate_dataset(sg.DatasetConfig(n_per_class=3, seed=0))
    b = sg.generate_dataset(sg.DatasetConfig(n_per_class=3, seed=1))
    assert not np.array_equal(a.samples[0].frames, b.samples[0].frames)


@pytest.mark.parametrize("name", ["d.jsonl", "d.jsonl.gz"])
def test_file_round_trip(tmp_path, name):
    ds = sg.generate_dataset(sg.DatasetConfig(n_per_class=4, preset="noisy", seed=9))
    back = sg.read_dataset(sg.write_dataset(ds, tmp_path / name))
    assert back.header == ds.header and back.header["noise_level"] == 0.2
    for a, b in zip(ds.samples, back.samples):
        assert a.frames.tobytes() == b.frames.tobytes()
        assert a.waveform.tobytes() == b.waveform.tobytes()
        assert np.array_equal(a.tokens, b.tokens)
        assert (a.attrs, a.id, a.split) == (b.attrs, b.id, b.split)


def test_read_missing_file_is_oserror(tmp_path):
    with pytest.raises(OSError, match="nope"):
        sg.read_dataset(tmp_path / "nope.jsonl")


def test_summary_counts():
    ds = sg.generate_dataset(sg.DatasetConfig(n_per_class=10, seed=0))
    summary = sg.summarize(ds)
    assert sum(v["count"] for v in summary.values()) == 20
