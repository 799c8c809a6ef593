import hashlib

import numpy as np
import pytest
from scipy.special import expit

from deepcue import synthgen as sg
from deepcue.audio import DspConfig, mel_center_frequencies, melspectrogram, read_wav
from deepcue.errors import ConfigError
from deepcue.evaluation import eval_recommendation, matrix_system
from deepcue.interactions import BinaryInteractions, binarize, load_tags, load_triplets, split_items

SMALL = sg.SynthConfig(num_users=30, num_items=20, rank=4, density=0.2, clip_seconds=1.0, num_tags=3)


def digests(root):
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(root.rglob("*")) if p.is_file()}


def test_fixed_seed_is_byte_identical(tmp_path):
    sg.generate(SMALL, tmp_path / "a")
    sg.generate(SMALL, tmp_path / "b")
    a, b = digests(tmp_path / "a"), digests(tmp_path / "b")
    assert a == b
    assert {"triplets.tsv", "tags.tsv", "ground_truth.json"} <= set(a)
    assert sum(k.startswith("audio/") for k in a) == 20
    sg.generate(sg.SynthConfig(**{**SMALL.as_dict(), "seed": 1}), tmp_path / "c")
    assert digests(tmp_path / "c") != a


def test_files_parse_with_ingestion(tmp_path):
    data = sg.generate(SMALL, tmp_path)
    s = load_triplets(tmp_path / "triplets.tsv")
    assert len(s) == int(data.positives.sum())
    assert s.counts.min() >= 1
    b = binarize(s)
    assert b.nnz == int(data.positives.sum())
    tags = load_tags(tmp_path / "tags.tsv", n_tags=50)
    assert tags.num_tags == 3
    pcm = read_wav(tmp_path / "audio" / "song0000.wav")
    assert len(pcm) == 22050
    truth = sg.load_ground_truth(tmp_path / "ground_truth.json")
    np.testing.assert_array_equal(truth["v_star"], data.V)


def test_density_on_defaults():
    data = sg.sample(sg.SynthConfig())
    assert abs(data.positives.mean() - 0.05) <= 0.2 * 0.05
    assert data.positives.any(axis=1).all() and data.positives.any(axis=0).all()
    assert data.counts[data.positives].min() >= 1 and not data.counts[~data.positives].any()


def test_calibrated_tau_hits_expected_density():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(50, 40))
    tau = sg.calibrate_tau(logits, 0.1)
    assert abs(expit(logits - tau).mean() - 0.1) < 1e-10


def test_ground_truth_oracle_on_held_out_items():
    data = sg.sample(sg.SynthConfig())
    split = split_items(np.arange(300), seed=0)
    b = BinaryInteractions.from_dense(data.positives)
    r = eval_recommendation(matrix_system(data.U, data.V), b, split.test)
    assert r.mean_auc >= 0.95


def test_mel_means_linearly_recover_item_factors():
    cfg = sg.SynthConfig(num_users=50)
    data = sg.sample(cfg)
    rng = sg.substream(cfg.seed, "audio")
    means = np.stack([melspectrogram(sg.item_audio(data.V[i], data.frequencies, cfg, rng)).values.mean(axis=1)
                      for i in range(cfg.num_items)])
    centers = mel_center_frequencies(DspConfig())
    bins = [int(np.argmin(np.abs(centers - f))) for f in data.frequencies]
    X = np.c_[means[:, bins], np.ones(cfg.num_items)]
    for d in range(cfg.rank):
        y = data.V[:, d]
        resid = y - X @ np.linalg.lstsq(X, y, rcond=None)[0]
        assert 1 - resid.var() / y.var() >= 0.9


def test_frequencies_distinct_and_in_range():
    f = sg.sine_frequencies(8)
    assert len(set(f.tolist())) == 8
    assert f.min() >= 200 and f.max() <= 8000
    with pytest.raises(ConfigError):
        sg.sine_frequencies(500)


def test_invalid_configs(tmp_path):
    with pytest.raises(ConfigError):
        sg.SynthConfig(density=1.0)
    with pytest.raises(ConfigError):
        sg.SynthConfig(num_items=0)
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(ConfigError):
        sg.generate(SMALL, blocker / "out")
