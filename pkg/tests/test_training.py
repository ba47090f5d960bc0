import numpy as np
import pytest

from tpdm.score import NeuralScore
from tpdm.training import (
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    smoothed,
    train,
    write_loss_csv,
)


def blob_dataset(n=64, size=8, seed=0):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[:size, :size]
    out = []
    for _ in range(n):
        cy, cx = rng.uniform(2, size - 2, 2)
        w = rng.uniform(1.0, 2.5)
        out.append(np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * w**2)))
    return np.stack(out)


def test_zero_iterations_is_noop():
    m = NeuralScore(seed=0, channels=4)
    out, state = train(m, blob_dataset(4), TrainConfig(iterations=0))
    for a, b in zip(m.params, out.params):
        np.testing.assert_array_equal(a, b)
    assert state.losses == []


def test_training_is_deterministic():
    data = blob_dataset(16)
    cfg = TrainConfig(batch_size=4, iterations=5, lr=1e-3, seed=3)
    a, _ = train(NeuralScore(seed=1, channels=4), data, cfg)
    b, _ = train(NeuralScore(seed=1, channels=4), data, cfg)
    for p, q in zip(a.params, b.params):
        assert p.tobytes() == q.tobytes()


def test_resume_continues_trajectory(tmp_path):
    data = blob_dataset(16)
    m0 = NeuralScore(seed=1, channels=4, dtype=np.float32)
    full, full_state = train(m0, data, TrainConfig(batch_size=4, iterations=6, lr=1e-3, seed=3))
    half, st = train(m0, data, TrainConfig(batch_size=4, iterations=3, lr=1e-3, seed=3))
    save_checkpoint(tmp_path / "c.ckpt", half, st)
    m1, st1, header = load_checkpoint(tmp_path / "c.ckpt", np.float32)
    assert st1.iteration == 3 and header["training"]["iteration"] == 3
    rest, st2 = train(m1, data, TrainConfig(batch_size=4, iterations=3, lr=1e-3, seed=3), st1)
    assert st2.iteration == 6
    for p, q in zip(full.params, rest.params):
        np.testing.assert_array_equal(p, q)


def test_checkpoint_roundtrip(tmp_path):
    m = NeuralScore(layers=3, channels=5, seed=2, dtype=np.float32)
    save_checkpoint(tmp_path / "m.ckpt", m, meta={"note": "x"})
    back, state, header = load_checkpoint(tmp_path / "m.ckpt", np.float32)
    assert header["architecture"]["layers"] == 3 and header["training"]["note"] == "x"
    assert state.m is None
    raw = (tmp_path / "m.ckpt").read_bytes()
    assert raw.startswith(b"TPDMCKPT1")
    for p, q in zip(m.params, back.params):
        assert p.tobytes() == q.tobytes()


def test_inconsistent_dataset_rejected():
    with pytest.raises(ValueError):
        train(NeuralScore(channels=4), [np.zeros((8, 8)), np.zeros((8, 6))], TrainConfig(iterations=1))
    with pytest.raises(ValueError):
        train(NeuralScore(channels=4), [], TrainConfig(iterations=1))


def test_loss_csv(tmp_path):
    write_loss_csv(tmp_path / "l.csv", [3.0, 2.5])
    assert (tmp_path / "l.csv").read_text().splitlines() == ["iteration,loss", "1,3.0", "2,2.5"]


def test_blob_training_reduces_loss():
    data = blob_dataset(256)
    m = NeuralScore(seed=0, channels=16, dtype=np.float32)
    _, state = train(m, data, TrainConfig(batch_size=8, iterations=2000, lr=1e-3, seed=0, log_every=0))
    s = smoothed(state.losses, 200)
    assert s[-1] < s[0]
