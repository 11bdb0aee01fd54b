import numpy as np
import pytest
import torch

from moco_priors.models import ModelConfig, build_model, load_checkpoint
from moco_priors.motion import MotionConfig
from moco_priors.priors import PriorMode, SliceLoader, SliceSample, build_samples
from moco_priors.training import (
    TrainConfig,
    TrainHistory,
    TrainingError,
    batches,
    compute_loss,
    dihedral,
    seed_all,
    train,
)
from moco_priors.volume import DatasetManifest, split_subjects


def test_loss_values():
    t = torch.rand(2, 1, 8, 8)
    assert compute_loss(t, t, "l1").item() == 0
    assert compute_loss(t + 0.5, t, "l1").item() == pytest.approx(0.5, abs=1e-6)
    assert compute_loss(t, t, "l2").item() == 0
    assert compute_loss(t.double(), t.double(), "one_minus_ssim").item() == pytest.approx(0, abs=1e-9)


def test_l2_against_direct_sum(rng):
    a, b = rng.random((3, 1, 7, 5)), rng.random((3, 1, 7, 5))
    expected = 0.0
    for v, w in zip(a.ravel(), b.ravel()):
        expected += (v - w) ** 2
    expected /= a.size
    got = compute_loss(torch.from_numpy(a), torch.from_numpy(b), "l2").item()
    assert got == pytest.approx(expected, abs=1e-7)


def test_loss_ranges(rng):
    a = torch.from_numpy(rng.random((2, 1, 16, 16)))
    b = torch.from_numpy(rng.random((2, 1, 16, 16)))
    assert compute_loss(a, b, "l1") > 0 and compute_loss(a, b, "l2") > 0
    assert 0 <= compute_loss(a, b, "one_minus_ssim").item() <= 2
    with pytest.raises(ValueError):
        compute_loss(a, b[:, :, :8], "l1")


def test_train_config_invariants():
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(loss="huber")


def test_seed_all_controls_streams():
    seed_all(0)
    a = torch.rand(3), np.random.rand(3)
    seed_all(0)
    b = torch.rand(3), np.random.rand(3)
    assert torch.equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_first_batch_reproducible():
    samples = [SliceSample(np.full((4, 4), i, np.float32), None, np.zeros((4, 4), np.float32)) for i in range(10)]
    first = lambda seed: next(batches(samples, 3, torch.Generator().manual_seed(seed)))[0]  # noqa: E731
    assert torch.equal(first(0), first(0))
    assert not torch.equal(first(0), first(1))


def _dihedral_group(a):
    out = []
    for t in (a, a.T):
        for r in range(4):
            out.append(np.rot90(t, r))
    return out


def test_dihedral_shared_and_in_group():
    x = torch.arange(2 * 16, dtype=torch.float64).reshape(2, 1, 4, 4)
    p = torch.stack([x[:, 0], 100 + x[:, 0]], 1)
    ax, ap, ay = dihedral((x, p, x.clone()), torch.Generator().manual_seed(3))
    assert torch.equal(ax, ay)
    for i in range(2):
        group = _dihedral_group(x[i, 0].numpy())
        k = [j for j, g in enumerate(group) if np.array_equal(g, ax[i, 0].numpy())]
        assert k
        assert np.array_equal(ap[i, 1].numpy() - 100, ax[i, 0].numpy())
    seen = set()
    gen = torch.Generator().manual_seed(0)
    for _ in range(40):
        out = dihedral((x[:1],), gen)[0]
        seen.add(out.numpy().tobytes())
    assert len(seen) == 8


def test_dihedral_non_square_keeps_shape():
    x = torch.rand(4, 1, 4, 6)
    assert dihedral((x,), torch.Generator().manual_seed(0))[0].shape == x.shape


def _toy_samples(n, size=16, n_prior=0, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        target = rng.random((size, size)).astype(np.float32)
        corrupted = np.clip(target + 0.1 * rng.standard_normal((size, size)), 0, 1)
        priors = rng.random((n_prior, size, size)) if n_prior else None
        out.append(SliceSample(corrupted, priors, target, "T", i))
    return out


def test_one_epoch_history(tmp_path):
    model = build_model(ModelConfig(depth=2, base_features=4))
    ckpt, history = train(model, _toy_samples(4), _toy_samples(2, seed=1), TrainConfig(epochs=1, batch_size=2), tmp_path)
    assert len(history) == 1
    assert (tmp_path / "history.csv").read_text().splitlines()[0] == "epoch,train_loss,val_ssim"
    assert len((tmp_path / "history.csv").read_text().splitlines()) == 2
    assert (tmp_path / "history.timing.csv").exists()
    assert ckpt.exists() and (tmp_path / "best.ckpt").exists()


def test_best_checkpoint_has_max_val(tmp_path):
    model = build_model(ModelConfig(depth=2, base_features=4))
    _, history = train(model, _toy_samples(8), _toy_samples(3, seed=1),
                       TrainConfig(epochs=6, batch_size=4, lr=1e-3, checkpoint_every=3), tmp_path)
    _, meta, _ = load_checkpoint(tmp_path / "best.ckpt")
    assert meta["val_ssim"] == max(history.val_ssim)
    assert (tmp_path / "epoch0003.ckpt").exists() and (tmp_path / "epoch0006.ckpt").exists()


def test_zero_lr_leaves_parameters_unchanged():
    model = build_model(ModelConfig(depth=2, base_features=4))
    before = {k: v.clone() for k, v in model.state_dict().items()}
    train(model, _toy_samples(4), _toy_samples(2), TrainConfig(epochs=1, lr=1e-30, batch_size=4))
    for k, v in model.state_dict().items():
        torch.testing.assert_close(v, before[k], rtol=0, atol=1e-20)


def test_dualbranch_step_updates_aux_branch():
    model = build_model(ModelConfig(depth=2, base_features=4, injection="dualbranch", n_prior=2), seed=1)
    before = [p.clone() for p in model.aux_encoder.parameters()]
    train(model, _toy_samples(4, n_prior=2), _toy_samples(2, n_prior=2), TrainConfig(epochs=1, batch_size=4, lr=1e-3))
    assert any(not torch.equal(a, b) for a, b in zip(before, model.aux_encoder.parameters()))


def test_channel_mismatch_rejected():
    model = build_model(ModelConfig(depth=2, base_features=4, injection="multichannel", n_prior=2))
    with pytest.raises(TrainingError):
        train(model, _toy_samples(4, n_prior=1), _toy_samples(2, n_prior=2), TrainConfig(epochs=1))
    with pytest.raises(TrainingError):
        train(model, [], _toy_samples(2, n_prior=2), TrainConfig(epochs=1))


def test_non_finite_loss_aborts():
    model = build_model(ModelConfig(depth=2, base_features=4))
    bad = _toy_samples(2)
    bad[0].target[0, 0] = np.nan
    with pytest.raises(TrainingError, match="non-finite"):
        train(model, bad, _toy_samples(2), TrainConfig(epochs=1))


def test_same_seed_bit_identical(tmp_path):
    def run(d):
        model = build_model(ModelConfig(depth=2, base_features=4, injection="multichannel", n_prior=1), seed=7)
        train(model, _toy_samples(6, n_prior=1), _toy_samples(2, n_prior=1),
              TrainConfig(epochs=3, batch_size=4, lr=1e-3, seed=7), d)
        return model

    a, b = run(tmp_path / "a"), run(tmp_path / "b")
    for k, v in a.state_dict().items():
        assert v.numpy().tobytes() == b.state_dict()[k].numpy().tobytes()
    assert (tmp_path / "a" / "history.csv").read_bytes() == (tmp_path / "b" / "history.csv").read_bytes()
    assert (tmp_path / "a" / "final.ckpt").read_bytes() == (tmp_path / "b" / "final.ckpt").read_bytes()


def test_resume_appends_history(tmp_path):
    model = build_model(ModelConfig(depth=2, base_features=4))
    cfg = TrainConfig(epochs=2, batch_size=4, lr=1e-3)
    train(model, _toy_samples(4), _toy_samples(2), cfg, tmp_path)
    model, meta, optim = load_checkpoint(tmp_path / "final.ckpt")
    assert meta["epoch"] == 2 and optim is not None
    _, history = train(model, _toy_samples(4), _toy_samples(2), cfg, tmp_path, start_epoch=2, optimizer_state=optim)
    assert history.epochs == [3, 4]
    rows = TrainHistory.read_csv(tmp_path / "history.csv")
    assert rows.epochs == [1, 2, 3, 4]


@pytest.mark.slow
def test_overfit_small_phantom_set(tmp_path):
    from conftest import write_phantom_dataset

    write_phantom_dataset(tmp_path, n_subjects=2, size=(32, 32, 16))
    manifest = split_subjects(DatasetManifest.load(tmp_path / "manifest.json"), (1, 1, 0), seed=0)
    loader = SliceLoader(manifest)
    samples = build_samples(loader, manifest.subjects_in("train"), MotionConfig(), PriorMode(), slice_fraction=0.5)
    assert len(samples) == 8
    model = build_model(ModelConfig(depth=2, base_features=8))
    _, history = train(model, samples, samples[:2], TrainConfig(epochs=200, batch_size=8, lr=1e-3))
    assert history.train_loss[-1] < 0.25 * history.train_loss[0]
