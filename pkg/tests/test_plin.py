import numpy as np
import pytest
import torch

from patchdistill.errors import CheckpointError, ConfigError, ContractError, TrainingError
from patchdistill.plin import (
    BackboneSpec,
    OptimizerConfig,
    fit,
    load_checkpoint,
    make_optimizer,
    new_model,
    read_checkpoint_header,
    save_checkpoint,
    score_patches,
    train_step,
    weighted_bce,
)


@pytest.fixture
def spec():
    return BackboneSpec(input_size=32, widths=(8, 16))


@pytest.fixture
def patches():
    return np.random.default_rng(0).integers(0, 256, (8, 32, 32)).astype(np.uint8)


def test_scores_in_open_unit_interval_and_deterministic(spec, patches):
    model = new_model(spec, seed=1)
    a = score_patches(model, patches)
    b = score_patches(model, patches)
    assert a.shape == (8,) and np.all((a > 0) & (a < 1))
    np.testing.assert_array_equal(a, b)


def test_single_vs_batch(spec, patches):
    model = new_model(spec, seed=2)
    fit(model, patches, np.r_[np.ones(4), np.zeros(4)], np.ones(8), OptimizerConfig(epochs=2, batch_size=4))
    batch = score_patches(model, patches)
    single = np.array([score_patches(model, patches[i : i + 1])[0] for i in range(8)])
    np.testing.assert_allclose(single, batch, atol=1e-6, rtol=0)


def test_order_preserved(spec, patches):
    model = new_model(spec, seed=3)
    fwd = score_patches(model, patches)
    rev = score_patches(model, patches[::-1].copy())
    np.testing.assert_allclose(rev[::-1], fwd, atol=1e-6)


def test_wrong_patch_size(spec):
    with pytest.raises(ContractError):
        score_patches(new_model(spec), np.zeros((2, 64, 64), np.uint8))


def test_rgb_patches_on_gray_backbone(spec):
    rgb = np.random.default_rng(0).integers(0, 256, (3, 32, 32, 3)).astype(np.uint8)
    assert score_patches(new_model(spec), rgb).shape == (3,)


def test_zero_learning_rate_keeps_parameters(spec, patches):
    model = new_model(spec, seed=4)
    opt = make_optimizer(model, OptimizerConfig(kind="sgd", lr=0.0))
    before = model.parameter_vector()
    loss = train_step(model, opt, patches, np.ones(8), np.ones(8))
    assert np.isfinite(loss)
    np.testing.assert_array_equal(model.parameter_vector(), before)


def test_overfits_one_batch(spec, patches):
    model = new_model(spec, seed=5)
    opt = make_optimizer(model, OptimizerConfig(lr=3e-3))
    labels = np.array([1, 0, 1, 0, 1, 1, 0, 0])
    losses = [train_step(model, opt, patches, labels, np.ones(8)) for _ in range(50)]
    assert losses[-1] < 0.5 * losses[0]


def test_zero_weights_give_zero_loss_and_gradient(spec, patches):
    model = new_model(spec, seed=6)
    model.net.train()
    from patchdistill.plin import to_tensor

    loss = weighted_bce(model.net(to_tensor(patches, spec)), torch.ones(8), torch.zeros(8))
    loss.backward()
    assert loss.item() == 0.0
    assert all(p.grad is None or torch.count_nonzero(p.grad) == 0 for p in model.net.parameters())


def test_weighted_bce_matches_numpy_pkbce(spec, patches):
    from patchdistill.emipld import pkbce_loss

    model = new_model(spec, seed=7)
    model.net.eval()
    from patchdistill.plin import to_tensor

    logits = model.net(to_tensor(patches, spec)).detach()
    g = torch.softmax(logits.double(), 1)[:, 1].numpy()
    rng = np.random.default_rng(0)
    labels, prev = rng.integers(0, 2, 8), rng.uniform(0.05, 0.95, 8)
    s = 0.4
    torch_loss = weighted_bce(logits, torch.tensor(labels, dtype=torch.float32),
                              torch.tensor(prev / s, dtype=torch.float32)).item()
    assert torch_loss == pytest.approx(pkbce_loss(g, labels, prev, s), rel=1e-5)


def test_nonfinite_loss_raises(spec, patches):
    model = new_model(spec)
    opt = make_optimizer(model, OptimizerConfig())
    with pytest.raises(TrainingError):
        train_step(model, opt, patches, np.ones(8), np.full(8, np.inf))


def test_mismatched_batch(spec, patches):
    model = new_model(spec)
    with pytest.raises(ContractError):
        train_step(model, make_optimizer(model, OptimizerConfig()), patches, np.ones(7), np.ones(8))


class TestCheckpoint:
    def test_round_trip_scores(self, spec, patches, tmp_path):
        model = new_model(spec, seed=8)
        fit(model, patches, np.r_[np.ones(4), np.zeros(4)], np.ones(8), OptimizerConfig(epochs=1, batch_size=4))
        path = save_checkpoint(model, tmp_path / "ckpt_1.bin")
        again = load_checkpoint(path)
        assert np.max(np.abs(score_patches(again, patches) - score_patches(model, patches))) <= 1e-7
        assert again.spec == spec and again.step == model.step

    def test_header(self, spec, tmp_path):
        path = save_checkpoint(new_model(spec), tmp_path / "c.bin", checkpoint_id="c")
        header, _ = read_checkpoint_header(path)
        assert header["format_version"] == 1 and header["backbone"]["input_size"] == 32

    def test_two_saves_agree(self, spec, patches, tmp_path):
        model = new_model(spec, seed=9)
        a = load_checkpoint(save_checkpoint(model, tmp_path / "a.bin"))
        b = load_checkpoint(save_checkpoint(model, tmp_path / "b.bin"))
        np.testing.assert_array_equal(score_patches(a, patches), score_patches(b, patches))

    def test_missing(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "nope.bin")

    def test_truncated(self, spec, tmp_path):
        path = save_checkpoint(new_model(spec), tmp_path / "t.bin")
        path.write_bytes(path.read_bytes()[:-100])
        with pytest.raises(CheckpointError, match="checksum"):
            load_checkpoint(path)

    def test_not_a_checkpoint(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(b"hello world")
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(tmp_path / "x.bin")


def tiny_linear_factory(spec):
    return torch.nn.Sequential(torch.nn.Flatten(), torch.nn.Linear(spec.input_size**2 * spec.in_channels, 2))


def test_external_adapter(patches, tmp_path):
    spec = BackboneSpec(kind="external_adapter", input_size=32, factory=f"{__name__}:tiny_linear_factory")
    model = new_model(spec)
    s = score_patches(model, patches)
    assert s.shape == (8,)
    again = load_checkpoint(save_checkpoint(model, tmp_path / "ext.bin"))
    np.testing.assert_allclose(score_patches(again, patches), s, atol=1e-7)


def test_backbone_spec_validation():
    with pytest.raises(ConfigError):
        BackboneSpec(kind="external_adapter")
    with pytest.raises(ConfigError):
        BackboneSpec(kind="resnet")


def test_builtin_parameter_budget():
    n = sum(p.numel() for p in new_model(BackboneSpec()).net.parameters())
    assert 5e4 <= n <= 2e5
