"""
Tests for the cycle wiring, the trainer, checkpoints and adaptation inference.
"""
import json

import pytest
import torch

from gadan.models.networks import LocalizationNet, init_networks
from gadan.schemas.training import CycleDirection, TransformKind
from gadan.services import pipeline
from gadan.services.geometry import (
    TransformParams,
    build_operator,
    identity_params,
    invert_operator,
    operator_vector,
    warp,
)
from gadan.services.losses import cycle_loss
from gadan.services.pipeline import (
    CHECKPOINT_FORMAT_VERSION,
    GADANTrainer,
    ReplayBuffer,
    adapt,
    adapt_multi,
    checkpoint_path,
    load_checkpoint,
    random_transform_params,
    run_cycle,
    save_checkpoint,
    seeded_codes,
    train,
)
from gadan.utils.errors import (
    CheckpointError,
    ConfigError,
    KindMismatch,
    NonFiniteLoss,
    ShapeMismatch,
    SingularTransform,
)


def _perturb(net, seed=0, scale=0.05):
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        net.fc2.weight.copy_(torch.randn(net.fc2.weight.shape, generator=gen) * scale)


def _state_equal(a, b):
    return all(torch.equal(a[k], b[k]) for k in a) and a.keys() == b.keys()


# ============================================================
# Cycle wiring
# ============================================================

@pytest.mark.parametrize("kind", list(TransformKind))
def test_cycle_at_init_is_identity(kind, make_config, images):
    """Fresh networks predict identities and keep every mask at one."""
    config = make_config(transform_kind=kind)
    nets = init_networks(config)
    with torch.no_grad():
        bundle = run_cycle(nets, images, torch.randn(2, 4))
    identity = identity_params(kind, batch_size=2).theta
    assert torch.equal(operator_vector(bundle.H_XY), identity)
    assert torch.equal(operator_vector(bundle.H_SY), identity)
    assert torch.equal(bundle.m, torch.ones_like(bundle.m))
    assert torch.equal(bundle.m_roundtrip, bundle.m)


@pytest.mark.parametrize("kind", list(TransformKind))
def test_cycle_at_init_is_identity_at_non_power_of_two_size(kind, make_config):
    """The identity cascade stays exact on 100 x 100 float32 images."""
    config = make_config(transform_kind=kind, image_size=100)
    nets = init_networks(config)
    x = torch.rand(2, 3, 100, 100, generator=torch.Generator().manual_seed(0)) * 2 - 1
    with torch.no_grad():
        bundle = run_cycle(nets, x, torch.randn(2, 4))
    assert float((bundle.transformed - x).abs().max()) <= 1e-6
    assert torch.equal(bundle.m, torch.ones_like(bundle.m))
    assert torch.equal(bundle.m_roundtrip, bundle.m)


def test_cycle_keeps_code_and_inverts_forward_transform(tiny_config, images):
    """The bundle carries the input code and the exact inverse of H_XY."""
    nets = init_networks(tiny_config)
    _perturb(nets.ln_x)
    code = torch.randn(2, 4)
    with torch.no_grad():
        bundle = run_cycle(nets, images, code)
    assert bundle.code is code
    assert torch.equal(bundle.H_XY_inv.matrix, invert_operator(bundle.H_XY).matrix)
    assert bundle.adapted.shape == images.shape


def test_both_spatial_modules_see_the_same_code(tiny_config, images, monkeypatch):
    """S_X and S_Y are called with the very code tensor passed to the cycle."""
    real_localize = pipeline.localize
    seen = []

    def recording_localize(net, image, code):
        seen.append(code)
        return real_localize(net, image, code)

    monkeypatch.setattr(pipeline, "localize", recording_localize)
    nets = init_networks(tiny_config)
    code = torch.randn(2, 4)
    with torch.no_grad():
        bundle = run_cycle(nets, images, code)
    assert len(seen) == 2
    assert all(c is code for c in seen)
    assert bundle.code is code


def test_cycle_rejects_spatial_modules_with_different_code_sizes(tiny_config, images):
    """A backward spatial module expecting another code size fails before any work."""
    nets = init_networks(tiny_config)
    nets.ln_y = LocalizationNet(TransformKind.HOMOGRAPHY, in_channels=3, code_dim=5, input_size=32)
    with pytest.raises(ShapeMismatch):
        run_cycle(nets, images, torch.randn(2, 4))


def test_direction_swaps_spatial_modules(tiny_config, images):
    """Y2X runs S_Y forward, so only X2Y sees the perturbed S_X."""
    nets = init_networks(tiny_config)
    _perturb(nets.ln_x)
    code = torch.randn(2, 4)
    identity = identity_params(TransformKind.HOMOGRAPHY, batch_size=2).theta
    with torch.no_grad():
        forward = run_cycle(nets, images, code, CycleDirection.X2Y)
        backward = run_cycle(nets, images, code, CycleDirection.Y2X)
    assert not torch.equal(operator_vector(forward.H_XY), identity)
    assert torch.equal(operator_vector(backward.H_XY), identity)


def test_cycle_loss_totals(tiny_config, images):
    """Weighted totals match their terms, with and without the spatial term."""
    nets = init_networks(tiny_config)
    _perturb(nets.ln_x)
    with torch.no_grad():
        bundle = run_cycle(nets, images, torch.randn(2, 4))
    w = tiny_config.loss_weights
    terms = cycle_loss(bundle, w)
    expected = w.lambda_acl * terms.acl + w.lambda_scl * terms.scl + w.lambda_rml * terms.rml
    assert float(terms.total) == pytest.approx(float(expected), rel=1e-6)

    entangled = cycle_loss(bundle, w, disentangled=False)
    expected = w.lambda_acl * entangled.acl + w.lambda_rml * entangled.rml
    assert float(entangled.total) == pytest.approx(float(expected), rel=1e-6)
    assert float(entangled.scl) == pytest.approx(float(terms.scl))


# ============================================================
# Trainer
# ============================================================

def test_first_step_reports_both_directions(tiny_config, images):
    """The first step reports both directions with zero spatial and region terms."""
    trainer = GADANTrainer(tiny_config)
    reports = trainer.train_step(images, images.flip(0), 0)
    assert set(reports) == {CycleDirection.X2Y, CycleDirection.Y2X}
    for report in reports.values():
        assert report.scl == pytest.approx(0.0, abs=1e-6)
        assert report.rml == pytest.approx(0.0, abs=1e-6)
        assert report.acl > 0
        assert report.adv_d > 0


def test_training_steps_are_deterministic(tiny_config, images):
    """Two trainers fed the same batches stay identical."""
    a, b = GADANTrainer(tiny_config), GADANTrainer(tiny_config)
    for step in range(2):
        assert a.train_step(images, images.flip(0), step) == b.train_step(images, images.flip(0), step)
    assert _state_equal(a.nets.state_dict(), b.nets.state_dict())


def test_nan_batch_raises_non_finite_loss(tiny_config, images):
    """A NaN pixel is reported by batch name before any update."""
    bad = images.clone()
    bad[0, 0, 0, 0] = float("nan")
    with pytest.raises(NonFiniteLoss) as info:
        GADANTrainer(tiny_config).train_step(bad, images, 0)
    assert info.value.name == "batch_x"


def test_all_singular_batch_skips_the_update(tiny_config, images, monkeypatch):
    """A batch that is singular everywhere leaves the weights untouched."""
    def always_singular(nets, x, code, direction=CycleDirection.X2Y):
        raise SingularTransform("Singular homography", range(x.shape[0]))

    trainer = GADANTrainer(tiny_config)
    before = {k: v.clone() for k, v in trainer.nets.state_dict().items()}
    monkeypatch.setattr(pipeline, "run_cycle", always_singular)
    assert trainer.train_step(images, images, 0) == {}
    assert _state_equal(before, trainer.nets.state_dict())


def test_singular_rows_are_dropped(tiny_config, images, monkeypatch):
    """Singular rows are dropped and the cycle reruns on the rest."""
    real_run_cycle = pipeline.run_cycle
    seen = []

    def first_row_singular(nets, x, code, direction=CycleDirection.X2Y):
        seen.append(x.shape[0])
        if x.shape[0] == 2:
            raise SingularTransform("Singular homography", [0])
        return real_run_cycle(nets, x, code, direction)

    monkeypatch.setattr(pipeline, "run_cycle", first_row_singular)
    reports = GADANTrainer(tiny_config).train_step(images, images, 0)
    assert set(reports) == {CycleDirection.X2Y, CycleDirection.Y2X}
    assert seen == [2, 1, 2, 1]


def test_replay_buffer():
    """The image pool passes through when disabled and caps its size otherwise."""
    gen = torch.Generator().manual_seed(0)
    images = torch.rand(3, 1, 4, 4)
    assert torch.equal(ReplayBuffer(0).push_and_pop(images, gen), images)

    pool = ReplayBuffer(2)
    out = pool.push_and_pop(images, gen)
    assert out.shape == images.shape
    assert len(pool.data) == 2
    for _ in range(5):
        pool.push_and_pop(torch.rand(3, 1, 4, 4), gen)
    assert len(pool.state()) == 2


# ============================================================
# Training runs and checkpoints
# ============================================================

def test_zero_steps_saves_initial_weights(make_config):
    """A zero-step run saves the freshly initialized networks."""
    config = make_config(steps=0)
    final = train(config)
    assert final.step == 0
    assert checkpoint_path(config.checkpoint_dir, 0).is_file()
    init = init_networks(config)
    for name, module in init.named_children():
        assert _state_equal(module.state_dict(), final.weights["networks"][name])


def test_checkpoint_cadence_includes_final_step(make_config):
    """Checkpoints land on the cadence and on the last step."""
    config = make_config(steps=3, checkpoint_every=2)
    train(config)
    saved = sorted(p.name for p in config.checkpoint_dir.glob("*.pt"))
    assert saved == [checkpoint_path(config.checkpoint_dir, s).name for s in (2, 3)]


def test_metrics_log_has_header_and_records(tiny_config):
    """The metrics log starts with the config and has one record per direction per step."""
    from gadan.config import get_settings

    train(tiny_config)
    lines = (tiny_config.checkpoint_dir / get_settings().METRICS_FILENAME).read_text().splitlines()
    header, records = json.loads(lines[0]), [json.loads(line) for line in lines[1:]]
    assert header["header"] == "config"
    assert header["resumed_from"] is None
    assert header["config"]["transform_kind"] == "homography"
    assert [(r["step"], r["direction"]) for r in records] == [
        (0, "X2Y"), (0, "Y2X"), (1, "X2Y"), (1, "Y2X"),
    ]


def test_resume_matches_uninterrupted_run(make_config, tmp_path):
    """Stopping and resuming reproduces an uninterrupted run."""
    straight = train(make_config(steps=2, checkpoint_dir=tmp_path / "straight"))

    first_half = make_config(steps=1, checkpoint_dir=tmp_path / "split")
    train(first_half)
    resumed = train(
        make_config(steps=2, checkpoint_dir=tmp_path / "split"),
        resume=checkpoint_path(first_half.checkpoint_dir, 1),
    )

    assert resumed.step == straight.step == 2
    for name, state in straight.weights["networks"].items():
        assert _state_equal(state, resumed.weights["networks"][name])
    assert resumed.cursors == straight.cursors


def test_resume_rejects_different_network(make_config, tmp_path):
    """Resuming with another network definition is refused."""
    config = make_config(steps=1)
    train(config)
    with pytest.raises(CheckpointError):
        train(make_config(steps=2, code_dim=8), resume=checkpoint_path(config.checkpoint_dir, 1))


def test_checkpoint_file_round_trip_is_bitwise(tiny_config, tmp_path):
    """Saving a loaded checkpoint reproduces the file byte for byte."""
    ckpt = GADANTrainer(tiny_config).checkpoint()
    first = save_checkpoint(ckpt, tmp_path / "a" / "state.pt")
    second = save_checkpoint(load_checkpoint(first), tmp_path / "b" / "state.pt")
    assert first.read_bytes() == second.read_bytes()


def test_checkpoint_version_checked(tiny_config, tmp_path):
    """An unknown checkpoint format version is refused."""
    payload = GADANTrainer(tiny_config).checkpoint().to_payload()
    payload["format_version"] = CHECKPOINT_FORMAT_VERSION + 1
    torch.save(payload, tmp_path / "old.pt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "old.pt")


# ============================================================
# Adaptation
# ============================================================

def test_geometry_only_at_init_returns_input(tiny_config, images):
    """Geometry-only adaptation with fresh networks returns the input."""
    nets = init_networks(tiny_config)
    out = adapt(nets, images, torch.randn(1, 4), geometry_only=True)
    assert float((out - images).abs().max()) <= 1e-6


def test_adapt_is_deterministic_and_bounded(tiny_config, images):
    """Checkpoint and live networks adapt identically, within [-1, 1]."""
    trainer = GADANTrainer(tiny_config)
    ckpt = trainer.checkpoint()
    code = seeded_codes(2, 4, seed=5)
    a = adapt(ckpt, images, code)
    b = adapt(trainer.nets, images, code)
    assert a.shape == images.shape
    assert torch.equal(a, b)
    assert float(a.abs().max()) <= 1.0


def test_adapt_multi_views(tiny_config, images):
    """Views differ from one another and repeat under the same seed."""
    nets = init_networks(tiny_config)
    _perturb(nets.ln_x, scale=0.5)
    views = adapt_multi(nets, images[:1], n=3, seed=2, geometry_only=True)
    assert len(views) == 3
    assert not torch.equal(views[0], views[1])

    again = adapt_multi(nets, images[:1], n=3, seed=2, geometry_only=True)
    assert all(torch.equal(u, v) for u, v in zip(views, again))

    single = adapt_multi(nets, images[:1], n=1, seed=2)
    assert torch.equal(single[0], adapt(nets, images[:1], seeded_codes(1, 4, seed=2)))


def test_adapt_multi_needs_a_view(tiny_config, images):
    """Zero views is a configuration error."""
    with pytest.raises(ConfigError):
        adapt_multi(init_networks(tiny_config), images, n=0)


# ============================================================
# Random-transform baseline
# ============================================================

def test_random_transform_params_are_seeded_and_bounded(tiny_config):
    """Random baseline parameters repeat per seed and stay within the bound."""
    ln = init_networks(tiny_config).ln_x
    a = random_transform_params(ln, 5, seed=3)
    b = random_transform_params(ln, 5, seed=3)
    c = random_transform_params(ln, 5, seed=4)
    assert a.kind is TransformKind.HOMOGRAPHY
    assert torch.equal(a.theta, b.theta)
    assert not torch.equal(a.theta, c.theta)
    deviation = a.theta - identity_params(TransformKind.HOMOGRAPHY, batch_size=5).theta
    assert float(deviation.abs().max()) <= tiny_config.transform_bound


def test_adapt_with_random_transform_replaces_the_spatial_module(tiny_config, images):
    """A supplied transform is warped with instead of the learned identity."""
    nets = init_networks(tiny_config)
    params = random_transform_params(nets.ln_x, 1, seed=0)
    out = adapt(nets, images, torch.randn(1, 4), geometry_only=True, transform=params)
    expected, _ = warp(images, build_operator(TransformParams(params.kind, params.theta.expand(2, -1))))
    assert torch.equal(out, expected)
    assert not torch.allclose(out, adapt(nets, images, torch.randn(1, 4), geometry_only=True))


def test_adapt_rejects_transform_of_another_kind(tiny_config, images):
    """Affine parameters cannot drive a homography model."""
    with pytest.raises(KindMismatch):
        adapt(init_networks(tiny_config), images, torch.randn(1, 4), transform=identity_params(TransformKind.AFFINE))


def test_adapt_multi_random_views(tiny_config, images):
    """Random views use one seeded row each and repeat under the same seed."""
    nets = init_networks(tiny_config)
    views = adapt_multi(nets, images[:1], n=3, seed=1, geometry_only=True, random_transform=True)
    again = adapt_multi(nets, images[:1], n=3, seed=1, geometry_only=True, random_transform=True)
    assert all(torch.equal(u, v) for u, v in zip(views, again))
    assert not torch.equal(views[0], views[1])

    params = random_transform_params(nets.ln_x, 3, seed=1)
    second = TransformParams(params.kind, params.theta[1:2])
    assert torch.equal(views[1], adapt(nets, images[:1], torch.randn(1, 4), geometry_only=True, transform=second))
