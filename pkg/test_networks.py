"""
Tests for the network models: identity initialization, shapes, bounds and weight export.
"""
import pytest
import torch

from gadan.models.networks import (
    CompletionGenerator,
    LocalizationNet,
    PatchDiscriminator,
    TransformDiscriminator,
    complete_background,
    discriminate_image,
    discriminate_transform,
    export_weights,
    import_weights,
    init_networks,
    localize,
    translate_appearance,
)
from gadan.schemas.training import TransformKind
from gadan.services.geometry import IMAGE_FILL, build_operator, identity_params
from gadan.utils.errors import CheckpointError, ConfigError, ShapeMismatch


@pytest.mark.parametrize("kind", list(TransformKind))
def test_localization_starts_at_identity(kind, images):
    """A fresh spatial module predicts the identity for any image and code."""
    net = LocalizationNet(kind, in_channels=3, code_dim=4, input_size=32)
    theta = localize(net, images, torch.randn(2, 4)).theta
    expected = identity_params(kind, batch_size=2).theta
    assert torch.equal(theta, expected)


def test_localization_output_is_bounded(images):
    """Saturated FC2 outputs stay within the transform bound."""
    net = LocalizationNet(TransformKind.HOMOGRAPHY, in_channels=3, code_dim=4, input_size=32, bound=0.35)
    with torch.no_grad():
        net.fc2.weight.fill_(50.0)
        net.fc2.bias.fill_(-50.0)
    theta = localize(net, images, torch.randn(2, 4)).theta
    deviation = theta - identity_params(TransformKind.HOMOGRAPHY, batch_size=2).theta
    assert float(deviation.abs().max()) <= 0.35 + 1e-6


def test_localization_depends_on_the_code(images):
    """Once FC2 moves off zero, different codes give different transforms."""
    net = LocalizationNet(TransformKind.HOMOGRAPHY, in_channels=3, code_dim=4, input_size=32)
    gen = torch.Generator().manual_seed(0)
    with torch.no_grad():
        net.fc2.weight.copy_(torch.randn(net.fc2.weight.shape, generator=gen) * 0.05)
    image = images[:1].expand(2, -1, -1, -1)
    codes = torch.randn(2, 4, generator=gen)
    with torch.no_grad():
        theta = localize(net, image, codes).theta
    assert not torch.allclose(theta[0], theta[1])


def test_localization_resizes_input():
    """Inputs of any size are resampled to the localization resolution."""
    net = LocalizationNet(TransformKind.AFFINE, in_channels=1, code_dim=2, input_size=32)
    theta = localize(net, torch.rand(3, 1, 48, 40) * 2 - 1, torch.randn(3, 2)).theta
    assert theta.shape == (3, 6)


def test_localization_checks_code_and_channels(images):
    """Wrong code size or channel count is rejected."""
    net = LocalizationNet(TransformKind.AFFINE, in_channels=3, code_dim=4, input_size=32)
    with pytest.raises(ShapeMismatch):
        localize(net, images, torch.randn(2, 5))
    with pytest.raises(ShapeMismatch):
        localize(net, images[:, :1], torch.randn(2, 4))


def test_patch_discriminator_output_grid():
    """A 64px image gives a 6x6 patch logit map."""
    d = PatchDiscriminator(3, base_channels=8)
    assert discriminate_image(d, torch.zeros(2, 3, 64, 64)).shape == (2, 1, 6, 6)


def test_transform_discriminator_one_logit_per_example():
    """The transform discriminator returns one logit per operator."""
    d = TransformDiscriminator(8)
    op = build_operator(identity_params(TransformKind.HOMOGRAPHY, batch_size=5))
    assert discriminate_transform(d, op).shape == (5,)


def test_transform_discriminator_rejects_wrong_kind():
    """Only homographies are accepted by the transform discriminator."""
    d = TransformDiscriminator(8)
    with pytest.raises(ShapeMismatch):
        discriminate_transform(d, build_operator(identity_params(TransformKind.AFFINE)))


def test_generators_keep_shape_and_range(tiny_config, images):
    """Appearance translation keeps the shape and stays in [-1, 1]."""
    nets = init_networks(tiny_config)
    out = translate_appearance(nets.g_x, images)
    assert out.shape == images.shape
    assert float(out.abs().max()) <= 1.0


def test_translation_has_input_gradient_at_init(tiny_config, images):
    """Gradients reach the input image through a freshly built translator."""
    nets = init_networks(tiny_config)
    image = images.clone().requires_grad_(True)
    translate_appearance(nets.g_x, image).sum().backward()
    assert image.grad is not None
    assert float(image.grad.abs().sum()) > 0


def test_generator_needs_sides_divisible_by_four(tiny_config):
    """Generator inputs must survive two stride-2 stages."""
    nets = init_networks(tiny_config)
    with pytest.raises(ShapeMismatch):
        translate_appearance(nets.g_x, torch.zeros(1, 3, 30, 30))


def test_completion_passes_valid_pixels_through(images):
    """Valid pixels leave background completion unchanged."""
    gen = CompletionGenerator(3, base_channels=4, residual_blocks=1)
    mask = (torch.rand(2, 1, 32, 32) > 0.5).float()
    with torch.no_grad():
        full = gen(images, torch.ones_like(mask))
        partial = gen(images, mask)
    assert torch.equal(full, images)
    assert torch.equal(partial * mask, images * mask)


def test_completion_fills_invalid_half_after_one_step(tiny_config, images):
    """After one update the invalid half holds generated content, the valid half the input."""
    nets = init_networks(tiny_config)
    mask = torch.ones(2, 1, 32, 32)
    mask[..., :16] = 0.0
    holed = images * mask + IMAGE_FILL * (1 - mask)
    optimizer = torch.optim.Adam(nets.g_x.completion.parameters(), lr=1e-2)

    optimizer.zero_grad()
    (complete_background(nets.g_x, holed, mask) - images).abs().mean().backward()
    optimizer.step()

    with torch.no_grad():
        filled = complete_background(nets.g_x, holed, mask)
    assert torch.equal(filled[..., 16:], images[..., 16:])
    assert bool((filled[..., :16] != IMAGE_FILL).any())


def test_complete_background_checks_mask(tiny_config, images):
    """A mask that does not align with the image is rejected."""
    nets = init_networks(tiny_config)
    with pytest.raises(ShapeMismatch):
        complete_background(nets.g_x, images, torch.ones(2, 1, 16, 16))


def test_init_is_reproducible(tiny_config):
    """Same seed, same weights; another seed, other weights."""
    a = init_networks(tiny_config).state_dict()
    b = init_networks(tiny_config).state_dict()
    c = init_networks(tiny_config, seed=7).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert any(not torch.equal(a[k], c[k]) for k in a)


def test_init_does_not_disturb_global_rng(tiny_config):
    """Building networks leaves the global torch RNG where it was."""
    torch.manual_seed(99)
    expected = torch.rand(3)
    torch.manual_seed(99)
    init_networks(tiny_config)
    assert torch.equal(torch.rand(3), expected)


def test_init_rejects_invalid_dimensions(tiny_config):
    """A zero code size is a configuration error."""
    with pytest.raises(ConfigError):
        init_networks(tiny_config.model_copy(update={"code_dim": 0}))


def test_residual_blocks_resolve_automatically(make_config):
    """residual_blocks=0 picks 9 blocks at 256px and 6 below."""
    assert make_config(residual_blocks=0, image_size=256).residual_blocks == 9
    assert make_config(residual_blocks=0, image_size=64).residual_blocks == 6
    assert make_config(residual_blocks=2).residual_blocks == 2


def test_weights_round_trip(tiny_config, images):
    """Exported weights rebuild networks with identical outputs."""
    nets = init_networks(tiny_config, seed=3)
    restored, config = import_weights(export_weights(nets, tiny_config))
    assert config == tiny_config
    with torch.no_grad():
        assert torch.equal(translate_appearance(nets.g_y, images), translate_appearance(restored.g_y, images))


def test_weights_version_checked(tiny_config):
    """An unknown weight format version is refused."""
    payload = export_weights(init_networks(tiny_config), tiny_config)
    payload["format_version"] = 999
    with pytest.raises(CheckpointError):
        import_weights(payload)
