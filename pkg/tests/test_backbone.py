# test_backbone.py
import pytest
import torch

from app.core.backbone import ImageAdapter, UNet3D, image_adapter_forward, load_backbone_weights, rep, unet_forward
from app.core.errors import CheckpointError, ConfigError, ShapeMismatchError


def test_unet_output_shapes():
    net = UNet3D(in_channels=2, base_channels=4, depth=3)
    bottleneck, features = unet_forward(net, torch.randn(2, 2, 16, 16, 16))
    assert bottleneck.shape == (2, 16, 4, 4, 4)
    assert features.shape == (2, 4, 16, 16, 16)
    assert net.bottleneck_channels == 16
    assert net.decoder_channels == 4


def test_unet_rejects_bad_inputs():
    net = UNet3D(in_channels=1, base_channels=2, depth=3)
    with pytest.raises(ShapeMismatchError):
        net(torch.randn(1, 1, 16, 16, 18))
    with pytest.raises(ShapeMismatchError):
        net(torch.randn(1, 2, 16, 16, 16))
    with pytest.raises(ConfigError):
        UNet3D(depth=0)
    with pytest.raises(ConfigError):
        UNet3D(norm='group')


def test_decoder_features_follow_input_shifts():
    """Away from the borders, shifting the input shifts the features"""
    net = UNet3D(in_channels=1, base_channels=2, depth=2, norm='none').eval()
    volume = torch.randn(1, 1, 48, 16, 16)
    with torch.no_grad():
        _, a = net(volume[:, :, 0:40])
        _, b = net(volume[:, :, 2:42])
    margin = 14
    assert torch.allclose(a[:, :, 2 + margin:40 - margin], b[:, :, margin:38 - margin], atol=1e-5)


def test_unet_gradients_match_finite_differences():
    net = UNet3D(in_channels=1, base_channels=2, depth=2, norm='none').double()
    x = torch.randn(1, 1, 4, 4, 4, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda v: net(v)[1], (x,), eps=1e-6, atol=1e-5, rtol=1e-3)


def test_image_adapter_pools_then_projects():
    adapter = ImageAdapter(in_channels=8, dim=12)
    out = image_adapter_forward(adapter, torch.randn(3, 8, 2, 2, 2))
    assert out.shape == (3, 12)

    constant = torch.ones(1, 8, 4, 4, 4)
    assert torch.allclose(adapter.pool(constant), torch.ones(1, 8))

    linear = ImageAdapter(in_channels=8, dim=12, hidden=False)
    assert isinstance(linear.mlp, torch.nn.Linear)
    with pytest.raises(ShapeMismatchError):
        adapter(torch.randn(1, 4, 2, 2, 2))


def test_image_adapter_gradients_match_finite_differences():
    adapter = ImageAdapter(in_channels=4, dim=6).double()
    x = torch.randn(2, 4, 2, 2, 2, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(adapter, (x,), eps=1e-6, atol=1e-5, rtol=1e-3)


def test_rep_duplicates_along_the_class_axis():
    h = torch.randn(2, 5)
    out = rep(h, 3)
    assert out.shape == (2, 3, 5)
    for k in range(3):
        assert torch.equal(out[:, k], h)
    with pytest.raises(ShapeMismatchError):
        rep(h, 0)
    with pytest.raises(ShapeMismatchError):
        rep(torch.randn(2, 3, 5), 2)


def test_backbone_weights_load_from_a_checkpoint(tmp_path):
    source = UNet3D(in_channels=1, base_channels=2, depth=2)
    path = str(tmp_path / 'ckpt.pt')
    torch.save({'model_state': {f"backbone.{k}": v for k, v in source.state_dict().items()}}, path)

    target = UNet3D(in_channels=1, base_channels=2, depth=2)
    load_backbone_weights(target, path)
    for name, tensor in source.state_dict().items():
        assert torch.equal(target.state_dict()[name], tensor)

    with pytest.raises(CheckpointError):
        load_backbone_weights(target, str(tmp_path / 'missing.pt'))
