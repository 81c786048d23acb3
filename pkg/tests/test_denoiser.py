import pytest
import torch

from histodiff.denoiser import DenoiserConfig, SemanticUNet, paper_config, timestep_embedding, tiny_config


@pytest.fixture(scope="module")
def tiny_net():
    torch.manual_seed(0)
    return SemanticUNet(tiny_config()).eval()


def test_shape_contract_128():
    torch.manual_seed(0)
    net = SemanticUNet(tiny_config(image_size=128)).eval()
    x = torch.randn(2, 3, 128, 128)
    mask = torch.rand(2, 8, 128, 128)
    t = torch.tensor([10, 500])
    out = net(x, mask, t)
    assert out.eps_hat.shape == (2, 3, 128, 128)
    assert out.v.shape == (2, 3, 128, 128)
    assert (out.v >= 0).all() and (out.v <= 1).all()


def test_resolution_equivariance(tiny_net):
    for size in (32, 64):
        x = torch.randn(1, 3, size, size)
        mask = torch.rand(1, 8, size, size)
        out = tiny_net(x, mask, torch.tensor([5]))
        assert out.eps_hat.shape == (1, 3, size, size)


def test_null_vs_encoded_mask_differ(tiny_net):
    g = torch.Generator().manual_seed(1)
    x = torch.randn(1, 3, 32, 32, generator=g)
    t = torch.tensor([50])
    mask = torch.zeros(1, 8, 32, 32)
    mask[:, 0] = 1.0  # all-background layout
    with torch.no_grad():
        cond = tiny_net(x, mask, t)
        uncond = tiny_net(x, torch.zeros_like(mask), t)
    assert (cond.eps_hat != uncond.eps_hat).any()


def test_conditioning_sensitivity_to_one_nucleus(tiny_net):
    g = torch.Generator().manual_seed(2)
    x = torch.randn(1, 3, 32, 32, generator=g)
    t = torch.tensor([30])
    mask = torch.zeros(1, 8, 32, 32)
    mask[:, 0] = 1.0
    mask[:, 0, 10:16, 10:16] = 0.0
    changed = mask.clone()
    mask[:, 2, 10:16, 10:16] = 1.0  # epithelial nucleus
    changed[:, 3, 10:16, 10:16] = 1.0  # same nucleus relabeled lymphocyte
    with torch.no_grad():
        a = tiny_net(x, mask, t)
        b = tiny_net(x, changed, t)
    region = (a.eps_hat - b.eps_hat)[:, :, 8:18, 8:18]
    assert region.abs().max() > 0


def test_gradients_reach_all_parameters():
    torch.manual_seed(3)
    net = SemanticUNet(tiny_config())
    x = torch.randn(2, 3, 32, 32)
    mask = torch.rand(2, 8, 32, 32)
    out = net(x, mask, torch.tensor([3, 60]))
    # simple + vlb surrogate touch both heads; every tensor must get grad
    loss = (out.eps_hat**2).mean() + (out.v**2).mean()
    loss.backward()
    for name, p in net.named_parameters():
        assert p.grad is not None, name
        assert p.grad.abs().sum() > 0, name


def test_eval_determinism(tiny_net):
    x = torch.randn(1, 3, 32, 32)
    mask = torch.rand(1, 8, 32, 32)
    t = torch.tensor([7])
    with torch.no_grad():
        a = tiny_net(x, mask, t)
        b = tiny_net(x, mask, t)
    assert torch.equal(a.eps_hat, b.eps_hat) and torch.equal(a.v, b.v)


def test_rejects_mismatched_inputs(tiny_net):
    x = torch.randn(1, 3, 32, 32)
    with pytest.raises(ValueError, match="spatial"):
        tiny_net(x, torch.rand(1, 8, 16, 16), torch.tensor([1]))
    with pytest.raises(ValueError, match="channels"):
        tiny_net(x, torch.rand(1, 4, 32, 32), torch.tensor([1]))
    with pytest.raises(ValueError, match="divisible"):
        tiny_net(torch.randn(1, 3, 30, 30), torch.rand(1, 8, 30, 30), torch.tensor([1]))


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        DenoiserConfig(image_size=48, channel_multipliers=(1, 2, 4, 8, 16))
    with pytest.raises(ValueError, match="num_groups"):
        DenoiserConfig(base_width=30, num_groups=32)


def test_presets():
    p = paper_config()
    assert p.image_size == 128 and p.base_width == 128
    assert p.channel_multipliers == (1, 1, 2, 2, 4)
    assert p.attention_resolutions == (32, 16, 8)
    t = tiny_config()
    assert t.image_size == 32 and t.base_width == 32 and t.attention_resolutions == ()


def test_timestep_embedding_shapes_and_range():
    emb = timestep_embedding(torch.tensor([1, 500, 1000]), 128)
    assert emb.shape == (3, 128)
    assert (emb <= 1).all() and (emb >= -1).all()
    odd = timestep_embedding(torch.tensor([4]), 33)
    assert odd.shape == (1, 33)
