import pytest
import torch

from semiseg.subnets import ResVNet2d, UNet2d, build_subnet, count_params

from oracles import fd_gradient_check


@pytest.mark.parametrize("variant", ["A", "B"])
def test_forward_shapes(variant):
    net = build_subnet(variant, in_channels=1, num_classes=2, depth=4, base_width=4)
    logits, probs = net(torch.rand(2, 1, 64, 64))
    assert logits.shape == probs.shape == (2, 2, 64, 64)
    assert torch.allclose(probs.sum(1), torch.ones(2, 64, 64), atol=1e-5)


@pytest.mark.parametrize("variant", ["A", "B"])
def test_forward_deterministic_in_eval(variant):
    net = build_subnet(variant, depth=3, base_width=4).eval()
    x = torch.rand(1, 1, 32, 32)
    assert torch.equal(net(x)[0], net(x)[0])


def test_variants_differ_structurally():
    a = UNet2d(depth=4, base_width=8)
    b = ResVNet2d(depth=4, base_width=8)
    assert count_params(a) != count_params(b)
    assert a.variant == "A" and b.variant == "B"


def test_same_seed_same_weights():
    torch.manual_seed(7)
    a = UNet2d(base_width=4)
    torch.manual_seed(7)
    b = UNet2d(base_width=4)
    assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))


@pytest.mark.parametrize("variant", ["A", "B"])
def test_rejects_indivisible_input(variant):
    net = build_subnet(variant, depth=4, base_width=4)
    with pytest.raises(ValueError, match="not divisible by 16"):
        net(torch.rand(1, 1, 40, 40))


def test_unknown_variant():
    with pytest.raises(ValueError):
        build_subnet("C")


@pytest.mark.parametrize("variant", ["A", "B"])
def test_gradient_matches_finite_differences(variant):
    torch.manual_seed(0)
    net = build_subnet(variant, depth=2, base_width=2).double().eval()
    x = torch.rand(1, 1, 16, 16, dtype=torch.float64)
    res = fd_gradient_check(lambda: net(x)[1][0, 1, 5, 7], list(net.parameters()), n_entries=15)
    assert all(ok for *_, ok in res), res
