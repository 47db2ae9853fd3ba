import math

import pytest
import torch

from semiseg.distill import SoftMap, kd_loss, temp_softmax


def test_temperature_one_is_softmax():
    z = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    assert torch.allclose(temp_softmax(z, 1.0).probs, z.softmax(1), atol=1e-12)


def test_high_temperature_flattens():
    z = torch.tensor([1.5, -1.5], dtype=torch.float64).view(1, 2, 1, 1)
    p = temp_softmax(z, 1000.0).probs.view(-1)
    assert torch.allclose(p, torch.full((2,), 0.5, dtype=torch.float64), atol=1e-3)


def test_temperature_two_example():
    z = torch.tensor([2.0, 0.0], dtype=torch.float64).view(1, 2, 1, 1)
    p = temp_softmax(z, 2.0).probs.view(-1).tolist()
    assert p[0] == pytest.approx(0.7310585786300049, abs=1e-12)
    assert p[1] == pytest.approx(0.2689414213699951, abs=1e-12)


def test_nonpositive_temperature_rejected():
    with pytest.raises(ValueError):
        temp_softmax(torch.zeros(1, 2, 1, 1), 0.0)


def test_kd_zero_for_identical_maps():
    z = torch.randn(2, 2, 4, 4, dtype=torch.float64)
    s = temp_softmax(z, 2.0)
    assert kd_loss(s, s, s).item() == pytest.approx(0.0, abs=1e-12)


def test_kd_nonnegative_on_random_triples():
    g = torch.Generator().manual_seed(0)
    for _ in range(1000):
        a, b, s = (temp_softmax(torch.randn(1, 3, 2, 2, generator=g) * 3, 2.0) for _ in range(3))
        assert kd_loss(a, b, s).item() >= -1e-6


def _pix(p, t=1.0):
    return SoftMap(torch.tensor(p, dtype=torch.float64).log().view(1, -1, 1, 1), t)


def test_kd_one_pixel_value():
    # KL(0.8,0.2 || 0.6,0.4) counted once per student
    s = _pix([0.8, 0.2])
    a = _pix([0.6, 0.4])
    kl = 0.8 * math.log(0.8 / 0.6) + 0.2 * math.log(0.2 / 0.4)
    assert kl == pytest.approx(0.09151622184943578, abs=1e-15)
    val = kd_loss(a, a, s, scale_t2=False).item()
    assert val == pytest.approx(0.18303244369887156, abs=1e-12)


def test_kd_t_squared_scaling():
    s, a = _pix([0.8, 0.2], 2.0), _pix([0.6, 0.4], 2.0)
    assert kd_loss(a, a, s).item() == pytest.approx(4 * 0.18303244369887156, abs=1e-12)


def test_kd_student_direction():
    s, a = _pix([0.8, 0.2]), _pix([0.6, 0.4])
    kl = 0.6 * math.log(0.6 / 0.8) + 0.4 * math.log(0.4 / 0.2)
    assert kd_loss(a, a, s, direction="student", scale_t2=False).item() == pytest.approx(2 * kl)
    with pytest.raises(ValueError):
        kd_loss(a, a, s, direction="both")


def test_kd_temperature_mismatch_rejected():
    z = torch.randn(1, 2, 2, 2)
    with pytest.raises(ValueError, match="temperature"):
        kd_loss(temp_softmax(z, 2.0), temp_softmax(z, 2.0), temp_softmax(z, 1.0))


def test_kd_sends_no_gradient_to_teacher():
    zs = torch.randn(1, 2, 4, 4, requires_grad=True)
    za = torch.randn(1, 2, 4, 4, requires_grad=True)
    zb = torch.randn(1, 2, 4, 4, requires_grad=True)
    kd_loss(temp_softmax(za, 2.0), temp_softmax(zb, 2.0), temp_softmax(zs, 2.0)).backward()
    assert zs.grad is None or zs.grad.abs().sum() == 0
    assert za.grad.abs().sum() > 0 and zb.grad.abs().sum() > 0


def test_kd_invariant_to_spatial_permutation():
    g = torch.Generator().manual_seed(4)
    za, zb, zs = (torch.randn(2, 3, 4, 4, generator=g, dtype=torch.float64) for _ in range(3))
    perm = torch.randperm(16, generator=g)
    shuf = lambda z: z.flatten(2)[..., perm].view_as(z)  # noqa: E731
    base = kd_loss(*(temp_softmax(z, 2.0) for z in (za, zb, zs)))
    moved = kd_loss(*(temp_softmax(shuf(z), 2.0) for z in (za, zb, zs)))
    assert moved.item() == pytest.approx(base.item(), abs=1e-12)
