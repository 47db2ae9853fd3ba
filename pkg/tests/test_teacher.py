import math

import pytest
import torch

from semiseg.data import one_hot
from semiseg.teacher import (Adapter, PromptDecoder, PromptMaskDecoder, StandInEncoder, Teacher,
                             sam_loss)

from oracles import fd_gradient_check


def small_teacher(**kw):
    kw = {"dim": 16, "num_prompts": 4, **kw}
    return Teacher(in_channels=1, num_classes=2, **kw)


def test_encoder_shape():
    z = StandInEncoder(1, 64)(torch.rand(1, 1, 64, 64))
    assert z.shape == (1, 64, 16, 16)


def test_fresh_adapter_is_identity():
    ad = Adapter(8)
    x = torch.randn(3, 5, 8)
    assert torch.equal(ad(x), x)


def test_encoder_frozen_seed_is_reproducible():
    a, b = StandInEncoder(1, 16, frozen_seed=3), StandInEncoder(1, 16, frozen_seed=3)
    pairs = zip(a.named_parameters(), b.named_parameters())
    assert all(torch.equal(p, q) for (n, p), (_, q) in pairs if not n.startswith("adapters."))


def test_only_adapters_trainable_in_encoder():
    enc = StandInEncoder(1, 16)
    for name, p in enc.named_parameters():
        assert p.requires_grad == name.startswith("adapters."), name


def test_frozen_weights_untouched_and_adapters_move():
    tp = small_teacher()
    frozen = {n: p.clone() for n, p in tp.named_parameters() if not p.requires_grad}
    opt = torch.optim.Adam(tp.trainable_parameters(), lr=1e-2)
    x = torch.rand(2, 1, 32, 32)
    y = torch.randint(0, 2, (2, 32, 32))
    for _ in range(3):
        opt.zero_grad()
        loss = sam_loss(tp(x)[1], y)
        loss.backward()
        grads = [p.grad for n, p in tp.named_parameters() if "encoder.adapters" in n and p.grad is not None]
        assert sum(float(g.abs().sum()) for g in grads) > 0
        opt.step()
    for n, p in tp.named_parameters():
        if n in frozen:
            assert torch.equal(p, frozen[n]), n
            assert p.grad is None


def test_prompt_shape():
    pd = PromptDecoder(64, 4)
    assert pd(torch.rand(2, 64, 16, 16)).shape == (2, 4, 64)


def test_zero_embedding_with_zero_bias_gives_zero_prompts():
    pd = PromptDecoder(16, 4)
    for m in pd.modules():
        if hasattr(m, "bias") and m.bias is not None:
            torch.nn.init.zeros_(m.bias)
    assert pd(torch.zeros(1, 16, 4, 4)).abs().sum() == 0


def test_prompt_decoder_gradient():
    torch.manual_seed(0)
    pd = PromptDecoder(4, 2).double()
    z = torch.rand(1, 4, 4, 4, dtype=torch.float64)
    res = fd_gradient_check(lambda: pd(z).pow(2).sum(), list(pd.parameters()), n_entries=20)
    assert all(ok for *_, ok in res), res


def test_decode_shape():
    tp = small_teacher()
    logits, probs = tp(torch.rand(2, 1, 32, 32), torch.full((2, 2, 32, 32), 0.5))
    assert logits.shape == probs.shape == (2, 2, 32, 32)
    assert torch.allclose(probs.sum(1), torch.ones(2, 32, 32), atol=1e-5)


def test_decode_invariant_to_prompt_order():
    tp = small_teacher().double().eval()
    z = torch.rand(1, 16, 8, 8, dtype=torch.float64)
    prompts = torch.randn(1, 4, 16, dtype=torch.float64)
    a = tp.decode(z, prompts)[0]
    b = tp.decode(z, prompts[:, [2, 0, 3, 1]])[0]
    assert torch.allclose(a, b, atol=1e-10)


def test_neutral_prompt_equals_no_prompt():
    tp = small_teacher().double().eval()
    z = torch.rand(2, 16, 8, 8, dtype=torch.float64)
    bare = tp.decode(z)[0]
    neutral = tp.decode(z, torch.zeros(2, 4, 16, dtype=torch.float64),
                        torch.full((2, 2, 32, 32), 0.5, dtype=torch.float64))[0]
    assert torch.allclose(bare, neutral, atol=1e-10)


def test_mask_prompt_changes_output():
    tp = small_teacher().eval()
    z = torch.rand(1, 16, 8, 8)
    fg = one_hot(torch.ones(1, 32, 32, dtype=torch.long), 2)
    assert not torch.allclose(tp.decode(z, None, fg)[0], tp.decode(z)[0])


def test_mask_prompt_size_mismatch():
    dec = PromptMaskDecoder(2, 16)
    with pytest.raises(ValueError, match="mask prompt"):
        dec(torch.rand(1, 16, 8, 8), None, torch.rand(1, 2, 16, 16))


def test_mask_prompt_is_detached():
    tp = small_teacher()
    m = torch.rand(1, 2, 32, 32).softmax(1).requires_grad_()
    y = torch.randint(0, 2, (1, 32, 32))
    sam_loss(tp(torch.rand(1, 1, 32, 32), m)[1], y).backward()
    assert m.grad is None


def test_sam_loss_requires_ground_truth():
    with pytest.raises(ValueError):
        sam_loss(torch.full((1, 2, 4, 4), 0.5), None)


def test_sam_loss_perfect_is_small():
    y = torch.randint(0, 2, (1, 8, 8))
    assert sam_loss(one_hot(y, 2), y).item() < 1e-4


def test_sidecar_lists_frozen_tensors():
    tp = small_teacher()
    side = tp.sidecar()
    assert side["D"] == 16 and side["N_b"] == 4 and side["stride"] == 4
    assert side["frozen"] and all(n.startswith("encoder.") for n in side["frozen"])


def test_full_size_shape_contract():
    tp = Teacher(1, 2, dim=64, num_prompts=4).eval()
    z = tp.encode(torch.rand(1, 1, 64, 64))
    prompts = tp.prompt_decoder(z)
    assert z.shape == (1, 64, 16, 16) and prompts.shape == (1, 4, 64)
    assert tp.decode(z, prompts, torch.full((1, 2, 64, 64), 0.5))[1].shape == (1, 2, 64, 64)


def test_sam_loss_uniform_ce_is_ln2():
    from semiseg.losses import ce_loss

    y = torch.randint(0, 2, (1, 4, 4))
    assert ce_loss(torch.full((1, 2, 4, 4), 0.5), y).item() == pytest.approx(math.log(2))


def test_sam_loss_two_by_two_mixed_case():
    fg = torch.tensor([[0.8, 0.3], [0.6, 0.1]], dtype=torch.float64)
    y = torch.tensor([[1, 0], [0, 0]])
    val = sam_loss(torch.stack([1 - fg, fg])[None], y[None]).item()
    assert val == pytest.approx(0.7300367781701069, abs=1e-10)
