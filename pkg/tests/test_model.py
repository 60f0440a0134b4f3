import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from gmb.grading import GleasonScore
from gmb.model import (
    ATTN_HIDDEN_DIM,
    ATTN_IN_DIM,
    PROJ_DIM,
    EncoderSpec,
    GatedAbmil,
    ModelError,
    decode_checkpoint,
    encode_checkpoint,
    forward_patch,
    init_params,
    load_checkpoint,
    predict_patterns,
    save_checkpoint,
)
from gmb.training import backward

FROZEN = EncoderSpec("frozen_file", 16)
TOY = EncoderSpec("trainable_toy", 16)


def test_layer_shapes():
    m = init_params(TOY, 0)
    shapes = {n: tuple(p.shape) for n, p in m.named_parameters()}
    assert shapes["proj.weight"] == (PROJ_DIM, 16)
    assert shapes["attn_pre.weight"] == (ATTN_IN_DIM, PROJ_DIM)
    assert shapes["attn_tanh.weight"] == shapes["attn_sigm.weight"] == (ATTN_HIDDEN_DIM, ATTN_IN_DIM)
    assert shapes["attn_w.weight"] == (1, ATTN_HIDDEN_DIM)
    assert shapes["head_hidden.weight"] == (256, ATTN_IN_DIM)
    assert shapes["head_primary.weight"] == shapes["head_secondary.weight"] == (4, 256)
    assert shapes["encoder.conv1.weight"] == (8, 3, 3, 3)
    assert shapes["encoder.conv2.weight"] == (16, 8, 3, 3)
    assert not any(n.startswith("encoder") for n, _ in init_params(FROZEN, 0).named_parameters())


def test_init_deterministic_xavier_zero_bias():
    a, b, c = init_params(FROZEN, 3), init_params(FROZEN, 3), init_params(FROZEN, 4)
    sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert not torch.equal(sa["proj.weight"], sc["proj.weight"])
    for name, t in sa.items():
        if name.endswith("bias"):
            assert not t.any()
        else:
            fan_out, fan_in = t.shape[0], t[0].numel()
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            assert t.abs().max() <= bound + 1e-7


def test_encoder_spec_validation():
    with pytest.raises(ModelError):
        EncoderSpec("imagenet", 8)
    with pytest.raises(ModelError):
        EncoderSpec("frozen_file", 0)


def test_bag_validation():
    m = init_params(FROZEN, 0)
    with pytest.raises(ModelError):
        m.forward_slide(np.zeros((0, 16)))
    with pytest.raises(ModelError):
        m.forward_slide(np.zeros((3, 15)))
    t = init_params(TOY, 0)
    with pytest.raises(ModelError):
        t.forward_slide(np.zeros((2, 4, 4), np.uint8))


def _bag(rng, spec, n):
    if spec.mode == "frozen_file":
        return rng.normal(size=(n, spec.embed_dim)).astype(np.float32)
    return rng.integers(0, 256, (n, 5, 5, 3), dtype=np.uint8)


@settings(max_examples=250)
@given(st.integers(0, 2**32 - 1), st.integers(1, 12), st.sampled_from([FROZEN, TOY]))
def test_mil_invariants(seed, n, spec):
    rng = np.random.default_rng(seed)
    m = init_params(spec, seed % 7)
    bag = _bag(rng, spec, n)
    perm = rng.permutation(n)
    with torch.no_grad():
        a = m.forward_slide(bag)
        b = m.forward_slide(bag[perm])
    assert torch.allclose(a.logits_primary, b.logits_primary, atol=1e-6)
    assert torch.allclose(a.logits_secondary, b.logits_secondary, atol=1e-6)
    assert torch.allclose(a.attention[perm], b.attention, atol=1e-6)
    assert abs(float(a.attention.sum()) - 1.0) <= 1e-6 and float(a.attention.min()) >= 0
    p1, s1 = forward_patch(m, bag[0])
    with torch.no_grad():
        single = m.forward_slide(bag[:1])
    assert np.array_equal(p1, single.probs_primary.numpy()) and np.array_equal(s1, single.probs_secondary.numpy())


def test_dropout_seeded_and_inactive_by_default():
    m = init_params(FROZEN, 0)
    bag = _bag(np.random.default_rng(0), FROZEN, 6)
    with torch.no_grad():
        a = m.forward_slide(bag, dropout_active=True, rng_seed=5).logits_primary
        b = m.forward_slide(bag, dropout_active=True, rng_seed=5).logits_primary
        c = m.forward_slide(bag, dropout_active=True, rng_seed=6).logits_primary
        d = m.forward_slide(bag).logits_primary
        e = m.forward_slide(bag, rng_seed=6).logits_primary
    assert torch.equal(a, b) and not torch.equal(a, c) and torch.equal(d, e)


def test_batched_paths_match_single_pass():
    m = init_params(TOY, 1)
    bag = _bag(np.random.default_rng(1), TOY, 70)
    with torch.no_grad():
        full = m.forward_slide(bag)
        chunked = m.aggregate(m.encode_batched(bag, 64))
    assert torch.allclose(full.logits_primary, chunked.logits_primary, atol=1e-6)
    prim, sec = m.forward_patches(bag, 64)
    assert prim.shape == sec.shape == (70, 4)
    p0, _ = forward_patch(m, bag[3])
    assert np.allclose(prim[3], p0, atol=1e-6)


def test_predict_patterns_corrects_mixed_pairs():
    m = init_params(FROZEN, 0)
    with torch.no_grad():
        fwd = m.forward_slide(np.zeros((2, 16), np.float32))
        fwd.logits_primary[:] = torch.tensor([5.0, 0.0, 0.0, 0.0])
        fwd.logits_secondary[:] = torch.tensor([0.0, 0.0, 3.0, 0.0])
    assert str(predict_patterns(fwd)) == "4+4"
    with torch.no_grad():
        fwd.logits_primary[:] = torch.tensor([1.0, 1.0, 0.0, 0.0])  # tie goes to the lower code
        fwd.logits_secondary[:] = torch.tensor([1.0, 0.0, 0.0, 0.0])
    assert predict_patterns(fwd).is_benign


@pytest.mark.parametrize("spec", [FROZEN, TOY])
def test_checkpoint_roundtrip(tmp_path, spec):
    m = init_params(spec, 2)
    save_checkpoint(tmp_path / "m.gck", m, {"fold": 3})
    back, meta = load_checkpoint(tmp_path / "m.gck")
    assert meta == {"fold": 3} and back.spec == spec
    sa, sb = m.state_dict(), back.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert encode_checkpoint(back, meta) == (tmp_path / "m.gck").read_bytes()


def test_checkpoint_corruption():
    data = encode_checkpoint(init_params(FROZEN, 0))
    for bad in (b"XXXX" + data[4:], data + b"\0", data[:-4]):
        with pytest.raises((ModelError, ValueError)):
            decode_checkpoint(bad)


def test_frozen_mode_has_no_encoder_gradient():
    m = init_params(FROZEN, 0)
    grads = backward(m, np.random.default_rng(0).normal(size=(3, 16)), GleasonScore.from_codes(1, 2))
    assert not any(k.startswith("encoder") for k in grads)
    assert set(grads) == {n for n, _ in m.named_parameters()}


def test_confident_correct_prediction_gives_vanishing_head_bias_gradient():
    m = init_params(FROZEN, 0)
    with torch.no_grad():
        m.head_primary.bias[:] = torch.tensor([60.0, 0.0, 0.0, 0.0])
        m.head_secondary.bias[:] = torch.tensor([60.0, 0.0, 0.0, 0.0])
    grads = backward(m, np.zeros((2, 16), np.float32), GleasonScore.benign())
    assert grads["head_primary.bias"].abs().max() < 1e-12
    assert grads["head_secondary.bias"].abs().max() < 1e-12


def test_model_is_module():
    assert isinstance(init_params(FROZEN, 0), GatedAbmil)
