
import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from dssn.common import NumericError, ValidationError
from dssn.model import Arch, TeacherState, decode, ema_update, encode, init_model, predict_probs

from oracles import central_difference

SMALL = Arch(num_classes=3, encoder_widths=(4, 4), encoder_strides=(2, 2), decoder_width=4)


def test_same_seed_same_params():
    a, b = init_model(Arch(), 7), init_model(Arch(), 7)
    for (_, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(p, q)
    c = init_model(Arch(), 8)
    assert not torch.equal(next(a.parameters()), next(c.parameters()))


def test_init_leaves_global_rng_alone():
    torch.manual_seed(0)
    ref = torch.rand(3)
    torch.manual_seed(0)
    init_model(Arch(), 1)
    assert torch.equal(torch.rand(3), ref)


def test_logit_shape_and_scale():
    net = init_model(Arch(num_classes=5), 0)
    x = torch.from_numpy(np.random.default_rng(0).random((2, 3, 32, 32))).float()
    with torch.no_grad():
        logits = net(x)
    assert logits.shape == (2, 5, 32, 32)
    assert 0.01 < float(logits.std()) < 10


def test_encode_decode_shapes():
    net = init_model(Arch(), 0)
    z = encode(net, torch.rand(2, 3, 64, 64))
    assert z.shape == (2, 64, 16, 16) and torch.isfinite(z).all()
    assert decode(net, z).shape == (2, 4, 64, 64)


def test_batched_encode_equals_per_item():
    net = init_model(Arch(), 1, torch.float64)
    x = torch.rand(3, 3, 32, 32, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        batched = encode(net, x)
        single = torch.cat([encode(net, x[i:i + 1]) for i in range(3)])
    assert float((batched - single).abs().max()) < 1e-10


def test_zero_feature_decodes_constant():
    net = init_model(Arch(), 2)
    logits = decode(net, torch.zeros(1, 64, 8, 8))
    assert torch.allclose(logits, logits[..., :1, :1].expand_as(logits), atol=1e-6)


@pytest.mark.parametrize("bad", [(1, 3, 30, 32), (1, 1, 32, 32), (3, 32, 32)])
def test_encode_validation(bad):
    with pytest.raises(ValidationError):
        encode(init_model(Arch(), 0), torch.zeros(bad))


def test_decode_validation():
    with pytest.raises(ValidationError):
        decode(init_model(Arch(), 0), torch.zeros(1, 8, 4, 4))


def test_decoder_weight_gradient_matches_finite_difference():
    net = init_model(SMALL, 3, torch.float64)
    z = torch.rand(1, 4, 3, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    readout = torch.rand(1, 3, 12, 12, dtype=torch.float64, generator=torch.Generator().manual_seed(2))
    weight = net.decoder[0].weight

    def f():
        return (decode(net, z) * readout).sum()

    f().backward()
    analytic = weight.grad.detach().view(-1).numpy().copy()
    with torch.no_grad():
        numeric = central_difference(f, weight.data, 1e-5)
    rel = np.abs(analytic - numeric).max() / np.abs(analytic).max()
    assert rel < 1e-4


class TestSoftmax:
    def test_equal_logits_uniform(self):
        p = predict_probs(torch.zeros(1, 4, 2, 2, dtype=torch.float64))
        assert torch.all(p == 0.25)

    def test_log_logits(self):
        p = predict_probs(torch.log(torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64)).view(1, 3, 1, 1))
        assert torch.allclose(p.view(-1), torch.tensor([1 / 6, 2 / 6, 3 / 6], dtype=torch.float64), atol=1e-15)

    def test_shift_invariance(self):
        x = torch.randn(2, 4, 3, 3, dtype=torch.float64)
        assert float((predict_probs(x) - predict_probs(x + 7.5)).abs().max()) < 1e-7

    def test_non_finite(self):
        with pytest.raises(NumericError):
            predict_probs(torch.tensor([float("nan"), 0.0]).view(1, 2, 1, 1))


def _fill(net, value):
    with torch.no_grad():
        for p in net.parameters():
            p.fill_(value)


class TestEma:
    def test_single_step_default_alpha(self):
        teacher = TeacherState.from_student(init_model(SMALL, 0, torch.float64), 0.996)
        student = init_model(SMALL, 1, torch.float64)
        _fill(teacher.params, 1.0)
        _fill(student, 0.0)
        ema_update(teacher, student)
        assert all(torch.all(p == 0.996) for p in teacher.params.parameters())

    def test_alpha_zero_copies_student(self):
        teacher = TeacherState.from_student(init_model(SMALL, 0), 0.0)
        student = init_model(SMALL, 1)
        ema_update(teacher, student)
        for p, q in zip(teacher.params.parameters(), student.parameters()):
            assert torch.equal(p, q)

    @pytest.mark.parametrize("alpha", [0.0, 0.5, 0.996])
    def test_closed_form_after_k_steps(self, alpha):
        teacher = TeacherState.from_student(init_model(SMALL, 0, torch.float64), alpha)
        student = init_model(SMALL, 1, torch.float64)
        t0 = [p.clone() for p in teacher.params.parameters()]
        for _ in range(10):
            ema_update(teacher, student)
        for t, p0, s in zip(teacher.params.parameters(), t0, student.parameters()):
            expected = p0 * alpha**10 + s * (1 - alpha**10)
            assert float((t - expected).abs().max()) < 1e-10

    def test_teacher_has_no_grad(self):
        teacher = TeacherState.from_student(init_model(SMALL, 0))
        assert not any(p.requires_grad for p in teacher.params.parameters())

    def test_mismatched_shapes(self):
        teacher = TeacherState.from_student(init_model(SMALL, 0))
        with pytest.raises(ValidationError):
            ema_update(teacher, init_model(Arch(), 0))

    @settings(max_examples=30, deadline=None)
    @given(alpha=st.floats(0, 1), t=st.floats(-5, 5), s=st.floats(-5, 5))
    def test_update_stays_between_endpoints(self, alpha, t, s):
        teacher = TeacherState.from_student(init_model(SMALL, 0, torch.float64), alpha)
        student = init_model(SMALL, 0, torch.float64)
        _fill(teacher.params, t)
        _fill(student, s)
        ema_update(teacher, student)
        lo, hi = min(t, s), max(t, s)
        for p in teacher.params.parameters():
            assert torch.all(p >= lo - 1e-12) and torch.all(p <= hi + 1e-12)
