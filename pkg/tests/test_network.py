import math

import numpy as np
import pytest
import torch

from spmpinn.autodiff import DTYPE
from spmpinn.network import (
    Architecture,
    CheckpointError,
    encode_profile,
    eval_with_jets,
    forward,
    init_params,
    load_checkpoint,
    new_model,
    save_checkpoint,
    set_phase2_mask,
)
from spmpinn.spm_solver import CurrentProfile


def test_encode_constant_zero_and_ramp():
    assert np.all(encode_profile(CurrentProfile.constant(5.0, 100.0), 8, 5.0).samples == 1.0)
    assert np.all(encode_profile(CurrentProfile.constant(0.0, 100.0), 8, 5.0).samples == 0.0)
    ramp = CurrentProfile(np.array([0.0, 100.0]), np.array([0.0, 5.0]))
    assert encode_profile(ramp, 5, 5.0).samples.tolist() == [0.0, 0.25, 0.5, 0.75, 1.0]


def test_encode_rejects_short_profile():
    with pytest.raises(ValueError):
        encode_profile(CurrentProfile.constant(1.0, 100.0), 4, 1.0, horizon=200.0)


def test_architecture_validation():
    with pytest.raises(ValueError):
        Architecture(branch=(4, 6), trunk=(3, 5), head=(5, 1))
    with pytest.raises(ValueError):
        Architecture(branch=(4, 6), trunk=(3, 6), head=(6, 2))
    with pytest.raises(ValueError):
        Architecture(branch=(4, 6), trunk=(2, 6), head=(6, 1))
    with pytest.raises(ValueError):
        Architecture(activation="relu")


def _call(model, t, r=0.5, c0=0.4, current=-5.0, t_scale=3600.0):
    enc = np.full(model.arch.m, current / model.i_norm)
    return forward(model, enc, t, r, current, t_scale, c0)


def test_hard_initial_condition_exact(tiny_arch):
    rng = np.random.default_rng(0)
    r = np.linspace(0, 1, 5)
    for seed in range(1000):
        model = new_model("pos", tiny_arch, seed, 5.0, 18000.0)
        c0 = float(rng.uniform(0.01, 0.99))
        out = _call(model, np.zeros(5), r, c0=c0, current=float(rng.uniform(-10, 10)))
        assert torch.all(out == c0)


def test_zero_head_weights_leave_bias(tiny_arch):
    model = new_model("neg", tiny_arch, 1, 5.0, 18000.0)
    last = len(tiny_arch.head) - 2
    model.params.view(f"head.{last}.W").zero_()
    model.params.view(f"head.{last}.b").fill_(0.2)
    t = np.array([0.0, 36.0, 900.0, 3600.0])
    beta = -math.log(100.0) / 3600.0
    expected = (1 - np.exp(beta * t)) * 0.2 + 0.4
    np.testing.assert_allclose(_call(model, t).numpy(), expected, rtol=0, atol=1e-15)
    # the envelope reaches 0.99 at the end of the horizon
    assert 1 - math.exp(beta * 3600.0) == pytest.approx(0.99, rel=1e-12)


def test_forward_bitwise_reproducible(tiny_arch):
    a = _call(new_model("pos", tiny_arch, 4, 5.0, 18000.0), np.linspace(0, 3600, 9))
    b = _call(new_model("pos", tiny_arch, 4, 5.0, 18000.0), np.linspace(0, 3600, 9))
    assert torch.equal(a, b)


def test_init_seeded_and_glorot_bounded(small_arch):
    a, b, c = init_params(small_arch, 0), init_params(small_arch, 0), init_params(small_arch, 1)
    assert torch.equal(a.values, b.values)
    assert not torch.equal(a.values, c.values)
    for net in ("branch", "trunk", "head"):
        sizes = getattr(small_arch, net)
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            W = a.view(f"{net}.{i}.W")
            assert W.shape == (fan_out, fan_in)
            assert float(W.abs().max()) <= math.sqrt(6.0 / (fan_in + fan_out))
            assert torch.count_nonzero(a.view(f"{net}.{i}.b")) == 0


def test_jets_finite_over_domain(small_arch):
    model = new_model("pos", small_arch, 2, 5.0, 18000.0)
    t, r = np.meshgrid(np.linspace(0, 3600, 21), np.linspace(0, 1, 21))
    t, r = torch.as_tensor(t.ravel(), dtype=DTYPE), torch.as_tensor(r.ravel(), dtype=DTYPE)
    extras = {"enc": np.full(8, -1.0), "i_t": -5.0, "t_scale": 3600.0, "c0": 0.5}
    jet = eval_with_jets(model, t, r, extras)
    assert all(torch.isfinite(x).all() for x in jet.astuple())


def _trainable(model):
    return sorted(n for n, s in model.params.segments.items() if s.trainable)


def test_phase2_mask_empty_list(cell, tiny_arch):
    m = set_phase2_mask(new_model("pos", tiny_arch, 0, 5.0, 18000.0), [], cell.pos)
    assert all(n.startswith("head.") for n in _trainable(m))
    assert any(n.startswith("head.") for n in _trainable(m))


def test_phase2_mask_volume_fractions(cell, tiny_arch):
    names = ["eps_pos", "eps_neg"]
    mp = set_phase2_mask(new_model("pos", tiny_arch, 0, 5.0, 18000.0), names, cell.pos)
    mn = set_phase2_mask(new_model("neg", tiny_arch, 0, 5.0, 18000.0), names, cell.neg)
    phys = [n for m in (mp, mn) for n in _trainable(m) if n.startswith("phys.")]
    assert phys == ["phys.eps_pos", "phys.eps_neg"]
    assert float(mp.physical()["eps"]) == pytest.approx(cell.pos.eps, rel=1e-15)


def test_phase2_mask_four_parameters(cell, tiny_arch):
    names = ["eps_pos", "eps_neg", "D_pos", "D_neg"]
    models = [set_phase2_mask(new_model(s, tiny_arch, 0, 5.0, 18000.0), names, cell.electrode(s)) for s in ("pos", "neg")]
    phys = [n for m in models for n in _trainable(m) if n.startswith("phys.")]
    assert len(phys) == 4
    assert float(models[1].physical()["D"]) == pytest.approx(cell.neg.D, rel=1e-12)


def test_phase2_mask_unknown_name(cell, tiny_arch):
    with pytest.raises(ValueError, match="unknown"):
        set_phase2_mask(new_model("pos", tiny_arch, 0, 5.0, 18000.0), ["k_pos"], cell.pos)


def test_checkpoint_round_trip(tmp_path, cell, tiny_arch):
    m = set_phase2_mask(new_model("neg", tiny_arch, 9, 5.0, 18000.0), ["eps_neg"], cell.neg)
    m.metadata["epoch"] = 12
    save_checkpoint(m, tmp_path / "m.json")
    back = load_checkpoint(tmp_path / "m.json")
    assert torch.equal(back.params.values, m.params.values)
    assert _trainable(back) == _trainable(m)
    assert (back.arch, back.side, back.i_norm, back.q_ref, back.ic_decay) == (m.arch, m.side, m.i_norm, m.q_ref, m.ic_decay)
    assert back.metadata["epoch"] == 12
    t = np.linspace(0, 3600, 7)
    assert torch.equal(_call(back, t), _call(m, t))


def test_checkpoint_errors(tmp_path):
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.json")
    (tmp_path / "other.json").write_text('{"format": "something-else", "version": 1}')
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "other.json")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.json")
