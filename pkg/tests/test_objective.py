import json
import math

import numpy as np
import pytest
import torch

from sceikg.objective import (
    LossBreakdown,
    VisitLossParts,
    loss_compat,
    loss_mse,
    loss_state,
    total_loss,
)

from fdcheck import assert_grads_match


# ---------------------------------------------------------------------------
# loss_mse


def test_mse_exact_match_is_zero():
    v = torch.tensor([1.0, 0.0, 1.0], dtype=torch.float64)
    assert loss_mse(v, v).item() == 0.0


def test_mse_hand_value():
    true = torch.tensor([1.0, 0.0], dtype=torch.float64)
    pred = torch.tensor([0.5, 0.5], dtype=torch.float64)
    assert loss_mse(true, pred).item() == pytest.approx(0.5)


def test_mse_matches_elementwise_oracle(rng):
    true = torch.tensor(rng.integers(0, 2, size=10).astype(float))
    pred = torch.tensor(rng.random(10))
    want = float(((true.numpy() - pred.numpy()) ** 2).sum())
    assert loss_mse(true, pred).item() == pytest.approx(want, abs=1e-12)


def test_mse_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        loss_mse(torch.zeros(3), torch.zeros(4))


# ---------------------------------------------------------------------------
# loss_state


def test_state_parallel_antiparallel_orthogonal():
    a = torch.tensor([1.0, 2.0, -1.0], dtype=torch.float64)
    assert loss_state(a, a * 3).item() == pytest.approx(0.0, abs=1e-12)
    assert loss_state(a, -a).item() == pytest.approx(2.0, abs=1e-12)
    b = torch.tensor([2.0, -1.0, 0.0], dtype=torch.float64)
    assert loss_state(a, b).item() == pytest.approx(1.0, abs=1e-12)


def test_state_zero_norm_warns_and_returns_one():
    a = torch.zeros(3, dtype=torch.float64)
    b = torch.ones(3, dtype=torch.float64)
    with pytest.warns(UserWarning, match="zero-norm"):
        assert loss_state(a, b).item() == pytest.approx(1.0)


def test_state_scale_invariance():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a = torch.tensor(rng.normal(size=5))
        b = torch.tensor(rng.normal(size=5))
        sa, sb = float(rng.uniform(0.1, 10)), float(rng.uniform(0.1, 10))
        base = loss_state(a, b).item()
        scaled = loss_state(sa * a, sb * b).item()
        assert scaled == pytest.approx(base, abs=1e-9)


def test_state_bounds_many_seeds():
    for seed in range(50):
        rng = np.random.default_rng(seed)
        a = torch.tensor(rng.normal(size=6))
        b = torch.tensor(rng.normal(size=6))
        val = loss_state(a, b).item()
        assert 0.0 - 1e-12 <= val <= 2.0 + 1e-12


# ---------------------------------------------------------------------------
# loss_compat


def test_compat_zero_matrix():
    pred = torch.rand(4, dtype=torch.float64)
    W = torch.zeros(4, 4, dtype=torch.float64)
    assert loss_compat(pred, W).item() == 0.0


def test_compat_single_diagonal():
    W = torch.zeros(3, 3, dtype=torch.float64)
    W[1, 1] = 0.7
    pred = torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64)
    assert loss_compat(pred, W).item() == pytest.approx(-0.7)


def test_compat_matches_quadratic_form(rng):
    W = torch.tensor(rng.random((3, 3)))
    pred = torch.tensor(rng.random(3))
    want = -float(pred.numpy() @ W.numpy() @ pred.numpy())
    assert loss_compat(pred, W).item() == pytest.approx(want, abs=1e-12)


def test_compat_is_nonpositive_for_nonnegative_matrix(rng):
    for _ in range(10):
        W = torch.tensor(rng.random((5, 5)))
        pred = torch.tensor(rng.random(5))
        assert loss_compat(pred, W).item() <= 0.0


# ---------------------------------------------------------------------------
# total_loss


def make_parts(mse, state, compat, mask):
    t = lambda x: torch.tensor(x, dtype=torch.float64)
    return VisitLossParts(t(mse), t(state), t(compat), torch.tensor(mask, dtype=torch.bool))


def test_total_only_l2_when_parts_zero():
    parts = make_parts([[0.0]], [[0.0]], [[0.0]], [[True]])
    p = torch.tensor([1.0, 2.0], dtype=torch.float64)
    total, bd = total_loss(parts, lam=0.5, lam_theta=1e-2, params=[p])
    assert bd.l2 == pytest.approx(5.0)
    assert total.item() == pytest.approx(0.05)


def test_total_averages_over_visits():
    parts = make_parts([[0.2, 0.4]], [[0.0, 0.0]], [[0.0, 0.0]], [[True, True]])
    total, bd = total_loss(parts, lam=0.1, lam_theta=0.0, params=[])
    assert total.item() == pytest.approx(0.3)
    assert bd.visit_counts == [2]


def test_total_last_visit_contributes_no_state():
    # state value parked in the final visit slot must be ignored
    parts = make_parts([[0.0, 0.0]], [[0.5, 9.9]], [[0.0, 0.0]], [[True, True]])
    total, bd = total_loss(parts, lam=0.0, lam_theta=0.0, params=[])
    assert bd.state == pytest.approx(0.25)  # 0.5 over 2 real visits
    assert total.item() == pytest.approx(0.25)


def test_total_ignores_padded_visits():
    parts = make_parts([[0.2, 7.0], [0.4, 0.6]],
                       [[0.0, 0.0], [0.3, 0.0]],
                       [[-1.0, 5.0], [0.0, -2.0]],
                       [[True, False], [True, True]])
    total, bd = total_loss(parts, lam=1.0, lam_theta=0.0, params=[])
    # patient 0: mse 0.2, no state (single visit), compat -1
    # patient 1: mse 0.5, state 0.15, compat -1
    assert bd.mse == pytest.approx(0.35)
    assert bd.state == pytest.approx(0.075)
    assert bd.compat == pytest.approx(-1.0)
    assert total.item() == pytest.approx(0.35 + 0.075 - 1.0)


def test_total_rejects_fully_padded_patient():
    parts = make_parts([[0.0]], [[0.0]], [[0.0]], [[False]])
    with pytest.raises(ValueError, match="padded"):
        total_loss(parts, lam=0.1, lam_theta=0.0, params=[])


def test_total_matches_recomposition_oracle(rng):
    B, T = 3, 4
    mse = rng.random((B, T))
    state = rng.random((B, T))
    compat = -rng.random((B, T))
    mask = np.ones((B, T), dtype=bool)
    mask[0, 2:] = False
    mask[2, 3] = False
    parts = make_parts(mse.tolist(), state.tolist(), compat.tolist(), mask.tolist())
    p = torch.tensor(rng.normal(size=4))
    lam, lam_theta, ikg = 0.3, 1e-3, 0.9

    total, bd = total_loss(parts, lam, lam_theta, [p], ikg=ikg)
    # independent recomposition
    exp_mse = exp_state = exp_compat = 0.0
    for b in range(B):
        n = mask[b].sum()
        exp_mse += (mse[b] * mask[b]).sum() / n
        succ = np.zeros(T, dtype=bool)
        succ[:-1] = mask[b, 1:]
        exp_state += (state[b] * (succ & mask[b])).sum() / n
        exp_compat += (compat[b] * mask[b]).sum() / n
    exp_mse, exp_state, exp_compat = exp_mse / B, exp_state / B, exp_compat / B
    l2 = float((p * p).sum())
    want = exp_mse + exp_state + lam * exp_compat + ikg + lam_theta * l2
    assert total.item() == pytest.approx(want, abs=1e-9)
    assert bd.total == pytest.approx(want, abs=1e-9)


def test_doubling_lambda_doubles_compat_contribution():
    parts = make_parts([[0.1, 0.2]], [[0.05, 0.0]], [[-0.4, -0.8]], [[True, True]])
    t1, _ = total_loss(parts, lam=0.2, lam_theta=0.0, params=[])
    t2, _ = total_loss(parts, lam=0.4, lam_theta=0.0, params=[])
    base, _ = total_loss(parts, lam=0.0, lam_theta=0.0, params=[])
    contrib1 = t1.item() - base.item()
    contrib2 = t2.item() - base.item()
    assert contrib2 == pytest.approx(2 * contrib1, abs=1e-12)


def test_breakdown_json_line():
    bd = LossBreakdown(mse=0.1, state=0.2, compat=-0.3, ikg=0.4, l2=0.5, total=0.9,
                       visit_counts=[2])
    obj = json.loads(bd.to_json(epoch=7))
    assert list(obj.keys()) == ["epoch", "mse", "state", "compat", "ikg", "l2", "total"]


def test_loss_gradients_match_finite_differences():
    torch.manual_seed(0)
    true = torch.tensor([1.0, 0.0, 1.0, 0.0], dtype=torch.float64)
    W = torch.rand(4, 4, dtype=torch.float64)
    pred_raw = torch.randn(4, dtype=torch.float64, requires_grad=True)
    phi = torch.randn(4, dtype=torch.float64, requires_grad=True)
    psi_raw = torch.randn(4, dtype=torch.float64, requires_grad=True)

    def fn():
        pred = torch.sigmoid(pred_raw)
        return (loss_mse(true, pred) + loss_state(phi, psi_raw)
                + 0.3 * loss_compat(pred, W))

    assert_grads_match(fn, [pred_raw, phi, psi_raw])
