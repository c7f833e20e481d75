import logging
from types import SimpleNamespace

import hypothesis as h
import hypothesis.strategies as st
import numpy as np
import pytest

from conftest import linear_net, random_image
from interprobust.exceptions import AttackError
from interprobust.models import AaiObjective, Arch, AttackConfig, DiscrepancySpec
from interprobust.services.attack_service import (
    aai,
    bisect_lambda,
    isa,
    isa_bisect,
    margins,
    min_eps,
    pgd,
    pgd_batch,
    project,
    runner_up,
    topk_cells,
)
from interprobust.services.discrepancy_service import check_prop1
from interprobust.services.network_service import build


@pytest.fixture
def flip_net():
    """logits = (m, 0.2 - m) for m = mean(x); class 1 wins once m < 0.1."""
    return linear_net([[1.0], [-1.0]], bias=[0.0, 0.2])


def flat(value):
    return np.full((1, 4, 4), value, dtype=np.float32)


# === PROJECTION / MARGINS ===

def test_project_keeps_ball_and_box():
    x0 = np.array([0.0, 0.5, 0.95], dtype=np.float32)
    delta = np.array([-0.4, 0.4, 0.4], dtype=np.float32)
    np.testing.assert_allclose(project(delta, x0, 0.3), [0.0, 0.3, 0.05], atol=1e-7)


def test_margins():
    logits = np.array([[3.0, 1.0, 2.0]])
    assert margins(logits, np.array([0]))[0] == 1.0
    assert margins(logits, np.array([2]), targeted=True)[0] == 1.0


# === PGD ===

def test_pgd_eps_zero_is_identity(tiny_net, rng):
    x = random_image(rng)
    y = int(tiny_net.predict(x[None])[0])
    outcome = pgd(tiny_net, x, y, AttackConfig(eps=0.0, steps=10))
    np.testing.assert_array_equal(outcome.x_adv, x)
    assert not outcome.success
    assert outcome.prediction == y


def test_pgd_single_step_on_linear_model(flip_net):
    # the cross-entropy gradient is -2 p_1 / u on every pixel, so one sign step lowers all of them
    outcome = pgd(flip_net, flat(0.5), 0, AttackConfig(eps=0.3, steps=1, step_size=0.01))
    np.testing.assert_allclose(outcome.x_adv, flat(0.49), atol=1e-6)
    assert len(outcome.loss_trace) == 1


def test_targeted_pgd(flip_net):
    outcome = pgd(flip_net, flat(0.5), 0, AttackConfig(eps=0.5, steps=60, step_size=0.01, target=1))
    assert outcome.success
    assert outcome.prediction == 1
    assert outcome.margin < 0


def test_pgd_rejects_bad_target(tiny_net, rng):
    with pytest.raises(AttackError):
        pgd(tiny_net, random_image(rng), 0, AttackConfig(target=5))


@h.settings(max_examples=20, deadline=None)
@h.given(
    eps=st.floats(0.0, 0.5),
    steps=st.integers(1, 5),
    step_size=st.floats(0.01, 0.2),
    rand_init=st.booleans(),
    seed=st.integers(0, 100),
)
def test_pgd_stays_in_ball_and_box(eps, steps, step_size, rand_init, seed):
    net = build(Arch.TINY, (1, 8, 8), 3, seed=seed)
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 1, size=(4, 1, 8, 8)).astype(np.float32)
    y = net.predict(x)
    cfg = AttackConfig(eps=eps, steps=steps, step_size=step_size, rand_init=rand_init, seed=seed)
    x_adv, _ = pgd_batch(net, x, y, cfg)
    assert np.abs(x_adv - x).max() <= eps + 1e-6
    assert x_adv.min() >= 0 and x_adv.max() <= 1


def test_pgd_is_deterministic(tiny_net, rng):
    x = rng.uniform(0, 1, size=(3, 1, 8, 8)).astype(np.float32)
    y = tiny_net.predict(x)
    cfg = AttackConfig(eps=0.2, steps=4, rand_init=True, seed=3)
    first, _ = pgd_batch(tiny_net, x, y, cfg)
    second, _ = pgd_batch(tiny_net, x, y, cfg)
    np.testing.assert_array_equal(first, second)


def test_successful_pgd_satisfies_bound(flip_net, rng):
    # every pixel can drop to 0.1 or below, so the mean crosses 0.1
    checked = 0
    for _ in range(20):
        x = rng.uniform(0, 0.6, size=(1, 4, 4)).astype(np.float32)
        y = int(flip_net.predict(x[None])[0])
        outcome = pgd(flip_net, x, y, AttackConfig(eps=0.5, steps=30, step_size=0.05))
        if outcome.success:
            assert check_prop1(flip_net, x, outcome.x_adv, y, outcome.prediction).holds
            checked += 1
    assert checked > 0


def test_runner_up_is_best_other_class(tiny_net, flip_net, rng):
    assert runner_up(flip_net, flat(0.5), 0) == 1
    assert runner_up(flip_net, flat(0.5), 1) == 0
    x = random_image(rng)
    y = int(tiny_net.predict(x[None])[0])
    logits = tiny_net.logits(x[None])[0].astype(np.float64)
    logits[y] = -np.inf
    assert runner_up(tiny_net, x, y) == int(np.argmax(logits))


# === MIN EPS ===

def test_min_eps_on_linear_model(flip_net):
    # m = 0.55 - eps, so the label flips for eps just above 0.45
    found = min_eps(flip_net, flat(0.55), 0, AttackConfig(eps=0.6, steps=100, step_size=0.01))
    assert found == pytest.approx(0.45, abs=2e-3)


def test_min_eps_misclassified_is_zero(flip_net):
    assert min_eps(flip_net, flat(0.05), 0, AttackConfig(eps=0.3)) == 0.0


def test_min_eps_fails_at_bracket(flip_net):
    with pytest.raises(AttackError):
        min_eps(flip_net, flat(0.55), 0, AttackConfig(eps=0.1, steps=20, step_size=0.01))


# === ISA ===

def test_isa_needs_distinct_target(tiny_net, rng):
    with pytest.raises(AttackError):
        isa(tiny_net, random_image(rng), 1, 1, eps=0.1)


def test_isa_eps_zero_changes_nothing(tiny_net, rng):
    x = random_image(rng)
    y = int(tiny_net.predict(x[None])[0])
    outcome = isa(tiny_net, x, y, (y + 1) % 3, eps=0.0, steps=5)
    np.testing.assert_array_equal(outcome.x_adv, x)
    assert outcome.discrepancy == 0.0
    assert not outcome.success


def test_isa_without_attack_term_stays_put(flip_net):
    # the l1 discrepancy has zero subgradient at delta = 0
    outcome = isa(flip_net, flat(0.5), 0, 1, eps=0.3, lam=0.0, steps=10)
    np.testing.assert_array_equal(outcome.x_adv, flat(0.5))
    assert outcome.discrepancy == 0.0


@pytest.mark.parametrize("spec", ["CAM:L1:TwoClass", "CAM:L2:OneClass", "GradCAMpp:L1:AllClass", "Repr:L1:TwoClass", "CAM:L1:SoftmaxWeighted"])
def test_isa_respects_ball(spec, tiny_net, rng):
    x = random_image(rng)
    y = int(tiny_net.predict(x[None])[0])
    outcome = isa(tiny_net, x, y, (y + 1) % 3, eps=0.1, lam=5.0, steps=5, spec=DiscrepancySpec.parse(spec))
    assert np.abs(outcome.x_adv - x).max() <= 0.1 + 1e-6
    assert outcome.discrepancy >= 0
    assert outcome.lambda_used == 5.0
    assert len(outcome.loss_trace) == 5
    if outcome.success:
        assert outcome.margin <= -0.1


def test_isa_bisect_fails_without_room(tiny_net, rng):
    x = random_image(rng)
    y = int(tiny_net.predict(x[None])[0])
    with pytest.raises(AttackError):
        isa_bisect(tiny_net, x, y, (y + 1) % 3, eps=0.0, steps=3)


def toy_run(threshold, broken=None):
    def run(lam):
        ok = lam >= threshold and not (broken and broken[0] <= lam < broken[1])
        return SimpleNamespace(success=ok, lam=lam)

    return run


def test_bisection_converges_on_monotone_oracle():
    lam, outcome = bisect_lambda(toy_run(3.7), 0.0, 16.0, iters=10)
    assert 3.7 <= lam <= 3.7 + 16.0 / 1024
    assert outcome.lam == lam


def test_bisection_returns_lower_end_when_it_succeeds():
    lam, _ = bisect_lambda(toy_run(0.0), 0.0, 16.0)
    assert lam == 0.0


def test_bisection_needs_success_at_upper_end():
    with pytest.raises(AttackError):
        bisect_lambda(toy_run(20.0), 0.0, 16.0)


def test_bisection_warns_on_non_monotone_oracle(caplog):
    with caplog.at_level(logging.WARNING, logger="interprobust.services.attack_service"):
        lam, _ = bisect_lambda(toy_run(3.7, broken=(9.0, 11.0)), 0.0, 16.0, iters=10)
    assert 3.7 <= lam <= 3.8
    assert "not monotone" in caplog.text


# === AAI ===

def test_topk_cells_stable_on_ties():
    np.testing.assert_array_equal(topk_cells(np.array([1.0, 3.0, 3.0, 0.5]), 2), [1, 2])
    assert len(topk_cells(np.arange(3.0), 8)) == 3


def test_aai_needs_correct_prediction(flip_net):
    with pytest.raises(AttackError):
        aai(flip_net, flat(0.05), 0, eps=0.1)


@pytest.mark.parametrize("objective", list(AaiObjective))
def test_aai_eps_zero(objective, tiny_net, rng):
    x = random_image(rng)
    y = int(tiny_net.predict(x[None])[0])
    outcome = aai(tiny_net, x, y, eps=0.0, objective=objective)
    np.testing.assert_array_equal(outcome.x_adv, x)
    assert outcome.success
    assert outcome.discrepancy == 0.0
    assert outcome.topk_displaced == 0


@pytest.mark.parametrize("objective", list(AaiObjective))
def test_aai_moves_the_map_inside_the_ball(objective, tiny_net, rng):
    x = random_image(rng)
    y = int(tiny_net.predict(x[None])[0])
    outcome = aai(tiny_net, x, y, eps=0.2, lam=1.0, objective=objective, k=4, steps=10, step_size=0.02, seed=1)
    assert np.abs(outcome.x_adv - x).max() <= 0.2 + 1e-6
    assert outcome.discrepancy > 0
    assert 0 <= outcome.topk_displaced <= 4
    assert outcome.success == (outcome.prediction == y)


def test_aai_is_seeded(tiny_net, rng):
    x = random_image(rng)
    y = int(tiny_net.predict(x[None])[0])
    first = aai(tiny_net, x, y, eps=0.1, steps=3, seed=4)
    second = aai(tiny_net, x, y, eps=0.1, steps=3, seed=4)
    np.testing.assert_array_equal(first.x_adv, second.x_adv)
