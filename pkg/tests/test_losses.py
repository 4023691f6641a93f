import numpy as np
import pytest

from autodiff import GradTape, Tensor, backward, finite_difference_check, mean, sigmoid, total
from errors import ContractError, DegenerateInputError
from losses import (
    E2eHead, Target, cosine_rows, cosine_similarity, e2e_loss, e2e_score, e2e_trial_losses, sample_candidates,
    sampled_softmax_loss, softmax_loss, softmax_xent,
)

TOL = 1e-4


def test_cosine_examples():
    assert cosine_similarity([1, 0], [1, 0]) == 1.0
    assert cosine_similarity([1, 0], [0, 1]) == 0.0
    assert cosine_similarity([1, 2], [-1, -2]) == pytest.approx(-1.0, abs=1e-15)
    with pytest.raises(DegenerateInputError):
        cosine_similarity([0, 0], [1, 1])


def test_cosine_scale_invariance(rng):
    for _ in range(100):
        f, m = rng.standard_normal(6), rng.standard_normal(6)
        s = cosine_similarity(f, m)
        a, c = rng.uniform(1e-3, 1e3, size=2)
        assert abs(cosine_similarity(a * f, m) - s) <= 1e-12
        assert abs(cosine_similarity(f, c * m) - s) <= 1e-12


def test_cosine_rows_gradients(rng):
    F = Tensor(rng.standard_normal((4, 5)))
    M = Tensor(rng.standard_normal((4, 5)))
    err = finite_difference_check(lambda tape: total(tape, cosine_rows(tape, F, M)), [F, M])
    assert err < TOL


def test_softmax_xent_uniform_logits():
    tape = GradTape()
    loss = softmax_xent(tape, Tensor(np.zeros(4)), np.array([2]))
    assert loss.item() == pytest.approx(np.log(4))


def test_softmax_xent_survives_huge_logits():
    loss = softmax_xent(GradTape(), Tensor(np.array([1000.0, 0.0])), np.array([0]))
    assert np.isfinite(loss.item()) and loss.item() == pytest.approx(0.0, abs=1e-12)


def test_softmax_loss_gradients(rng):
    y = Tensor(rng.standard_normal(4))
    W = Tensor(rng.standard_normal((6, 4)))
    b = Tensor(rng.standard_normal(6))
    err = finite_difference_check(lambda tape: softmax_loss(tape, y, 3, W, b), [y, W, b])
    assert err < TOL


def test_softmax_label_out_of_range(rng):
    with pytest.raises(ContractError):
        softmax_loss(GradTape(), Tensor(np.ones(2)), 5, Tensor(np.ones((3, 2))), Tensor(np.zeros(3)))


def test_sampled_softmax_gradients_and_full_set_equivalence(rng):
    y = Tensor(rng.standard_normal(4))
    W = Tensor(rng.standard_normal((8, 4)))
    b = Tensor(rng.standard_normal(8))
    cand = [1, 3, 4, 6]
    err = finite_difference_check(lambda tape: sampled_softmax_loss(tape, y, 4, W, b, candidates=cand), [y, W, b])
    assert err < TOL

    full = sampled_softmax_loss(GradTape(), y, 4, W, b, candidates=range(8)).item()
    assert full == pytest.approx(softmax_loss(GradTape(), y, 4, W, b).item(), abs=1e-12)


def test_sampled_softmax_requires_true_speaker(rng):
    with pytest.raises(ContractError):
        sampled_softmax_loss(GradTape(), Tensor(np.ones(2)), 0, Tensor(np.ones((4, 2))), Tensor(np.zeros(4)),
                             candidates=[1, 2])


def test_sample_candidates_contains_truth_and_is_sorted(rng):
    cand = sample_candidates(50, [7, 3], 10, rng)
    assert cand.size == 10 and {3, 7} <= set(cand.tolist())
    assert np.all(np.diff(cand) > 0)
    assert sample_candidates(5, [1], 64, rng).tolist() == [0, 1, 2, 3, 4]


def test_e2e_score_and_threshold():
    head = E2eHead(w=10.0, b=-5.0)
    assert head.threshold() == 0.5
    assert e2e_score(0.5, head) == 0.5
    assert E2eHead(w=-2.0, b=1.0).threshold() == 0.5
    assert E2eHead(w=0.0, b=1.0).threshold() == float("-inf")


def test_e2e_loss_values_and_clamp(capsys):
    assert e2e_loss(0.5, Target.ACCEPT) == pytest.approx(np.log(2))
    assert e2e_loss(0.9, Target.REJECT) == pytest.approx(-np.log(0.1))
    assert e2e_loss(1.0, Target.REJECT) == pytest.approx(-np.log(1e-12), rel=1e-4)
    assert "WARN" in capsys.readouterr().out


def test_e2e_trial_losses_gradients(rng):
    s = Tensor(rng.uniform(-0.9, 0.9, size=6))
    w = Tensor(np.array(3.0))
    b = Tensor(np.array(-1.0))
    accept = np.array([1, 0, 1, 1, 0, 0], dtype=bool)
    err = finite_difference_check(lambda tape: mean(tape, e2e_trial_losses(tape, s, w, b, accept)), [s, w, b])
    assert err < TOL


def test_clamped_trials_keep_the_logistic_gradient(capsys):
    s = Tensor(np.array([1.0, 0.2]))
    w = Tensor(np.array(100.0))
    b = Tensor(np.array(0.0))
    tape = GradTape()
    loss = total(tape, e2e_trial_losses(tape, s, w, b, np.array([False, True])))
    (gs,) = backward(tape, loss, [s])
    assert np.isfinite(loss.item())
    # a confidently accepted impostor: p rounds to 1, d loss / d s = w * p
    assert gs[0] == 100.0
    assert gs[1] < 0.0
    assert "WARN" in capsys.readouterr().out


def test_threshold_agrees_with_probability_half(rng):
    for _ in range(10_000):
        w, b = rng.uniform(-20, 20), rng.uniform(-20, 20)
        s = rng.uniform(-1, 1)
        head = E2eHead(w, b)
        thr = head.threshold()
        by_score = s >= thr if w > 0 else s <= thr
        by_prob = sigmoid(w * s + b) >= 0.5
        if abs(w * s + b) > 1e-9:
            assert by_score == by_prob


def test_single_speaker_softmax_loss_is_zero(rng):
    y = Tensor(rng.standard_normal(3))
    loss = softmax_loss(GradTape(), y, 0, Tensor(rng.standard_normal((1, 3))), Tensor(rng.standard_normal(1)))
    assert loss.item() == 0.0


def test_softmax_loss_matches_direct_formula(rng):
    for _ in range(20):
        y = rng.standard_normal(4)
        W, b = rng.standard_normal((5, 4)), rng.standard_normal(5)
        spk = int(rng.integers(5))
        z = W @ y + b
        direct = -np.log(np.exp(z[spk]) / np.exp(z).sum())
        got = softmax_loss(GradTape(), Tensor(y), spk, Tensor(W), Tensor(b)).item()
        assert got == pytest.approx(direct, abs=1e-12)


def test_sampled_softmax_never_exceeds_full_softmax(rng):
    K, spk = 6, 2
    y = Tensor(rng.standard_normal(3))
    W, b = Tensor(rng.standard_normal((K, 3))), Tensor(rng.standard_normal(K))
    full = softmax_loss(GradTape(), y, spk, W, b).item()
    others = [k for k in range(K) if k != spk]
    for mask in range(1 << len(others)):
        cand = [spk] + [k for i, k in enumerate(others) if mask >> i & 1]
        loss = sampled_softmax_loss(GradTape(), y, spk, W, b, candidates=cand).item()
        assert loss <= full + 1e-12
        if len(cand) == 1:
            assert loss == 0.0
