import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tftdiag.model import TFT, ModelConfig, NumericFault
from tftdiag.tensor import Rng, Tensor
from tftdiag.training import (LOG_FLOOR, Adam, EpochRecord, TrainConfig, TrainingDiverged, cross_entropy,
                              read_history, smoothed_cross_entropy, smoothed_targets, steps_per_epoch, train,
                              write_history)

TINY = ModelConfig(n_t=4, n_f=6, c=1, d_model=8, d_ff=16, h=2, n_blocks=1, n_cla=3)


def toy_data(n, cfg=TINY, seed=0):
    r = Rng(seed)
    y = np.arange(n) % cfg.n_cla
    x = r.uniform(0, 1, (n, cfg.n_t, cfg.n_f, cfg.c)) * 0.3
    x[np.arange(n), :, y % cfg.n_f] += 1.0  # class-dependent bright frequency column
    return x, y


# -- loss -----------------------------------------------------------------

@pytest.mark.parametrize("eps", [0.0, 0.1, 0.5, 0.99])
def test_uniform_probabilities_give_log_k(eps):
    loss = smoothed_cross_entropy(np.full(7, 1 / 7), 3, eps).item()
    assert loss == pytest.approx(math.log(7), abs=1e-9)
    assert math.log(7) == pytest.approx(1.94591, abs=1e-5)


def test_certain_prediction_without_smoothing_costs_nothing():
    p = np.array([0.0, 1.0, 0.0])
    # exactly -ln(1 + 1e-12) because of the log floor
    assert smoothed_cross_entropy(p, 1, 0.0).item() == -math.log(1.0 + LOG_FLOOR)


def test_smoothed_target_values():
    q = smoothed_targets([2], 7, 0.1)[0]
    assert q[2] == pytest.approx(0.9 + 0.1 / 7) and q[2] == pytest.approx(0.914286, abs=1e-6)
    assert np.allclose(np.delete(q, 2), 0.1 / 7) and q[0] == pytest.approx(0.014286, abs=1e-6)
    assert q.sum() == pytest.approx(1.0, abs=1e-15)


def test_label_out_of_range():
    with pytest.raises(ValueError):
        smoothed_cross_entropy(np.full(3, 1 / 3), 3, 0.1)
    with pytest.raises(ValueError):
        smoothed_cross_entropy(np.full((2, 3), 1 / 3), [0, -1], 0.1)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 9), st.integers(1, 6), st.floats(0.0, 0.95), st.integers(0, 2**31))
def test_loss_is_bounded_below(k, n, eps, seed):
    r = Rng(seed)
    logits = r.normal(0, 5, (n, k))
    p = np.exp(logits - logits.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    y = r.generator.integers(0, k, n)
    # the 1e-12 floor inside the log lets a perfect prediction dip to -ln(1 + 1e-12)
    assert smoothed_cross_entropy(p, y, eps).item() >= -math.log1p(LOG_FLOOR) - 1e-15


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 9), st.integers(1, 6), st.integers(0, 2**31))
def test_zero_smoothing_equals_plain_cross_entropy_bitwise(k, n, seed):
    r = Rng(seed)
    p = r.uniform(0, 1, (n, k))
    p /= p.sum(1, keepdims=True)
    y = r.generator.integers(0, k, n)
    a = smoothed_cross_entropy(p, y, 0.0).item()
    b = cross_entropy(p, y).item()
    assert a == b


def test_batch_loss_is_mean_of_samples():
    p = np.array([[0.7, 0.2, 0.1], [0.1, 0.1, 0.8]])
    y = [0, 2]
    each = [smoothed_cross_entropy(p[i], y[i], 0.1).item() for i in range(2)]
    assert smoothed_cross_entropy(p, y, 0.1).item() == pytest.approx(np.mean(each), abs=1e-15)


# -- Adam -----------------------------------------------------------------

def scalar_param(v=0.0):
    return {"w": Tensor(np.array([v]), requires_grad=True)}


def test_zero_gradient_leaves_parameters_and_advances_time():
    params = scalar_param(1.5)
    opt = Adam(params, lr=0.1)
    params["w"].grad = np.zeros(1)
    opt.step()
    assert params["w"].data[0] == 1.5 and opt.t == 1


@pytest.mark.parametrize("g", [3.0, -0.02, 1e-3])
def test_first_step_is_sign_sized(g):
    params = scalar_param()
    opt = Adam(params, lr=0.01)
    params["w"].grad = np.array([g])
    opt.step()
    assert params["w"].data[0] == pytest.approx(-0.01 * g / (abs(g) + 1e-8), rel=1e-12)


def test_two_unit_gradient_steps():
    # oracle: hand-rolled recurrence
    m = v = theta = 0.0
    for t in (1, 2):
        m = 0.9 * m + 0.1
        v = 0.999 * v + 0.001
        theta -= 0.1 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    params = scalar_param()
    opt = Adam(params, lr=0.1)
    for _ in range(2):
        params["w"].grad = np.array([1.0])
        opt.step()
    assert params["w"].data[0] == pytest.approx(theta, abs=1e-12)
    assert params["w"].data[0] == pytest.approx(-0.2, abs=1e-6)


def test_zero_learning_rate_is_identity():
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)  # configs refuse it, the optimizer itself accepts it
    params = {"a": Tensor(Rng(0).normal(shape=(3, 2)), requires_grad=True)}
    before = params["a"].data.copy()
    opt = Adam(params, lr=0.0)
    params["a"].grad = Rng(1).normal(shape=(3, 2))
    opt.step()
    assert np.array_equal(params["a"].data, before)


def test_non_finite_gradient_names_parameter():
    params = {"head.W1": Tensor(np.zeros(2), requires_grad=True)}
    params["head.W1"].grad = np.array([np.nan, 0.0])
    with pytest.raises(NumericFault, match="head.W1"):
        Adam(params).step()


# -- training loop --------------------------------------------------------

def test_step_count_keeps_partial_batch():
    x, y = toy_data(60)
    res = train(TFT(TINY), (x, y), (x[:6], y[:6]), TrainConfig(batch_size=32, max_epochs=1))
    assert res.steps == 2 == steps_per_epoch(60, 32)
    assert len(res.history) == 1


def test_every_parameter_receives_gradient():
    model = TFT(TINY, seed=3)
    x, y = toy_data(8, seed=4)
    out = model(x, training=True, rng=Rng(5))
    smoothed_cross_entropy(out.probabilities, y, 0.1).backward()
    dead = [k for k, p in model.params.items() if p.grad is None or not np.any(p.grad)]
    assert dead == []


def test_training_is_bitwise_reproducible(tmp_path):
    x, y = toy_data(24)
    cfg = TrainConfig(batch_size=8, max_epochs=4, seed=7)
    runs = []
    for i in range(2):
        res = train(TFT(TINY, seed=1), (x, y), (x[:6], y[:6]), cfg)
        write_history(tmp_path / f"h{i}.tsv", res.history)
        runs.append((tmp_path / f"h{i}.tsv").read_bytes())
    assert runs[0] == runs[1]


def test_training_reduces_loss():
    x, y = toy_data(30)
    res = train(TFT(TINY, seed=1), (x, y), (x, y), TrainConfig(batch_size=10, max_epochs=25, lr=3e-3))
    assert res.history[-1].train_loss < res.history[0].train_loss
    assert res.history[-1].train_acc == 1.0


def test_selection_prefers_accuracy_then_loss():
    x, y = toy_data(30)
    res = train(TFT(TINY, seed=1), (x, y), (x[:9], y[:9]), TrainConfig(batch_size=10, max_epochs=20, lr=3e-3))
    best = max(res.history, key=lambda r: (r.val_acc, -r.val_loss))
    assert res.best_epoch == best.epoch
    model = TFT(TINY)
    model.load_state(res.best_state)
    probs = model.predict_proba(x[:9])
    assert np.mean(probs.argmax(1) == y[:9]) == best.val_acc


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_keeps_last_good_state():
    x, y = toy_data(12)
    x[5, 0, 0, 0] = np.inf
    model = TFT(TINY, seed=2)
    start = model.state()
    with pytest.raises(TrainingDiverged) as info:
        train(model, (x, y), (x[:3], y[:3]), TrainConfig(batch_size=4, max_epochs=2))
    assert info.value.best_state is not None
    assert all(np.array_equal(start[k], v) for k, v in info.value.best_state.items())


def test_history_file_format(tmp_path):
    hist = [EpochRecord(1, 1.25, 0.5, 1.5, 0.25), EpochRecord(2, 0.1 + 0.2, 1.0, 0.3, 1.0)]
    write_history(tmp_path / "h.tsv", hist)
    lines = (tmp_path / "h.tsv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "1\t1.25\t0.5\t1.5\t0.25"
    assert read_history(tmp_path / "h.tsv") == hist
