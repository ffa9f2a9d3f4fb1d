import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vaeloop.objective import (LOG_COLUMNS, AnnealSchedule, LossBreakdown, anneal_lambda,
                               append_log_row, format_log_rows, kl_gaussian_prior,
                               masked_reconstruction_error, read_log, reconstruction_error,
                               total_loss)
from vaeloop.numerics import Tensor, check_gradients


def test_kl_zero_at_prior():
    assert kl_gaussian_prior(Tensor(np.zeros(4)), Tensor(np.zeros(4))).item() == 0.0


def test_kl_example_values():
    # 0.5 * (mu^2 + e^lv - 1 - lv) per coordinate
    kl = kl_gaussian_prior(Tensor(np.array([1.0, 0.0])), Tensor(np.array([0.0, np.log(2.0)])))
    assert kl.item() == pytest.approx(0.5 + 0.5 * (1.0 - np.log(2.0)), rel=1e-14)


def test_kl_matches_monte_carlo():
    r = np.random.default_rng(7)
    mu, lv = r.normal(size=4), r.normal(scale=0.5, size=4)
    sd = np.exp(0.5 * lv)
    z = mu + sd * r.standard_normal((1_000_000, 4))
    log_q = (-0.5 * ((z - mu) / sd) ** 2 - np.log(sd)).sum(axis=1)
    log_p = (-0.5 * z ** 2).sum(axis=1)
    mc = (log_q - log_p).mean()
    closed = kl_gaussian_prior(Tensor(mu), Tensor(lv)).item()
    assert abs(closed - mc) / closed < 0.01


def test_kl_gradients():
    r = np.random.default_rng(0)
    mu = Tensor(r.normal(size=(2, 3)), requires_grad=True)
    lv = Tensor(r.normal(size=(2, 3)), requires_grad=True)
    rep = check_gradients(lambda: kl_gaussian_prior(mu, lv).sum(), {"mu": mu, "lv": lv})
    assert rep.ok, rep.failures


def test_anneal_examples():
    s = AnnealSchedule(10, 100)
    assert anneal_lambda(0, s) == 0.0
    assert anneal_lambda(5, s) == 0.5
    assert anneal_lambda(10, s) == 1.0
    assert anneal_lambda(99, s) == 1.0
    assert anneal_lambda(3, AnnealSchedule(0, 10)) == 1.0
    with pytest.raises(ValueError):
        anneal_lambda(100, s)
    with pytest.raises(ValueError):
        AnnealSchedule(11, 10)


def test_anneal_from_fraction():
    assert AnnealSchedule.from_fraction(0.1, 60).anneal_epochs == 6
    assert AnnealSchedule.from_fraction(0.0, 60).anneal_epochs == 0


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 300), st.floats(0.0, 1.0), st.integers(0, 2**31 - 1))
def test_anneal_non_decreasing_and_bounded(total, frac, seed):
    s = AnnealSchedule.from_fraction(frac, total)
    xs = np.sort(np.random.default_rng(seed).uniform(0, total, 50))
    xs = xs[xs < total]
    lam = [anneal_lambda(x, s) for x in xs]
    assert all(0.0 <= v <= 1.0 for v in lam)
    assert all(a <= b for a, b in zip(lam, lam[1:]))


def test_reconstruction_examples():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert reconstruction_error(Tensor(x), Tensor(x)).item() == 0.0
    assert reconstruction_error(Tensor(x + 1.0), Tensor(x)).item() == 2.0


def test_masked_reconstruction_ignores_padding():
    r = np.random.default_rng(0)
    targets = r.normal(size=(2, 5, 3))
    preds = [Tensor(r.normal(size=(2, 3))) for _ in range(5)]
    rec = masked_reconstruction_error(preds, targets, [5, 2]).data
    p = np.stack([q.data for q in preds], axis=1)
    assert rec[0] == pytest.approx(reconstruction_error(Tensor(p[0]), Tensor(targets[0])).item())
    assert rec[1] == pytest.approx(
        reconstruction_error(Tensor(p[1, :2]), Tensor(targets[1, :2])).item())


def test_masked_reconstruction_gradients():
    r = np.random.default_rng(1)
    targets = r.normal(size=(2, 4, 3))
    preds = {f"p{t}": Tensor(r.normal(size=(2, 3)), requires_grad=True) for t in range(4)}
    w = np.array([0.3, 0.7])
    rep = check_gradients(
        lambda: (masked_reconstruction_error(list(preds.values()), targets, [4, 3])
                 * Tensor(w)).sum(), preds)
    assert rep.ok, rep.failures


def test_total_loss():
    bd = total_loss(2.0, 0.5, 0.5)
    assert bd.total == 2.25 and bd.kl_term == 0.5
    assert total_loss(2.0, None, 1.0).as_row()["kl_term"] == "NA"
    with pytest.raises(ValueError):
        total_loss(1.0, -0.1, 1.0)
    with pytest.raises(ValueError):
        total_loss(1.0, 0.1, 1.5)


def test_log_roundtrip(tmp_path):
    path = tmp_path / "log.csv"
    rows = [(0, LossBreakdown(1.5, 0.25, 0.5, 1.625), "train"),
            (0, LossBreakdown(2.0, None, 1.0, 2.0), "validation")]
    for r in rows:
        append_log_row(path, *r)
    back = read_log(path)
    assert [b["split"] for b in back] == ["train", "validation"]
    assert back[0]["kl_term"] == 0.25 and back[1]["kl_term"] is None
    text = format_log_rows(rows)
    assert text.splitlines()[0] == ",".join(LOG_COLUMNS)
    assert open(path).read().splitlines()[0] == ",".join(LOG_COLUMNS)
