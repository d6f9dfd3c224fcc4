import numpy as np
import pytest

from hivit.bench import analytic_ratios, run_bench
from hivit.config import make_config
from hivit.verify import (check_checkpoint, check_grad, check_locality, check_optimizer_purity, check_oracle,
                          run_suite)

TOY = make_config("toy")


def test_suite_green_on_toy():
    results = run_suite(TOY, oracle_trials=3, locality_trials=5, grad_params=20)
    assert [r.name for r in results] == ["oracle[float32]", "oracle[float64]", "unit-locality", "grad-check",
                                         "optimizer-purity", "checkpoint"]
    assert all(r.passed for r in results), [r.line() for r in results if not r.passed]


def test_cross_unit_mix_fails_locality():
    r = check_locality(TOY.replace(debug_cross_unit_mix=True), trials=5)
    assert not r.passed and r.value == 5


def test_zero_tolerance_fails_on_reassociation():
    r = check_oracle(TOY, trials=2, tol=0.0)
    assert not r.passed
    # the only difference is summation order, so the main-stage error is tiny but nonzero
    assert 0 < r.extra["err_main"] < 1e-5


def test_grad_check_detects_wrong_gradient(monkeypatch):
    import hivit.tensor as T
    real = T.gelu

    def bad_gelu(x):
        out = real(x)
        fn = out._backward
        out._backward = lambda g: tuple(v * 1.01 for v in fn(g))
        return out

    monkeypatch.setattr("hivit.nn.gelu", bad_gelu)
    assert not check_grad(TOY, n_params=20).passed


def test_individual_checks_pass():
    assert check_optimizer_purity().passed
    assert check_checkpoint(TOY).passed


def test_bench_report_fields_and_flop_ratios():
    rep = run_bench(TOY, 0.75, batch=2, repeats=2)
    assert rep.visible_units == 4 and rep.total_units == 16
    assert rep.flop_ratio_attention == pytest.approx(1 / 16)
    assert rep.flop_ratio_token == pytest.approx(1 / 4)
    assert rep.traced_flop_ratio_encoder == pytest.approx(rep.flop_ratio_encoder, rel=1e-9)
    assert rep.sparse_ms > 0 and rep.dense_ms > 0 and "median of 2" in rep.summary()


def test_nearly_all_visible_is_close_to_dense():
    cfg = make_config("small")
    an = analytic_ratios(cfg, 0.01)
    assert an["token"] == pytest.approx(15 / 16)
    rep = run_bench(cfg, 0.01, batch=4, repeats=5)
    assert 0.7 < rep.wall_ratio < 1.4
