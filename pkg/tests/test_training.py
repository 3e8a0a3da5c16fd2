import numpy as np
import pytest

from traffic_dtl.autodiff import NumericalError
from traffic_dtl.models import RnnHyper, build_cnn, build_model, build_rnn
from traffic_dtl.pipeline import DataError, make_dataset, window
from traffic_dtl.synth import generate_frame, load_profile
from traffic_dtl.training import (
    EvalResult,
    RunLedger,
    TrainConfig,
    average,
    evaluate,
    frozen_prefix,
    persistence,
    replicate,
    split,
    task_seed,
    train,
)


@pytest.fixture(scope="module")
def eb():
    frame = generate_frame(load_profile("EB", days=2), seed=1)
    return make_dataset(frame, 10, 0, 1.5, site="EB")


@pytest.fixture(scope="module")
def eb_split(eb):
    tr, va = split(eb, 1.5)
    # small slices keep the unit tests quick
    return tr.subset(np.arange(0, len(tr), 8)), va.subset(np.arange(0, len(va), 4))


# -- split -----------------------------------------------------------------


def test_split_seven_day_set_six_train_days():
    frame = generate_frame(load_profile("EB", missing_rate=0.0), seed=1)
    ds = make_dataset(frame, 10, 0, 6)
    tr, va = split(ds, 6)
    assert len(va) == 720 - 10 and len(tr) == 6 * 720 - 10 - 0
    assert tr.target_index.max() < va.start_index.min()


def test_split_boundary_rule(eb):
    tr, va = split(eb, 1.0)
    cut = int(np.searchsorted(eb.row_timestamps, eb.row_timestamps[0] + 86400))
    assert np.all(tr.target_index < cut)
    assert np.all(va.start_index >= cut)
    straddle = (eb.start_index < cut) & (eb.target_index >= cut)
    assert len(tr) + len(va) + straddle.sum() == len(eb)
    assert not set(tr.start_index) & set(va.start_index)


def test_split_errors(eb):
    with pytest.raises(DataError):
        split(eb, 5)
    s = np.arange(40.0)[:, None]
    with pytest.raises(DataError):
        split(window(s, s, 3, 0), 1)


# -- evaluation --------------------------------------------------------------


class _Const:
    def __init__(self, value):
        self.value = value

    def predict(self, X, batch_size=None):
        return np.broadcast_to(self.value, (len(X), self.value.shape[-1])).copy()


def test_evaluate_perfect_and_zero_predictors(eb):
    perfect = _Const(np.zeros(5))
    perfect.predict = lambda X, batch_size=None: eb.Y.copy()
    assert evaluate(perfect, eb).mse == 0.0
    centered = eb.subset(np.arange(len(eb)))
    centered.Y = eb.Y - eb.Y.mean(axis=0)
    res = evaluate(_Const(np.zeros(5)), centered)
    assert res.mse == pytest.approx(centered.Y.var(axis=0).mean())
    assert res.mse == pytest.approx(np.mean(res.per_output_mse))


def test_persistence_uses_last_input_targets(eb):
    res = persistence(eb)
    want = ((eb.Y - eb.Y_last) ** 2).mean(axis=0)
    assert np.allclose(res.per_output_mse, want)


# -- training ----------------------------------------------------------------


def test_overfit_small_set():
    # regularisation off and a slightly larger step so 200 epochs suffice
    frame = generate_frame(load_profile("EB", days=2), seed=1)
    ds = make_dataset(frame, 10, 0, 1.5).subset(np.arange(0, 320, 10))
    assert len(ds) == 32
    cfg = TrainConfig(epochs=200, batch_size=8, patience=10_000, lr=3e-3)
    for model in (build_rnn(10, hyper=RnnHyper(dropout_last=0.0), seed=1), build_cnn(10, seed=1)):
        res = train(model, ds, cfg, None, seed=1)
        assert evaluate(res.model, ds).mse < 1e-3, model.arch


def test_all_frozen_changes_nothing(eb_split):
    tr, va = eb_split
    m = build_cnn(10, seed=1)
    before = m.state()
    m.freeze_all()
    res = train(m, tr, TrainConfig(epochs=3), va, seed=1)
    assert res.epochs_used == 0 and res.wall_time == 0.0 and res.steps == 0
    after = res.model.state()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_only_unfrozen_params_move(eb_split):
    tr, va = eb_split
    m = build_rnn(10, seed=2)
    for layer in m.layers[:-1]:
        layer.set_frozen(True)
    before = m.state()
    res = train(m, tr, TrainConfig(epochs=2), va, seed=1)
    after = res.model.state()
    for k in before:
        moved = not np.array_equal(before[k], after[k])
        assert moved == k.startswith("5.dense"), k


def test_bit_reproducible(eb_split):
    tr, va = eb_split
    runs = [train(build_cnn(10, seed=4), tr, TrainConfig(epochs=2), va, seed=9) for _ in range(2)]
    a, b = runs[0].model.state(), runs[1].model.state()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert runs[0].final.mse == runs[1].final.mse


def test_early_stopping_and_best_weights(eb_split):
    tr, va = eb_split
    res = train(build_cnn(10, seed=1), tr, TrainConfig(epochs=30, patience=1, lr=5e-2), va, seed=1)
    assert res.epochs_used < 30
    assert res.final.mse == min(h.mse for h in res.history)
    assert evaluate(res.model, va).mse == pytest.approx(res.final.mse, rel=1e-9)


def test_epoch_cap_respected(eb_split):
    tr, va = eb_split
    res = train(build_cnn(10, seed=1), tr, TrainConfig(epochs=2, patience=100), va, seed=1)
    assert res.epochs_used == 2 and len(res.history) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_aborts_with_op_name(eb_split):
    tr, va = eb_split
    with pytest.raises(NumericalError) as exc:
        train(build_cnn(10, seed=1), tr, TrainConfig(epochs=2, lr=1e300), va, seed=1)
    assert exc.value.op
    assert "epoch" in str(exc.value)


def test_shape_mismatch(eb_split):
    tr, _ = eb_split
    with pytest.raises(ValueError):
        train(build_cnn(15), tr, TrainConfig(epochs=1))


def test_frozen_prefix_cache_matches_uncached(eb_split):
    tr, va = eb_split
    results = []
    for cache in (True, False):
        m = build_cnn(10, seed=3)
        for layer in m.layers[:3]:
            layer.set_frozen(True)
        cfg = TrainConfig(epochs=2, cache_frozen_prefix=cache)
        results.append(train(m, tr, cfg, va, seed=5).final.mse)
    assert frozen_prefix(m) == 3
    assert results[0] == pytest.approx(results[1], rel=1e-9)


def test_frozen_prefix_stops_at_dropout():
    m = build_rnn(10)
    m.freeze_all()
    # first GRU has no dropout, the last has 0.2
    assert frozen_prefix(m) == 3


def test_replicate_three_seeds(eb_split):
    tr, va = eb_split
    runs, mean = replicate(lambda s: build_cnn(10, seed=s), tr, va, TrainConfig(epochs=1, seeds=(1, 2, 3)))
    assert len(runs) == 3
    assert mean.mse == pytest.approx(np.mean([r.final.mse for r in runs]))


def test_average():
    res = average([EvalResult(1.0, [1.0, 1.0], 2, 1.0), EvalResult(3.0, [2.0, 4.0], 4, 3.0)])
    assert res.mse == 2.0 and res.per_output_mse == [1.5, 2.5] and res.epochs_used == 3


def test_ledger_and_task_seed(tmp_path):
    led = RunLedger(tmp_path / "runs")
    assert led.records() == []
    led.append({"run_id": "a", "x": 1})
    led.append({"run_id": "b", "x": 2})
    assert [r["x"] for r in led.records()] == [1, 2] and led.run_ids() == {"a", "b"}
    assert task_seed(1, "t") == task_seed(1, "t") != task_seed(2, "t")


def test_config_digest_changes():
    assert TrainConfig().digest() == TrainConfig().digest() != TrainConfig(lr=0.1).digest()
    assert TrainConfig().batch_for("rnn") == 128 and TrainConfig().batch_for("cnn") == 256
    assert build_model("cnn", 10).arch == "cnn"
