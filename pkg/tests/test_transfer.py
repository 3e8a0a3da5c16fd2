import numpy as np
import pytest

from traffic_dtl.models import build_cnn, build_rnn
from traffic_dtl.pipeline import make_dataset
from traffic_dtl.synth import generate_frame, load_profile
from traffic_dtl.training import EvalResult, TrainConfig, split
from traffic_dtl.transfer import (
    ArchitectureMismatch,
    FreezeMask,
    SweepMember,
    SweepResult,
    all_masks,
    architecture_diff,
    sweep,
    transfer,
)


@pytest.fixture(scope="module")
def student():
    frame = generate_frame(load_profile("EB", days=2), seed=2)
    tr, va = split(make_dataset(frame, 10, 0, 1.5, site="EB"), 1.5)
    return tr.subset(np.arange(0, len(tr), 10)), va.subset(np.arange(0, len(va), 5))


def test_all_masks():
    labels = [m.label for m in all_masks()]
    assert len(labels) == 8 == len(set(labels))
    assert labels[0] == "FFF" and labels[-1] == "TTT"
    assert FreezeMask.parse("TFT").retrain == (True, False, True)
    for bad in ("TF", "TFX", "tft"):
        with pytest.raises(ValueError):
            FreezeMask.parse(bad)


def test_mask_targets_last_three_weight_layers():
    rnn, cnn = build_rnn(10), build_cnn(10)
    # RNN: GRU 32, GRU 16, Dense.  CNN: conv 3, conv 4, Dense.
    assert FreezeMask.parse("TTT").layer_flags(rnn) == [True, True, False, False, True, False]
    assert FreezeMask.parse("TFF").layer_flags(cnn) == [True, True, False, True, True, True, True]
    assert FreezeMask.parse("FFT").trainable_param_count(rnn) == 16 * 10 * 5 + 5
    assert FreezeMask.parse("FFF").trainable_param_count(cnn) == 0


@pytest.mark.parametrize("arch", ["rnn", "cnn"])
def test_freeze_semantics_every_mask(student, arch):
    tr, va = student
    teacher = build_rnn(10, seed=7) if arch == "rnn" else build_cnn(10, seed=7)
    t_state = teacher.state()
    cfg = TrainConfig(epochs=1, seeds=(1,))
    for mask in all_masks():
        res = transfer(teacher, tr, mask, cfg, va, seed=1)
        after = res.model.state()
        flags = mask.layer_flags(res.model)
        expected = sum(l.param_count() for l, f in zip(res.model.layers, flags) if not f)
        assert res.model.trainable_param_count() == expected == mask.trainable_param_count(res.model)
        for name, value in after.items():
            layer_idx = int(name.split(".")[0])
            if flags[layer_idx]:
                assert np.array_equal(value, t_state[name]), (mask.label, name)
            elif mask.label != "FFF":
                assert not np.array_equal(value, t_state[name]), (mask.label, name)
    # the teacher itself is never modified
    assert all(np.array_equal(teacher.state()[k], t_state[k]) for k in t_state)


def test_fff_costs_nothing(student):
    tr, va = student
    res = transfer(build_cnn(10, seed=1), tr, FreezeMask.parse("FFF"), TrainConfig(epochs=5), va)
    assert res.epochs_used == 0 and res.wall_time == 0.0 and res.final is not None


def test_architecture_mismatch(student):
    tr, va = student
    with pytest.raises(ArchitectureMismatch):
        transfer(build_cnn(10), tr, FreezeMask.parse("TTT"), TrainConfig(epochs=1), va, student=build_rnn(10))
    with pytest.raises(ArchitectureMismatch, match="do not fit"):
        transfer(build_cnn(15), tr, FreezeMask.parse("TTT"), TrainConfig(epochs=1), va)
    assert architecture_diff(build_cnn(10), build_cnn(10, seed=3)) == []
    assert architecture_diff(build_cnn(10), build_cnn(15))


def test_sweep_table_and_best(student):
    tr, va = student
    res = sweep(build_cnn(10, seed=1), tr, va, TrainConfig(epochs=1, seeds=(1, 2)), all_masks()[:3])
    table = res.table()
    assert [r["mask"] for r in table] == ["FFF", "FFT", "FTF"]
    assert sum(r["best"] for r in table) == 1
    assert all(len(m.runs) == 2 for m in res.members)
    best = min(table, key=lambda r: r["mse"])
    assert best["best"]


def test_best_tie_prefers_fewer_params():
    a = SweepMember(FreezeMask.parse("TTT"), 100, [EvalResult(0.5, [0.5])])
    b = SweepMember(FreezeMask.parse("FFT"), 10, [EvalResult(0.5, [0.5])])
    assert SweepResult([a, b]).best.mask.label == "FFT"
    assert SweepResult([a, b]).average_trainable_params() == 55
