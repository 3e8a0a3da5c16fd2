"""Teacher-to-student transfer with frozen layers.

Only the last three parameterized layers may be retrained; every earlier
layer keeps the teacher's weights.  A sweep tries all 2**3 retrain patterns.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .models import ModelGraph
from .pipeline import WindowedDataset
from .training import EvalResult, TrainConfig, TrainResult, average, evaluate, train

N_TUNABLE = 3


class ArchitectureMismatch(ValueError):
    pass


@dataclass(frozen=True)
class FreezeMask:
    """``retrain[i]`` says whether the i-th of the last three weight layers is retrained."""

    retrain: tuple[bool, bool, bool]

    @property
    def label(self) -> str:
        return "".join("T" if r else "F" for r in self.retrain)

    @classmethod
    def parse(cls, label: str) -> "FreezeMask":
        if len(label) != N_TUNABLE or set(label) - {"T", "F"}:
            raise ValueError(f"mask label must be 3 chars of T/F, got '{label}'")
        return cls(tuple(c == "T" for c in label))

    def layer_flags(self, model: ModelGraph) -> list[bool]:
        """Per-layer frozen flags aligned with ``model.layers``."""
        tunable = model.parameterized_indices()[-N_TUNABLE:]
        if len(tunable) < N_TUNABLE:
            raise ValueError(f"model has only {len(tunable)} parameterized layers")
        frozen = [True] * len(model.layers)
        for idx, r in zip(tunable, self.retrain):
            frozen[idx] = not r
        return frozen

    def apply(self, model: ModelGraph) -> ModelGraph:
        for layer, f in zip(model.layers, self.layer_flags(model)):
            layer.set_frozen(f)
        return model

    def trainable_param_count(self, model: ModelGraph) -> int:
        return sum(layer.param_count() for layer, f in zip(model.layers, self.layer_flags(model)) if not f)


def all_masks() -> list[FreezeMask]:
    """All 8 masks, all-frozen first."""
    return [FreezeMask(bits) for bits in itertools.product((False, True), repeat=N_TUNABLE)]


def architecture_diff(a: ModelGraph, b: ModelGraph) -> list[str]:
    diffs = []
    sa, sb = a.signature(), b.signature()
    for key in ("arch", "input_shape", "output_dim"):
        if sa[key] != sb[key]:
            diffs.append(f"{key}: {sa[key]} != {sb[key]}")
    la, lb = sa["layers"], sb["layers"]
    if len(la) != len(lb):
        diffs.append(f"layer count: {len(la)} != {len(lb)}")
    for i, (x, y) in enumerate(zip(la, lb)):
        if x != y:
            diffs.append(f"layer {i}: {x} != {y}")
    return diffs


def transfer(
    teacher: ModelGraph,
    student_train: WindowedDataset,
    mask: FreezeMask,
    config: TrainConfig,
    student_val: WindowedDataset | None = None,
    seed: int = 0,
    student: ModelGraph | None = None,
) -> TrainResult:
    """Warm-start a student from the teacher, freeze per ``mask`` and retrain.

    ``student``, when given, only fixes the expected architecture; its weights
    are replaced by the teacher's.
    """
    if student is not None:
        diffs = architecture_diff(teacher, student)
        if diffs:
            raise ArchitectureMismatch("teacher and student differ: " + "; ".join(diffs))
    if tuple(student_train.X.shape[1:]) != tuple(teacher.input_shape):
        raise ArchitectureMismatch(
            f"student windows {tuple(student_train.X.shape[1:])} do not fit teacher input {teacher.input_shape}"
        )
    model = teacher.clone()
    model.seed = seed
    mask.apply(model)
    return train(model, student_train, config, student_val, seed=seed)


@dataclass
class SweepMember:
    mask: FreezeMask
    trainable_params: int
    runs: list[EvalResult] = field(default_factory=list)
    steps: list[int] = field(default_factory=list)

    @property
    def mean(self) -> EvalResult:
        return average(self.runs)

    def row(self) -> dict[str, Any]:
        m = self.mean
        return {
            "mask": self.mask.label,
            "trainable_params": self.trainable_params,
            "mse": m.mse,
            "per_output_mse": m.per_output_mse,
            "epochs_used": float(np.mean([r.epochs_used for r in self.runs])),
            "wall_time": m.wall_time,
            "optimizer_steps": int(sum(self.steps)),
            "seeds": [r.seed for r in self.runs],
        }


@dataclass
class SweepResult:
    members: list[SweepMember]

    @property
    def best(self) -> SweepMember:
        return min(self.members, key=lambda m: (m.mean.mse, m.trainable_params))

    def member(self, label: str) -> SweepMember:
        for m in self.members:
            if m.mask.label == label:
                return m
        raise KeyError(label)

    def table(self) -> list[dict[str, Any]]:
        best = self.best.mask.label
        return [dict(m.row(), best=m.mask.label == best) for m in self.members]

    def average_trainable_params(self) -> float:
        return float(np.mean([m.trainable_params for m in self.members]))


def sweep(
    teacher: ModelGraph,
    student_train: WindowedDataset,
    student_val: WindowedDataset,
    config: TrainConfig,
    masks: Sequence[FreezeMask] | None = None,
) -> SweepResult:
    """Run every mask once per configured seed."""
    members = []
    for mask in masks or all_masks():
        member = SweepMember(mask, mask.trainable_param_count(teacher))
        for s in config.seeds:
            res = transfer(teacher, student_train, mask, config, student_val, seed=s)
            final = res.final if res.final is not None else evaluate(res.model, student_val)
            final.seed = s
            member.runs.append(final)
            member.steps.append(res.steps)
        members.append(member)
    return SweepResult(members)
