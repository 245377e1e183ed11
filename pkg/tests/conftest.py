"""Shared fixtures.

Fast unit tests use the tiny task; the empirical acceptance checks share one
session-scoped bundle of fully trained teachers and students (three seeds)
so the expensive runs happen exactly once.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import pytest

from distilab.data import Dataset, make_mixture
from distilab.distill import DistillConfig, distill_be, distill_latentbe
from distilab.nets import BEMLP, MLP, ModelSpec, build_be
from distilab.optim import OptimConfig, steps_per_epoch, train_teachers
from distilab.seeding import rng_stream

DEFAULT_TASK = dict(num_classes=3, dim=2, n_per_class=500, spread=0.6, seed=7)
ACCEPT_SEEDS = (0, 1, 2)


@pytest.fixture(scope="session")
def default_task():
    return make_mixture(**DEFAULT_TASK)


@pytest.fixture(scope="session")
def tiny_task():
    return make_mixture(3, 2, 60, 0.6, seed=5)


@pytest.fixture(scope="session")
def tiny_spec():
    return ModelSpec(2, 3, (16, 16))


@pytest.fixture(scope="session")
def tiny_optim():
    return OptimConfig(epochs=8, warmup_epochs=2, batch_size=32, seed=0)


@pytest.fixture(scope="session")
def tiny_teachers(tiny_task, tiny_spec, tiny_optim):
    train, _, _ = tiny_task
    return train_teachers(tiny_spec, train, 2, tiny_optim)


@dataclass
class SeedRun:
    teachers: list[MLP]
    be_student: BEMLP
    latent_avg_none: MLP
    latent_be_none: BEMLP
    latent_avg_tdiv: MLP
    latent_be_tdiv: BEMLP
    mid_snapshot: BEMLP


@dataclass
class Bundle:
    train: Dataset
    val: Dataset
    test: Dataset
    spec: ModelSpec
    runs: dict = field(default_factory=dict)


@pytest.fixture(scope="session")
def bundle(default_task) -> Bundle:
    """Teachers plus all three student variants, trained at the default
    desk-scale settings for each acceptance seed."""
    train, val, test = default_task
    spec = ModelSpec(2, 3, (64, 64))
    out = Bundle(train, val, test, spec)
    for seed in ACCEPT_SEEDS:
        optim = OptimConfig(seed=seed)
        cfg = DistillConfig(num_teachers=2, optim=optim)
        teachers = train_teachers(spec, train, 2, optim)

        be_student = build_be(spec, rng_stream(seed, "init"), "random_sign", members=2)
        distill_be(teachers, be_student, train, cfg)

        avg_none, lbe_none = distill_latentbe(teachers, spec, train, cfg)

        snap: dict = {}
        half = cfg.optim.epochs * steps_per_epoch(len(train), cfg.optim.batch_size) // 2

        def hook(step, student, _snap=snap, _half=half):
            if step == _half:
                _snap["model"] = student.copy()

        cfg_tdiv = replace(cfg, perturbation="tdiv_sdiv")
        avg_tdiv, lbe_tdiv = distill_latentbe(teachers, spec, train, cfg_tdiv,
                                              step_hook=hook)
        out.runs[seed] = SeedRun(teachers, be_student, avg_none, lbe_none,
                                 avg_tdiv, lbe_tdiv, snap["model"])
    return out
