import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ringbalance.core import (
    AllocationState,
    DatasetSpec,
    EpochReport,
    EpochTiming,
    ExperimentConfig,
    GradientBuffer,
    ModelSpec,
    RunMode,
    StabilitySpec,
    WorkerProfile,
    to_ns,
    validate,
)

from conftest import make_config


def test_to_ns_rounds():
    assert to_ns(0.001) == 1_000_000
    assert to_ns(1e-9) == 1


def test_worker_profile_speed():
    p = WorkerProfile(0, 0.002)
    assert p.cost_ns == 2_000_000
    assert p.speed == pytest.approx(500.0)


class TestAllocationState:
    def test_initial(self):
        s = AllocationState.initial([10, 10])
        assert s.total == 20 and s.trajectory == [(10, 10)]

    def test_sum_checked(self):
        with pytest.raises(ValueError):
            AllocationState((10, 9), 20)


class TestEpochTiming:
    def test_from_compute(self):
        t = EpochTiming.from_compute([10, 20, 15], 5)
        assert t.t_w == (10, 0, 5)
        assert t.T == (25, 25, 25)
        t.check()

    @given(st.lists(st.integers(0, 10**12), min_size=2, max_size=16), st.integers(0, 10**9))
    def test_identity_and_slowest_waits_zero(self, t_s, t_c):
        t = EpochTiming.from_compute(t_s, t_c)
        t.check()
        assert min(t.t_w) == 0
        assert len(set(t.T)) == 1

    def test_sum_preserves_identity(self):
        a = EpochTiming.from_compute([1, 4], 2)
        b = EpochTiming.from_compute([6, 3], 2)
        total = a + b
        total.check()
        assert total == EpochTiming.zero(2) + total

    def test_check_detects_violation(self):
        with pytest.raises(AssertionError):
            EpochTiming((1, 2), (1, 0), 0, (2, 3)).check()


def test_epoch_report_derived_times():
    t = EpochTiming.from_compute([10, 20], 3) + EpochTiming.from_compute([10, 20], 3)
    r = EpochReport(0, (10, 10), t, 0.5, 2)
    assert r.epoch_time == 46
    assert r.compute_time == 40
    assert r.mean_compute() == (10.0, 20.0)


def test_gradient_buffer_add():
    g = GradientBuffer([1.0, 2.0], 3) + GradientBuffer([0.5, 0.5], 2)
    np.testing.assert_array_equal(g.values, [1.5, 2.5])
    assert g.sample_count == 5 and len(g) == 2
    with pytest.raises(ValueError):
        GradientBuffer([1.0], -1)


class TestValidate:
    def test_single_worker(self):
        assert "ring requires n >= 2" in validate(make_config([0.001]))

    def test_static_valid(self):
        assert validate(make_config([0.001, 0.002], "static", [7, 13])) == []

    def test_zero_learning_rate(self):
        assert "learning_rate must be positive" in validate(make_config([0.001, 0.002], learning_rate=0.0))

    def test_weights_must_sum_to_C(self):
        problems = validate(make_config([0.001, 0.002], "static", [7, 12]))
        assert any("expected C=20" in p for p in problems)

    def test_static_needs_weights(self):
        assert "static mode requires weights" in validate(make_config([0.001, 0.002], "static"))

    def test_floor_feasibility(self):
        problems = validate(make_config([0.001] * 3, C=2))
        assert any("cannot give 3 workers" in p for p in problems)

    def test_dataset_too_small_for_one_aggregation(self):
        problems = validate(make_config([0.001, 0.002], dataset=DatasetSpec(size=50)))
        assert any("C*minibatch" in p for p in problems)

    def test_unknown_kinds(self):
        cfg = make_config([0.001, 0.002], "bogus", model=ModelSpec("tree"))
        problems = validate(cfg)
        assert any("unknown mode" in p for p in problems)
        assert any("unknown model" in p for p in problems)

    def test_reports_every_problem(self):
        cfg = make_config([0.0, 0.002], learning_rate=-1.0, epochs=0, stability=StabilitySpec(window=1))
        assert len(validate(cfg)) >= 4


class TestConfigSerialization:
    def test_round_trip(self):
        cfg = make_config([0.001, 0.002], "static", [13, 7], jitter=0.05,
                          model=ModelSpec("mlp", hidden=8), epochs=3, seed=9)
        again = ExperimentConfig.from_dict(json.loads(cfg.to_json()))
        assert again == cfg

    def test_file_round_trip(self, tmp_path):
        cfg = make_config([0.001, 0.002, 0.003])
        cfg.dump(tmp_path / "c.json")
        assert ExperimentConfig.load(tmp_path / "c.json") == cfg

    def test_minimal_dict_uses_defaults(self):
        cfg = ExperimentConfig.from_dict(
            {"workers": [{"per_sample_cost": 0.001}, {"per_sample_cost": 0.002}], "mode": "adaptive"}
        )
        assert [w.rank for w in cfg.workers] == [0, 1]
        assert cfg.mode == RunMode("adaptive")
        assert cfg.C == 20 and cfg.minibatch == 5
        assert validate(cfg) == []
