import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cabc.core import (
    Action,
    DatasetFormatError,
    LabeledPool,
    Observation,
    Outcome,
    Sample,
    TerminationReason,
    Trajectory,
    VehicleState,
    load_dataset,
    partition_trajectories,
    save_dataset,
)

from conftest import make_state, make_trajectory


class TestTypes:
    def test_state_requires_finite(self):
        with pytest.raises(ValueError):
            VehicleState(float("nan"), 0, 0, 0, 0, 0)
        with pytest.raises(ValueError):
            VehicleState(0, 0, 0, float("inf"), 0, 0)

    def test_s_wrapped(self):
        x = make_state(s=25.5)
        assert x.s_wrapped(10.0) == pytest.approx(5.5)
        assert x.s == 25.5  # stored unwrapped

    def test_action_bounds(self):
        with pytest.raises(ValueError):
            Action(1.2, 0.0)
        with pytest.raises(ValueError):
            Action(0.0, -1.0001)
        assert Action.clamped(3.0, -7.0) == Action(1.0, -1.0)

    def test_observation_length(self):
        y = Observation(1.0, 0.0, 0.0, (0.1, 0.2, 0.3))
        assert len(y.as_tuple()) == 6
        assert Observation.from_sequence(y.as_tuple()) == y

    def test_safe_label_domain(self):
        traj = make_trajectory(1, Outcome.SUCCESS)
        smp = traj.samples[0]
        with pytest.raises(ValueError):
            Sample(x=smp.x, y=smp.y, u_expert=smp.u_expert,
                   u_applied=smp.u_applied, x_next=smp.x_next, safe_label=2)

    def test_trajectory_outcome_reason_consistency(self):
        traj = make_trajectory(2, Outcome.SUCCESS)
        with pytest.raises(ValueError):
            Trajectory(samples=traj.samples, outcome=Outcome.SUCCESS,
                       termination_reason=TerminationReason.TIMEOUT)

    def test_trajectory_chaining_enforced(self):
        a = make_trajectory(2, Outcome.SUCCESS)
        b = make_trajectory(2, Outcome.SUCCESS, start=5.0)
        with pytest.raises(ValueError):
            Trajectory(samples=(a.samples[0], b.samples[1]), outcome=Outcome.SUCCESS,
                       termination_reason=TerminationReason.REACHED_TARGET)


class TestPartition:
    def test_basic_partition(self):
        pool = partition_trajectories([
            make_trajectory(10, Outcome.SUCCESS),
            make_trajectory(4, Outcome.FAILURE),
        ])
        assert pool.counts() == (10, 4, 0)

    def test_empty_input(self):
        assert partition_trajectories([]).counts() == (0, 0, 0)

    def test_success_only_leaves_query_empty(self):
        pool = partition_trajectories([make_trajectory(3, Outcome.SUCCESS)] * 3)
        assert pool.counts() == (9, 0, 0)

    def test_rejects_empty_trajectory(self):
        empty = Trajectory(samples=(), outcome=Outcome.FAILURE,
                           termination_reason=TerminationReason.TIMEOUT)
        with pytest.raises(ValueError):
            partition_trajectories([empty])

    @given(st.lists(st.tuples(st.integers(1, 6), st.booleans()), max_size=6))
    @settings(max_examples=40, deadline=None)
    def test_partition_exhaustive_and_disjoint(self, spec):
        trajs = [make_trajectory(n, Outcome.SUCCESS if ok else Outcome.FAILURE,
                                 start=float(10 * i))
                 for i, (n, ok) in enumerate(spec)]
        pool = partition_trajectories(trajs)
        n_total = sum(len(t) for t in trajs)
        assert len(pool.d_plus) + len(pool.d_query) == n_total
        assert not pool.d_minus
        pool.validate()


class TestPersistence:
    def test_trajectory_round_trip(self, tmp_path):
        trajs = [make_trajectory(3, Outcome.SUCCESS),
                 make_trajectory(2, Outcome.FAILURE, start=9.0)]
        path = tmp_path / "data.jsonl"
        save_dataset(trajs, path)
        assert load_dataset(path) == trajs

    def test_gzip_round_trip(self, tmp_path):
        trajs = [make_trajectory(4, Outcome.FAILURE)]
        path = tmp_path / "data.jsonl.gz"
        save_dataset(trajs, path)
        assert load_dataset(path) == trajs

    def test_pool_round_trip(self, tmp_path):
        pool = LabeledPool(
            d_plus=[make_state(v=1.5, s=2.0)],
            d_query=[make_state(v=0.5, s=1.0), make_state(v=0.7, s=3.0)],
            d_minus=[make_state(v=0.5, s=1.0)],
        )
        path = tmp_path / "pool.jsonl"
        save_dataset(pool, path)
        loaded = load_dataset(path)
        assert isinstance(loaded, LabeledPool)
        assert loaded.d_plus == pool.d_plus
        assert loaded.d_query == pool.d_query
        assert loaded.d_minus == pool.d_minus

    def test_truncated_line_reports_line_number(self, tmp_path):
        trajs = [make_trajectory(2, Outcome.SUCCESS)]
        path = tmp_path / "data.jsonl"
        save_dataset(trajs, path)
        text = path.read_text()
        path.write_text(text[:-20])  # mangle the last record
        with pytest.raises(DatasetFormatError) as err:
            load_dataset(path)
        assert err.value.line_no == 3

    def test_missing_field_reports_line_and_field(self, tmp_path):
        path = tmp_path / "data.jsonl"
        path.write_text('{"kind":"sample","traj_id":0,"k":0,"x":[0,0,0,0,0,0]}\n')
        with pytest.raises(DatasetFormatError) as err:
            load_dataset(path)
        assert "line 1" in str(err.value)
        assert "'y'" in str(err.value)

    def test_empty_file_is_empty_dataset(self, tmp_path):
        path = tmp_path / "data.jsonl"
        path.write_text("")
        assert load_dataset(path) == []

    def test_mixed_kinds_rejected(self, tmp_path):
        path = tmp_path / "data.jsonl"
        save_dataset([make_trajectory(1, Outcome.SUCCESS)], path)
        with open(path, "a", encoding="utf-8") as fh:
            fh.write('{"kind":"pool","set":"plus","x":[0,0,0,0,0,0]}\n')
        with pytest.raises(DatasetFormatError):
            load_dataset(path)

    @given(st.lists(
        st.tuples(
            st.floats(-1e6, 1e6, allow_nan=False),
            st.floats(min_value=-1e-3, max_value=1e9, allow_nan=False),
        ),
        min_size=1, max_size=8))
    @settings(max_examples=30, deadline=None)
    def test_round_trip_preserves_floats_bit_exactly(self, tmp_path_factory, pairs):
        pool = LabeledPool(d_plus=[make_state(v=abs(v) % 10, s=s) for v, s in pairs])
        path = tmp_path_factory.mktemp("rt") / "pool.jsonl"
        save_dataset(pool, path)
        loaded = load_dataset(path)
        for a, b in zip(loaded.d_plus, pool.d_plus):
            assert a.as_tuple() == b.as_tuple()

    def test_round_trip_awkward_floats(self, tmp_path):
        awkward = [make_state(v=math.pi, s=1e-300), make_state(v=0.1 + 0.2, s=1.0 / 3.0)]
        pool = LabeledPool(d_plus=awkward)
        path = tmp_path / "pool.jsonl"
        save_dataset(pool, path)
        assert load_dataset(path).d_plus == awkward


class TestPoolInvariants:
    def test_minus_must_be_subset_of_query(self):
        pool = LabeledPool(d_plus=[], d_query=[make_state(v=1.0)],
                           d_minus=[make_state(v=2.0)])
        with pytest.raises(ValueError):
            pool.validate()

    def test_no_state_in_both_labels(self):
        st_ = make_state(v=1.0)
        pool = LabeledPool(d_plus=[st_], d_query=[st_], d_minus=[st_])
        with pytest.raises(ValueError):
            pool.validate()
