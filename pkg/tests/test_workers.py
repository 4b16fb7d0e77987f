import threading
from types import SimpleNamespace

import numpy as np
import pytest

from core.equilibration import EquilibrationMonitor, RollingAverage, kinetic_drift
from core.errors import RunInterrupted, TimeStepRefinement
from core.shared_state import EnsembleLedger
from core.trajectory_worker import ChunkQueue, TrajectoryPool


def square_task(chunk_id, indices, ledger):
    ledger.add_steps(1)
    return SimpleNamespace(
        atom_index=np.asarray(indices),
        value=np.asarray(indices, dtype=float) ** 2,
        counters={"calls": 1},
    )


def test_queue_drains_in_order():
    queue = ChunkQueue([(0, [0]), (1, [1])])
    assert queue.pop() == (0, [0])
    assert queue.pop() == (1, [1])
    assert queue.pop() is None


def test_ledger_assembles_in_atom_order():
    ledger = EnsembleLedger(4)
    ledger.store(SimpleNamespace(atom_index=[2, 3], value=np.array([20, 30]), counters={"n": 2}))
    with pytest.raises(RuntimeError):
        ledger.assemble("value")
    ledger.store(SimpleNamespace(atom_index=[0, 1], value=np.array([0, 10]), counters={"n": 1}))
    np.testing.assert_array_equal(ledger.assemble("value"), [0, 10, 20, 30])
    assert ledger.counters == {"n": 3}
    assert ledger.get_progress()["atoms_done"] == 4


def test_failure_sets_abort():
    ledger = EnsembleLedger(2)
    ledger.record_failure(3, ValueError("late"))
    ledger.record_failure(1, ValueError("early"))
    assert ledger.abort.is_set()
    assert ledger.first_failure()[0] == 1
    assert ledger.get_progress()["failed"]


@pytest.mark.parametrize("workers", [1, 4])
def test_pool_result_does_not_depend_on_workers(workers):
    ledger = TrajectoryPool(workers).run(23, 5, square_task)
    np.testing.assert_array_equal(ledger.assemble("value"), np.arange(23.0) ** 2)
    assert ledger.counters["calls"] == 5
    assert ledger.steps_done == 5


def test_pool_reraises_worker_errors():
    def task(chunk_id, indices, ledger):
        if chunk_id == 1:
            raise ValueError("boom")
        return square_task(chunk_id, indices, ledger)

    with pytest.raises(ValueError, match="boom"):
        TrajectoryPool(1).run(10, 2, task)


def test_pool_prefers_refinement_requests():
    barrier = threading.Barrier(2)

    def task(chunk_id, indices, ledger):
        barrier.wait(timeout=5)
        if chunk_id == 0:
            raise ValueError("plain failure")
        raise TimeStepRefinement(0.02, 1e-3)

    with pytest.raises(TimeStepRefinement):
        TrajectoryPool(2).run(4, 2, task)


def test_stopped_pool_reports_unfinished_run():
    pool = TrajectoryPool(1)

    def task(chunk_id, indices, ledger):
        pool.stop()
        return square_task(chunk_id, indices, ledger)

    with pytest.raises(RunInterrupted, match="1 of 3 chunks"):
        pool.run(6, 2, task)


def test_rolling_average():
    avg = RollingAverage(window_size=3)
    for value in (1.0, 2.0, 3.0, 4.0):
        last = avg.update(value)
    assert last == pytest.approx(3.0)


def test_drift_detection(rng):
    base = rng.normal(100.0, 10.0, 300)
    steady = kinetic_drift(base, base + np.tile([1.0, -1.0], 150))
    assert not steady.drifted
    heating = kinetic_drift(base, base + 5.0 + rng.normal(0.0, 1.0, 300))
    assert heating.drifted and heating.z_score > 2
    assert not kinetic_drift([1.0], [50.0]).drifted


def test_monitor_fraction():
    monitor = EquilibrationMonitor(depth=1000.0, window_size=2)
    assert np.isnan(monitor.fraction_of_depth)
    monitor.update(100.0)
    monitor.update(300.0)
    assert monitor.fraction_of_depth == pytest.approx(0.2)
