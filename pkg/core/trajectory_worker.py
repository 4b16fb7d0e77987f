import logging
import threading
import time
from collections import deque

from core.errors import RunInterrupted, TimeStepRefinement
from core.shared_state import EnsembleLedger

logger = logging.getLogger("nrol.worker")


class ChunkQueue:
    """Lock-protected queue of atom chunks; workers pop until it is empty."""

    def __init__(self, chunks):
        self.queue = deque(chunks)
        self.lock = threading.Lock()

    def pop(self):
        with self.lock:
            if not self.queue:
                return None
            return self.queue.popleft()


class TrajectoryWorker:
    def __init__(self, name, queue, ledger, task):
        self.name = name
        self.queue = queue
        self.ledger = ledger
        self.task = task
        self.running = False
        self.thread = None

    def start(self):
        if self.running:
            return
        self.running = True
        self.thread = threading.Thread(target=self._run_loop, name=self.name, daemon=True)
        self.thread.start()

    def stop(self):
        self.running = False

    def join(self):
        if self.thread:
            self.thread.join()

    def _run_loop(self):
        while self.running and not self.ledger.abort.is_set():
            item = self.queue.pop()
            if item is None:
                break
            chunk_id, indices = item
            start_time = time.time()
            try:
                result = self.task(chunk_id, indices, self.ledger)
                if result is None:  # aborted
                    break
                self.ledger.store(result)
                logger.debug(f"[{self.name}] chunk {chunk_id} ({len(indices)} atoms) done in {time.time() - start_time:.1f}s")
            except TimeStepRefinement as e:
                logger.info(f"[{self.name}] chunk {chunk_id}: {e}")
                self.ledger.record_failure(chunk_id, e)
            except Exception as e:
                logger.exception(f"[{self.name}] chunk {chunk_id} failed: {e}")
                self.ledger.record_failure(chunk_id, e)
        self.running = False


class TrajectoryPool:
    """Runs atom chunks on ``workers`` threads and collects them in a ledger."""

    def __init__(self, workers=1):
        self.workers = max(1, int(workers))
        self.threads = []

    def stop(self):
        """Let every worker finish its current chunk and take no more."""
        for worker in self.threads:
            worker.stop()

    def run(self, n_atoms, chunk_size, task):
        chunks = [
            (chunk_id, list(range(start, min(start + chunk_size, n_atoms))))
            for chunk_id, start in enumerate(range(0, n_atoms, chunk_size))
        ]
        ledger = EnsembleLedger(n_atoms)
        queue = ChunkQueue(chunks)
        self.threads = threads = [
            TrajectoryWorker(f"traj-{i}", queue, ledger, task)
            for i in range(min(self.workers, len(chunks)))
        ]
        logger.info(f"Propagating {n_atoms} atoms in {len(chunks)} chunks on {len(threads)} workers")
        for worker in threads:
            worker.start()
        try:
            for worker in threads:
                worker.join()
        except KeyboardInterrupt:
            logger.warning("Interrupted; workers stop after their current chunk")
            self.stop()
            ledger.abort.set()
            for worker in threads:
                worker.join()
            raise

        failure = ledger.first_failure()
        if failure is not None:
            refinements = [e for _, e in ledger.failures if isinstance(e, TimeStepRefinement)]
            if refinements:
                raise max(refinements, key=lambda e: e.probability)
            raise failure[1]
        progress = ledger.get_progress()
        if progress["atoms_done"] < n_atoms:
            raise RunInterrupted(f"stopped after {progress['chunks_done']} of {len(chunks)} chunks")
        logger.debug(f"{progress['chunks_done']} chunks, {progress['steps_done']} logged steps")
        return ledger
