import threading

import numpy as np


class EnsembleLedger:
    """
    Thread-safe store shared between:
    1. Trajectory workers (write per-atom results, report failures)
    2. The pool owner (reads progress, assembles the reduction)

    Results are kept in atom-index slots and only summed in atom order by
    ``assemble`` so the reduction does not depend on which worker finished
    first.
    """

    def __init__(self, n_atoms):
        self.lock = threading.Lock()
        self.n_atoms = n_atoms

        # PER-ATOM STATE
        self.slots = {}

        # PROGRESS
        self.chunks_done = 0
        self.steps_done = 0
        self.counters = {}

        # FAILURES
        self.failures = []
        self.abort = threading.Event()

    def store(self, chunk):
        """Called by a worker when a chunk finishes."""
        with self.lock:
            for position, atom in enumerate(chunk.atom_index):
                self.slots[int(atom)] = (chunk, position)
            for key, value in getattr(chunk, "counters", {}).items():
                self.counters[key] = self.counters.get(key, 0) + value
            self.chunks_done += 1

    def add_steps(self, count):
        with self.lock:
            self.steps_done += count

    def record_failure(self, chunk_id, error):
        """Called by a worker; stops every other worker at its next check."""
        with self.lock:
            self.failures.append((chunk_id, error))
        self.abort.set()

    def get_progress(self):
        with self.lock:
            return {
                "chunks_done": self.chunks_done,
                "atoms_done": len(self.slots),
                "steps_done": self.steps_done,
                "failed": bool(self.failures),
            }

    def first_failure(self):
        with self.lock:
            if not self.failures:
                return None
            return sorted(self.failures, key=lambda item: item[0])[0]

    def assemble(self, field):
        """Stack one per-atom field of every stored chunk in atom order."""
        with self.lock:
            missing = self.n_atoms - len(self.slots)
            if missing:
                raise RuntimeError(f"{missing} atoms have no result")
            rows = []
            for atom in range(self.n_atoms):
                chunk, position = self.slots[atom]
                rows.append(getattr(chunk, field)[position])
        return np.stack(rows)
