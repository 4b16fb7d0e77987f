import time
import sys
import os

# Ensure we can import from current dir
sys.path.append(os.getcwd())

from core.atomic_structure import Transition
from core.langevin import SimParams, initialize_ensemble, step
from core.lattice_field import LatticeField, irradiance_for_depth
from core.adiabatic import well_characterization
from core.langevin import choose_time_step


def main():
    print("--- NROL-MC: STEPPER BENCHMARK START ---")

    transition = Transition.cesium_d2()
    field = LatticeField(irradiance_for_depth(transition, -10.0, 1000.0))
    well = well_characterization(field)
    dt = choose_time_step(field, well)
    print(f"Depth {field.depth:.1f} E_R, dt {dt:.3e}, barrier ratio {well.barrier_ratio:.3f}")

    for n_atoms in (1, 25, 100):
        params = SimParams(n_atoms=n_atoms, master_seed=1)
        ens = initialize_ensemble(params, field)
        # warm-up
        for _ in range(10):
            step(ens, field, dt)

        start = time.time()
        steps = 200
        for _ in range(steps):
            step(ens, field, dt)
        duration = time.time() - start
        rate = steps * n_atoms / duration
        print(f"[{n_atoms:>3} atoms] {steps} steps in {duration:.2f}s => {rate:.0f} atom-steps/s")

    print("Benchmark Complete.")


if __name__ == "__main__":
    main()
