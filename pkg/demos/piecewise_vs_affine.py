"""Piecewise recovery on a steep one-parameter family compared with affine PBDW."""
import numpy as np

from redinv import (Dictionary, PbdwOperator, build_family, build_observation, bump_testbed, estimate_errors,
                    greedy_reduced_basis, sample_training_set)
from redinv.benchmarks import held_out_points


def main():
    model = bump_testbed(255, delta=0.02, width=0.05)
    train = sample_training_set(model, 513)
    test = sample_training_set(model, points=held_out_points(model, 513))
    setup = build_observation((Dictionary(model.mesh, "point_eval", [0.3, 0.5]), [0, 1]))
    ubar = model.solve(model.box.center)
    best = min(PbdwOperator.fit(greedy_reduced_basis(train, n, offset=ubar).space(n), setup, offset=ubar)
               .errors(test.snapshots).max() for n in range(3))
    fam = build_family(model, train, setup, "sigma", sigma=5e-4, K_max=64)
    err, _ = estimate_errors(fam, model, setup, test.snapshots, "surrogate")
    print(f"affine PBDW worst held-out error: {best:.3e}")
    print(f"piecewise family: K={len(fam.cells)}, worst held-out error {err.max():.3e}, "
          f"mean {np.mean(err):.3e}")


if __name__ == "__main__":
    main()
