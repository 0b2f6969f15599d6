"""Reconstruct elliptic states from point sensors with linear and affine PBDW."""
import numpy as np

from redinv import (Dictionary, PbdwOperator, build_observation, elliptic_testbed, greedy_reduced_basis,
                    sample_training_set)
from redinv.benchmarks import held_out_points


def main():
    model = elliptic_testbed(255, 2)
    train = sample_training_set(model, 17)
    test = sample_training_set(model, points=held_out_points(model, 11))
    setup = build_observation((Dictionary(model.mesh, "point_eval", np.arange(1, 11) / 11), list(range(10))))
    ubar = model.solve(model.box.center)
    print(" n   beta    worst (linear)  worst (affine)")
    for n in range(1, 9):
        lin = PbdwOperator.fit(greedy_reduced_basis(train, n).space(n), setup)
        rb = greedy_reduced_basis(train, n, offset=ubar)
        aff = PbdwOperator.fit(rb.space(n), setup, offset=ubar)
        print(f"{n:2d}  {lin.beta:.3f}  {lin.errors(test.snapshots).max():14.3e}  "
              f"{aff.errors(test.snapshots).max():14.3e}")


if __name__ == "__main__":
    main()
