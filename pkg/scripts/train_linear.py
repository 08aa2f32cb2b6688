"""Data-parallel linear regression; run under the launcher:

    ringrun -np 4 -- python scripts/train_linear.py --steps 100

Rank 0 prints the loss curve and checks the final parameters against a
single-process run on the full dataset.
"""
import argparse

import numpy as np

import ringweave as rw
from ringweave.train_bench import (DistributedOptimizer, LinearModel, broadcast_initial_state, make_dataset, shard,
                                   train_single)


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--lr", type=float, default=0.05)
    args = p.parse_args()

    comm = rw.init()
    X, y = make_dataset()
    model = LinearModel.create(seed=1000 + comm.rank())  # deliberately divergent
    broadcast_initial_state(comm, model, root=0)
    X_local, y_local = shard(X, y, comm.rank(), comm.size())
    opt = DistributedOptimizer(comm, args.lr)
    for step in range(args.steps):
        opt.step(model, X_local, y_local)
        if comm.rank() == 0 and step % 10 == 0:
            print(f"step {step:4d}  loss {model.loss(X, y):.6f}")
    comm.shutdown()

    if comm.rank() == 0:
        reference = LinearModel.create(seed=1000)
        for _ in range(args.steps):
            reference.apply(reference.gradients(X, y), args.lr)
        gap = np.abs(model.flat() - reference.flat()).max()
        print(f"final loss {model.loss(X, y):.6f}; max |distributed - single process| = {gap:.3e}")


if __name__ == "__main__":
    main()
