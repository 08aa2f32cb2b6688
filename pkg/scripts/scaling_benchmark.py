"""Scaling sweep on loopback with simulated compute, written to results/.

    python scripts/scaling_benchmark.py --np-list 1,2,4,8 --compute-ms 20

Loopback on a single machine says nothing about datacenter networks; the
point is the fused-vs-unfused collective count and the efficiency trend.
"""
import argparse
from pathlib import Path

from ringweave.train_bench import BenchConfig, run_benchmark


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--np-list", default="1,2,4")
    p.add_argument("--num-tensors", type=int, default=100)
    p.add_argument("--tensor-bytes", type=int, default=4096)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--compute-ms", type=float, default=20.0)
    p.add_argument("--out", default="results/scaling.csv")
    args = p.parse_args()

    cfg = BenchConfig(np_list=[int(x) for x in args.np_list.split(",")], tensor_bytes=args.tensor_bytes,
                      num_tensors=args.num_tensors, steps=args.steps, compute_ms=args.compute_ms)
    report = run_benchmark(cfg)
    print(report.table())
    for n in cfg.np_list:
        fused, unfused = report.row(n, True), report.row(n, False)
        print(f"N={n}: fusion speedup {fused.throughput / unfused.throughput:.2f}x "
              f"({fused.collectives_per_step:.0f} vs {unfused.collectives_per_step:.0f} collectives/step)")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_csv())
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
