"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py                # kernel micro-benchmarks
    python3 benchmarks/bench_kernels.py --end-to-end   # also a short federation per backend

The end-to-end mode runs the federation in a subprocess with and without
FEDCLASSAVG_DISABLE_NUMBA set, since the backend is fixed at import time.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from fedclassavg.ndgrad import kernels as K


def _cases(batch: int, dim: int, clients: int, params: int):
    rng = np.random.default_rng(0)
    n = 2 * batch
    sim = rng.standard_normal((n, n)).astype(np.float32)
    mask = ~np.eye(n, dtype=np.bool_)
    feats = rng.standard_normal((n, dim)).astype(np.float32)
    out = K.log_softmax_np(sim, mask)
    y, norms = K.l2_normalize_np(feats)
    grad_sim = rng.standard_normal(sim.shape).astype(np.float32)
    grad_feats = rng.standard_normal(feats.shape).astype(np.float32)
    stacked = rng.standard_normal((clients, params)).astype(np.float32)
    w = rng.random(clients)
    w /= w.sum()
    return {
        "log_softmax": ((sim, mask), "log_softmax"),
        "log_softmax_backward": ((out, grad_sim, mask), "log_softmax_backward"),
        "l2_normalize": ((feats,), "l2_normalize"),
        "l2_normalize_backward": ((y, norms, grad_feats), "l2_normalize_backward"),
        "weighted_sum": ((stacked, w), "weighted_sum"),
    }


def _best(fn, args, repeat: int) -> float:
    number = 20
    return min(timeit.repeat(lambda: fn(*args), number=number, repeat=repeat)) / number


def micro(batch: int, dim: int, clients: int, params: int, repeat: int) -> list[dict]:
    rows = []
    for name, (args, base) in _cases(batch, dim, clients, params).items():
        np_fn = getattr(K, f"{base}_np")
        row = {"kernel": name, "numpy_us": _best(np_fn, args, repeat) * 1e6}
        if K.NUMBA_AVAILABLE:
            nb_fn = getattr(K, f"{base}_nb")
            nb_fn(*args)  # compile outside the timed region
            row["numba_us"] = _best(nb_fn, args, repeat) * 1e6
            row["speedup"] = row["numpy_us"] / row["numba_us"]
        rows.append(row)
    return rows


_E2E = """
import time
from fedclassavg.datasets import generate_synthetic, partition_skewed
from fedclassavg.federation import FederationConfig, run_federation
from fedclassavg.ndgrad import kernels
tr, te = generate_synthetic(10, 16, 100, 1.5, 0)
plan = partition_skewed(tr, 20, 2, 0)
cfg = FederationConfig(K=20, T={rounds}, lr=0.05, seed=0)
run_federation(FederationConfig(K=20, T=1, lr=0.05, seed=0), plan, tr, te)  # warm-up / jit
t = time.perf_counter()
reps = run_federation(cfg, plan, tr, te)
print(kernels.backend(), time.perf_counter() - t, reps[-1].mean_acc)
"""


def end_to_end(rounds: int) -> list[dict]:
    rows = []
    for disable in ("0", "1"):
        env = dict(os.environ, FEDCLASSAVG_DISABLE_NUMBA=disable)
        out = subprocess.run(
            [sys.executable, "-c", _E2E.format(rounds=rounds)], env=env, capture_output=True, text=True, check=True
        )
        backend, secs, acc = out.stdout.split()
        rows.append({"backend": backend, "rounds": rounds, "seconds": float(secs), "final_mean_acc": float(acc)})
    return rows


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=64)
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--clients", type=int, default=20)
    ap.add_argument("--params", type=int, default=5130)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--end-to-end", action="store_true")
    ap.add_argument("--rounds", type=int, default=20)
    ap.add_argument("--json", action="store_true", help="print machine-readable results")
    args = ap.parse_args(argv)

    result = {"micro": micro(args.batch, args.dim, args.clients, args.params, args.repeat)}
    if args.end_to_end:
        result["end_to_end"] = end_to_end(args.rounds)
    if args.json:
        print(json.dumps(result, indent=2))
        return 0

    print(f"numba available: {K.NUMBA_AVAILABLE}  (batch={args.batch}, dim={args.dim}, "
          f"clients={args.clients}, params={args.params})")
    print(f"{'kernel':24s} {'numpy us':>10s} {'numba us':>10s} {'speedup':>8s}")
    for r in result["micro"]:
        nb = f"{r['numba_us']:10.1f}" if "numba_us" in r else f"{'-':>10s}"
        sp = f"{r['speedup']:8.2f}" if "speedup" in r else f"{'-':>8s}"
        print(f"{r['kernel']:24s} {r['numpy_us']:10.1f} {nb} {sp}")
    for r in result.get("end_to_end", []):
        print(f"end-to-end {r['backend']:6s} {r['rounds']} rounds: {r['seconds']:.2f}s  mean_acc={r['final_mean_acc']:.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
