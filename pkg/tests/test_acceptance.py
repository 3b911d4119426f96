"""Acceptance criteria 1-8, one verdict line each.

Run alone with ``python3 tests/test_acceptance.py`` or as part of ``pytest``;
the lines are repeated in the pytest terminal summary.
"""

import functools
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

import conftest
from fedclassavg import config as C
from fedclassavg import federation as F
from fedclassavg import models as M
from fedclassavg import ndgrad as ng
from fedclassavg.cli import ablation_configs, baseline_config, main
from fedclassavg.datasets import (
    AugmentationConfig,
    LabeledDataset,
    PartitionError,
    augment_two_views,
    partition_dirichlet,
    partition_skewed,
)
from fedclassavg.federation import Federation, aggregate_classifiers, aggregate_full, run_federation
from fedclassavg.losses import LossConfig, cross_entropy, local_objective, proximal, supcon
from fedclassavg.metrics import CommModel, payload_bytes
from fedclassavg.models import ArchSpec, ClassifierWeights

from _helpers import kink_safe

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
SEEDS = range(5)
POINTS = 10


def verdict(n: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    print(line)
    conftest.ACCEPTANCE_LINES.append(line)
    assert ok, line


# ---------------------------------------------------------------- 1


def _objective_points(kind, rng):
    """POINTS (model, head, batch, labels) tuples whose two augmented views avoid relu kinks."""
    aug = AugmentationConfig(noise_sigma=0.1, seed=3)
    out = []
    while len(out) < POINTS:
        with ng.precision(np.float64):
            m = M.build_model(ArchSpec(kind, feature_dim=4), 5, 3, int(rng.integers(2**31)))
            g = M.init_classifier(4, 3, int(rng.integers(2**31)))
        for _ in range(2000):
            x = rng.standard_normal((4, 5))
            if kink_safe(m, np.concatenate(augment_two_views(x, aug, 0))):
                out.append((m, g, x, np.array([0, 1, 0, 2]), aug))
                break
    return out


def test_criterion_1_gradients():
    rng = np.random.default_rng(2024)
    worst = {}
    with ng.precision(np.float64):
        for _ in range(POINTS):
            z, y = ng.Tensor(rng.standard_normal((6, 5)) * 2), rng.integers(0, 5, 6)
            worst["ce"] = max(worst.get("ce", 0), ng.finite_difference_check(lambda t: cross_entropy(t, y), z, 1e-3))
            a, b = ng.Tensor(rng.standard_normal((6, 4))), ng.Tensor(rng.standard_normal((6, 4)))
            err = max(
                ng.finite_difference_check(lambda t: supcon(t, b, y, 0.07), a, 1e-3),
                ng.finite_difference_check(lambda t: supcon(a, t, y, 0.07), b, 1e-3),
            )
            worst["supcon"] = max(worst.get("supcon", 0), err)
            loc = ClassifierWeights.from_arrays(rng.standard_normal((4, 3)), rng.standard_normal(3), requires_grad=True)
            glob = ClassifierWeights.from_arrays(rng.standard_normal((4, 3)), rng.standard_normal(3))
            for sq in (False, True):
                for p in (loc.weight, loc.bias):
                    err = ng.check_param_gradient(lambda: proximal(loc, glob, sq), p, 1e-3)
                    worst["proximal"] = max(worst.get("proximal", 0), err)
    cfg = LossConfig(rho=0.7)
    for kind in M.ARCH_KINDS:
        for m, g, x, y, aug in _objective_points(kind, rng):
            f = lambda: local_objective(m, (x, y), g, aug, cfg, 0)[0]  # noqa: E731
            for p in m.parameters():
                worst[kind] = max(worst.get(kind, 0), ng.check_param_gradient(f, p, 1e-3))
    bad = {k: v for k, v in worst.items() if not v < 1e-3}
    detail = f"{len(worst)} configurations x {POINTS} points, worst rel err {max(worst.values()):.1e} (step 1e-3)"
    verdict(1, not bad, detail if not bad else f"{detail}; failing {bad}")


# ---------------------------------------------------------------- 2


def _oracle(arrays, sizes):
    total = float(sum(sizes))
    flat = [np.asarray(a, np.float32).ravel() for a in arrays]
    out = np.empty(flat[0].size, np.float32)
    for j in range(out.size):
        acc = 0.0
        for a, n in zip(flat, sizes):
            acc = acc + (n / total) * float(a[j])
        out[j] = np.float32(acc)
    return out.reshape(np.shape(arrays[0]))


def test_criterion_2_aggregation_oracle():
    rng = np.random.default_rng(7)
    mismatches = fixed_fail = 0
    for _ in range(100):
        k, fd, c = (int(v) for v in rng.integers(1, 9, 3))
        sizes = [int(n) for n in rng.integers(1, 1000, k)]
        heads = [ClassifierWeights.from_arrays(rng.standard_normal((fd, c)) * 5, rng.standard_normal(c)) for _ in range(k)]
        got = aggregate_classifiers(list(zip(heads, sizes)))
        full = aggregate_full([(h.arrays(), n) for h, n in zip(heads, sizes)])
        want = [_oracle([h.weight.data for h in heads], sizes), _oracle([h.bias.data for h in heads], sizes)]
        for a, b in zip([got.weight.data, got.bias.data, *full], want * 2):
            mismatches += a.tobytes() != b.tobytes()
        same = aggregate_classifiers([(heads[0], n) for n in sizes])
        fixed_fail += not same.equals(heads[0])
    verdict(2, mismatches == 0 and fixed_fail == 0,
            f"100 instances, {mismatches} bitwise mismatches vs oracle, {fixed_fail} fixed-point failures")


# ---------------------------------------------------------------- 3, 4 (shared runs)


def _final_acc(cfg) -> float:
    train, test = C.load_data(cfg)
    plan = C.make_partition(cfg, train)
    return run_federation(C.federation_config(cfg), plan, train, test)[-1].mean_acc


@functools.lru_cache(maxsize=1)
def benchmark_runs():
    base = C.load_config(CONFIGS / "synthetic_skewed.conf")
    runs = {"baseline": []}
    for seed in SEEDS:
        cfg = replace(base, seed=seed)
        runs["baseline"].append(_final_acc(baseline_config(cfg)))
        for name, arm in ablation_configs(cfg):
            if name != "CA+PR":
                runs.setdefault(name, []).append(_final_acc(arm))
    return runs


@pytest.mark.slow
def test_criterion_3_federation_beats_local():
    runs = benchmark_runs()
    gains = np.array(runs["CA+PR+CL"]) - np.array(runs["baseline"])
    med = float(np.median(gains))
    verdict(3, med >= 0.03,
            f"median gain {100 * med:+.2f} points over 5 seeds (need >= +3.00); "
            f"baseline median {np.median(runs['baseline']):.4f}, FedClassAvg median {np.median(runs['CA+PR+CL']):.4f}")


@pytest.mark.slow
def test_criterion_4_ablation_ordering():
    med = {k: float(np.median(v)) for k, v in benchmark_runs().items() if k != "baseline"}
    ok = med["CA+PR+CL"] >= med["CA"] and med["CA+CL"] >= med["CA"]
    verdict(4, ok, "medians " + ", ".join(f"{k} {v:.4f}" for k, v in med.items()))


# ---------------------------------------------------------------- 5


def test_criterion_5_communication():
    big = payload_bytes(M.init_classifier(512, 10, 0))
    near = abs(big - 22_000) / 22_000 < 0.10
    small = M.build_model(ArchSpec("mlp_small", feature_dim=64), 16, 10, 0)
    deep = M.build_model(ArchSpec("mlp_deep", feature_dim=64), 16, 10, 0)
    invariant = payload_bytes(small.classifier) == payload_bytes(deep.classifier) and small.num_parameters != deep.num_parameters
    cm = CommModel(header_bytes=37)
    # weight bytes after removing the header and the fd-independent bias
    w = [payload_bytes(M.init_classifier(fd, 10, 0), cm) - 37 - 10 * 4 for fd in (64, 128, 256, 512)]
    linear = all(abs(b / a - 2.0) <= 1e-6 for a, b in zip(w, w[1:]))
    with_header = payload_bytes(M.init_classifier(512, 10, 0), cm) == 20_520 + 37
    verdict(5, big == 20_520 and near and invariant and linear and with_header,
            f"fd 512: {big} B ({100 * (big - 22_000) / 22_000:+.1f}% vs 22 KB); extractor-invariant={invariant}; "
            f"doubling ratios {[round(b / a, 9) for a, b in zip(w, w[1:])]}")


# ---------------------------------------------------------------- 6


def test_criterion_6_protocol(tmp_path, monkeypatch):
    cfg = C.parse_config(
        "version = 1\nnum_classes = 5\ninput_dim = 6\nsamples_per_class = 30\nK = 8\nT = 4\n"
        "sampling_rate = 0.5\nlr = 0.05\nfeature_dim = 8\narchs = mlp_small, mlp_deep, linear, mlp_wide\n"
    )
    train, test = C.load_data(cfg)
    plan = C.make_partition(cfg, train)
    fed = Federation(C.federation_config(cfg), plan, train, test)
    seen, real = [], F.local_train

    def spy(c, global_c, *rest):
        seen.append(M.get_classifier(c.model).equals(fed.server.global_classifier))
        return real(c, global_c, *rest)

    monkeypatch.setattr(F, "local_train", spy)
    untouched = True
    for _ in range(cfg.T):
        before = {c.id: M.get_weights(c.model) for c in fed.clients}
        rep = fed.run_round()
        for c in fed.clients:
            if c.id not in rep.participants:
                untouched &= all(a.tobytes() == b.tobytes() for a, b in zip(before[c.id], M.get_weights(c.model)))
    monkeypatch.undo()

    conf = tmp_path / "p.conf"
    conf.write_text(C.to_text(cfg))
    outs = []
    for threads in ("1", "4"):
        d = tmp_path / f"t{threads}"
        assert main(["run", "--config", str(conf), "--out", str(d), "--threads", threads]) == 0
        outs.append(d)
    files = sorted(p.relative_to(outs[0]) for p in outs[0].rglob("*") if p.is_file() and p.name != "manifest.json")
    identical = all((outs[0] / f).read_bytes() == (outs[1] / f).read_bytes() for f in files)
    verdict(6, all(seen) and untouched and identical,
            f"{sum(seen)}/{len(seen)} participants received the broadcast head; non-participants untouched={untouched}; "
            f"threads 1 vs 4 identical across {len(files)} output files={identical}")


# ---------------------------------------------------------------- 7


def _plan_ok(plan, n, K, exhaustive):
    ids = np.concatenate(plan.client_indices)
    sizes = [len(ix) for ix in plan.client_indices]
    return (
        len(plan.client_indices) == K
        and len(ids) == len(np.unique(ids))
        and (not exhaustive or len(ids) == n)
        and max(sizes) - min(sizes) <= 1
    )


def _balanced(C_, per_class, seed):
    labels = np.repeat(np.arange(C_), per_class)
    feats = np.random.default_rng(seed).standard_normal((len(labels), 2)).astype(np.float32)
    return LabeledDataset(feats, labels, C_)


def test_criterion_7_partitions():
    rng = np.random.default_rng(11)
    bad = []
    for i in range(50):
        C_, per, K = int(rng.integers(2, 11)), int(rng.integers(10, 41)), int(rng.integers(1, 21))
        ds = _balanced(C_, per, i)
        alpha = float(np.exp(rng.uniform(np.log(0.05), np.log(100))))
        if not _plan_ok(partition_dirichlet(ds, K, alpha, i), len(ds), K, True):
            bad.append(("dirichlet", C_, per, K, alpha))
        cpc = int(rng.integers(1, min(4, C_) + 1))
        try:
            plan = partition_skewed(ds, K, cpc, i)
        except PartitionError:
            if not (K * cpc > len(ds) or per * cpc < K):
                bad.append(("skewed-raised", C_, per, K, cpc))
            continue
        if not _plan_ok(plan, len(ds), K, False) or any(len(np.unique(ds.labels[ix])) != cpc for ix in plan.client_indices):
            bad.append(("skewed", C_, per, K, cpc))
    ds = _balanced(10, 100, 0)
    worst_flat = max(
        ds.class_counts(ix).max() / len(ix) for s in range(20) for ix in partition_dirichlet(ds, 10, 1000.0, s).client_indices
    )
    dominated = np.mean([
        np.mean([ds.class_counts(ix).max() / len(ix) > 0.5 for ix in partition_dirichlet(ds, 10, 0.1, s).client_indices])
        for s in range(20)
    ])
    ok = not bad and worst_flat < 0.2 and dominated >= 0.5
    verdict(7, ok, f"50 random configs per partitioner, {len(bad)} violations; alpha=1000 max class share "
                   f"{worst_flat:.3f} (< 0.2); alpha=0.1 dominated fraction {dominated:.2f} (>= 0.5)")


# ---------------------------------------------------------------- 8


@pytest.mark.slow
def test_criterion_8_weight_mode():
    base = C.load_config(CONFIGS / "synthetic_dirichlet_weight.conf")
    full, head = [], []
    for seed in SEEDS:
        cfg = replace(base, seed=seed)
        full.append(_final_acc(cfg))
        head.append(_final_acc(replace(cfg, aggregate_mode="classifier_only")))
    mf, mh = float(np.median(full)), float(np.median(head))
    verdict(8, mf >= mh, f"median over 5 seeds: +weight {mf:.4f} vs classifier-only {mh:.4f}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-s", "-p", "no:cacheprovider"]))
