"""Command-line entry point: ``fedclassavg run|ablate|baseline``.

Each command writes into a staging directory next to ``--out`` and renames
it into place only after the run finished, so a failed run leaves nothing
behind.  Without ``--out`` the run lands under ``$FEDCLASSAVG_OUT_ROOT``
(default ``./runs``), named after the command and run id.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import shutil
import sys
import tempfile
import time
import warnings
from dataclasses import replace
from pathlib import Path

from . import __version__
from . import config as C
from . import models as M
from .datasets import IdxFormatError, PartitionError
from .federation import Federation
from .metrics import write_feature_dump, write_reports_csv
from .ndgrad import NumericError, kernels, save_weights

OUT_ROOT_ENV = "FEDCLASSAVG_OUT_ROOT"

ABLATION_ARMS = (
    ("CA", False, False),
    ("CA+PR", True, False),
    ("CA+CL", False, True),
    ("CA+PR+CL", True, True),
)

log = logging.getLogger("fedclassavg")


class UsageError(Exception):
    pass


def run_id(command: str, config_text: str) -> str:
    return hashlib.sha1(f"{command}\n{config_text}".encode("utf-8")).hexdigest()


def read_config(path: str | Path) -> C.ExperimentConfig:
    """Load a config file, or the config echoed inside a run manifest."""
    path = Path(path)
    if path.suffix == ".json":
        try:
            manifest = json.loads(path.read_text(encoding="utf-8"))
            text = manifest["config_text"]
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise C.ConfigError(f"not a readable run manifest ({exc})", str(path)) from None
        # IDX paths in a manifest are already absolute
        return C.parse_config(text, str(path), ".")
    return C.load_config(path)


def _absolute_paths(cfg: C.ExperimentConfig) -> C.ExperimentConfig:
    base = Path(cfg.base_dir)
    keys = ("train_images", "train_labels", "test_images", "test_labels")
    changes = {k: str((base / getattr(cfg, k)).resolve()) for k in keys if getattr(cfg, k)}
    return replace(cfg, **changes, base_dir=".")


def execute(
    cfg: C.ExperimentConfig,
    out: Path,
    command: str,
    config_path: str,
    threads: int = 1,
    final_dir: Path | None = None,
) -> dict:
    """Run one federation and write its artefacts into ``out`` (which must exist).

    ``final_dir`` is where ``out`` will live once staging completes; it is
    only recorded in the manifest.
    """
    started = time.time()
    text = C.to_text(cfg)
    rid = run_id(command, text)
    train, test = C.load_data(cfg)
    plan = C.make_partition(cfg, train)
    t_data = time.time()

    fed = Federation(C.federation_config(cfg), plan, train, test, threads=threads)
    ckpt = out / "checkpoints"
    if cfg.aggregate:
        ckpt.mkdir()

    def on_round(f: Federation, report) -> None:
        if cfg.aggregate:
            save_weights(ckpt / f"round_{report.round:04d}.fcaw", f.server.global_classifier.arrays())
        log.info("round %d/%d mean_acc=%.4f", report.round, cfg.T, report.mean_acc)

    reports = fed.run(on_round)
    t_train = time.time()

    write_reports_csv(out / "rounds.csv", reports)
    plan.to_csv(out / "partition.csv")
    final = out / "final"
    final.mkdir()
    for c in fed.clients:
        M.save_model(final / f"client_{c.id:04d}.fcam", c.model)
    if cfg.aggregate:
        save_weights(final / "global_classifier.fcaw", fed.server.global_classifier.arrays())
    if cfg.dump_features:
        shards = [(test.features[c.test_idx], test.labels[c.test_idx]) for c in fed.clients]
        write_feature_dump(out / "features.csv", [c.model for c in fed.clients], shards)

    last = reports[-1]
    manifest = {
        "command": command,
        "run_id": rid,
        "config_path": str(config_path),
        "config": {k: getattr(cfg, k) for k in C.KEYS},
        "config_text": text,
        "output_dir": str(final_dir or out),
        "package_version": __version__,
        "kernel_backend": kernels.backend(),
        "threads": threads,
        "final": {
            "mean_acc": last.mean_acc,
            "std_acc": last.std_acc,
            "bytes_up": last.cumulative_bytes_up,
            "bytes_down": last.cumulative_bytes_down,
        },
        "timings": {
            "started_unix": started,
            "data_seconds": t_data - started,
            "train_seconds": t_train - t_data,
            "total_seconds": time.time() - started,
        },
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


class _Staged:
    """Build into a temporary sibling directory; rename onto ``final`` on success."""

    def __init__(self, final: Path, force: bool):
        self.final = final
        self.force = force

    def __enter__(self) -> Path:
        if self.final.exists() and not (self.final.is_dir() and not any(self.final.iterdir())):
            if not self.force:
                raise UsageError(f"output directory {self.final} already exists and is not empty (use --force)")
        self.final.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=f".{self.final.name}.", dir=self.final.parent))
        return self.tmp

    def __exit__(self, exc_type, exc, tb) -> bool:
        if exc_type is not None:
            shutil.rmtree(self.tmp, ignore_errors=True)
            return False
        if self.final.exists():
            shutil.rmtree(self.final)
        os.replace(self.tmp, self.final)
        return False


def _resolve_out(args, command: str, cfg: C.ExperimentConfig) -> Path:
    if args.out:
        return Path(args.out)
    root = Path(os.environ.get(OUT_ROOT_ENV) or "runs")
    return root / f"{command}-{run_id(command, C.to_text(cfg))[:12]}"


def _prepare(args) -> C.ExperimentConfig:
    cfg = _absolute_paths(read_config(args.config))
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise C.ConfigError(f"--seed must be in [0, 2^64), got {args.seed}", "command line")
        cfg = replace(cfg, seed=args.seed)
    return cfg


def cmd_run(args) -> int:
    cfg = _prepare(args)
    out = _resolve_out(args, "run", cfg)
    with _Staged(out, args.force) as tmp:
        m = execute(cfg, tmp, "run", args.config, args.threads, out)
    print(f"run {m['run_id'][:12]}: mean_acc={m['final']['mean_acc']:.4f} -> {out}")
    return 0


def baseline_config(cfg: C.ExperimentConfig) -> C.ExperimentConfig:
    """Local training only: nothing is aggregated, so there is no anchor for a proximal term."""
    return replace(cfg, aggregate=False, enable_PR=False)


def cmd_baseline(args) -> int:
    cfg = baseline_config(_prepare(args))
    out = _resolve_out(args, "baseline", cfg)
    with _Staged(out, args.force) as tmp:
        m = execute(cfg, tmp, "baseline", args.config, args.threads, out)
    print(f"baseline {m['run_id'][:12]}: mean_acc={m['final']['mean_acc']:.4f} -> {out}")
    return 0


def ablation_configs(cfg: C.ExperimentConfig) -> list[tuple[str, C.ExperimentConfig]]:
    """The four arms; they differ from ``cfg`` and each other only in the PR and CL flags."""
    base = replace(cfg, aggregate=True)
    return [(name, replace(base, enable_PR=pr, enable_CL=cl)) for name, pr, cl in ABLATION_ARMS]


def format_table(rows: list[dict]) -> str:
    cols = ("arm", "PR", "CL", "final_mean_acc", "final_std_acc", "best_mean_acc", "bytes_up")
    cells = [list(cols)] + [[str(r[c]) for c in cols] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(cols))]
    return "\n".join("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() for row in cells) + "\n"


def cmd_ablate(args) -> int:
    cfg = _prepare(args)
    out = _resolve_out(args, "ablate", cfg)
    rows = []
    with _Staged(out, args.force) as tmp:
        for name, arm in ablation_configs(cfg):
            d = tmp / name.replace("+", "_")
            d.mkdir()
            m = execute(arm, d, "ablate", args.config, args.threads, out / d.name)
            accs = _column(d / "rounds.csv", "mean_acc")
            rows.append(
                {
                    "arm": name,
                    "PR": arm.enable_PR,
                    "CL": arm.enable_CL,
                    "final_mean_acc": f"{m['final']['mean_acc']:.4f}",
                    "final_std_acc": f"{m['final']['std_acc']:.4f}",
                    "best_mean_acc": f"{max(accs):.4f}",
                    "bytes_up": m["final"]["bytes_up"],
                }
            )
        table = format_table(rows)
        (tmp / "comparison.txt").write_text(table)
        with open(tmp / "comparison.csv", "w") as fh:
            fh.write(",".join(rows[0]) + "\n")
            for r in rows:
                fh.write(",".join(str(v) for v in r.values()) + "\n")
    sys.stdout.write(table)
    return 0


def _column(path: Path, name: str) -> list[float]:
    with open(path, newline="") as fh:
        return [float(r[name]) for r in csv.DictReader(fh)]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedclassavg", description="Classifier-averaging federated learning simulator.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn, helptext in (
        ("run", cmd_run, "run one federated experiment"),
        ("ablate", cmd_ablate, "run the CA / CA+PR / CA+CL / CA+PR+CL arms and compare them"),
        ("baseline", cmd_baseline, "local training only: no aggregation, no proximal term"),
    ):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--config", required=True, help="key=value config file, or a manifest.json to replay")
        s.add_argument("--out", help=f"output directory (default: ${OUT_ROOT_ENV}/<command>-<run id>)")
        s.add_argument("--threads", type=int, default=1, help="worker threads for client updates")
        s.add_argument("--seed", type=int, help="override the config seed")
        s.add_argument("--force", action="store_true", help="replace an existing output directory")
        s.add_argument("-v", "--verbose", action="store_true", help="log every round")
        s.set_defaults(func=fn)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
    )
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        # non-finite values surface as NumericError; numpy's own warnings are noise here
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return args.func(args)
    except (C.ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (IdxFormatError, PartitionError) as exc:
        print(f"error: bad input data: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"error: training diverged ({exc}); try a smaller lr", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("interrupted; partial outputs removed", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
