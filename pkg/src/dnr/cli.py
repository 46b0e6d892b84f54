"""Command-line entry point: ``dnr <command> --config PATH [--seed N] [--out DIR] [--force]``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np

from dnr import __version__
from dnr.config import ExperimentConfig, load_config
from dnr.errors import ContractViolation, NumericFault
from dnr.experiment import ArmResult, evaluate_arm, metrics_csv, run_ablation
from dnr.model import Backbone, DivideModel, load_module, save_checkpoint
from dnr.pid import JointDist, kl_simplex, pid_decompose, read_joint_csv
from dnr.pipeline import LOG_COLUMNS, build_backbone, freeze, frozen_streams, train_divide, train_refine
from dnr.synth import SPLITS, discretize, generate, save_dataset

COMMANDS = ("synth", "divide", "refine", "eval", "ablate", "pid", "export-embeddings")

log = logging.getLogger("dnr")


class RunError(Exception):
    """A user-facing failure; the message is printed and the exit code is 2."""


class Run:
    """Output directory bookkeeping shared by every command."""

    def __init__(self, cfg: ExperimentConfig, out: Path, command: str, force: bool):
        self.cfg = cfg
        self.out = out
        self.command = command
        self.force = force
        self.seed = cfg.seeds[0]
        self.config_hash = cfg.config_hash()
        self.run_id = f"{int(time.time())}-{self.config_hash[:12]}"

    def write_manifest(self) -> None:
        """Record provenance before any output, refusing to mix configs."""
        self.out.mkdir(parents=True, exist_ok=True)
        path = self.out / "manifest.json"
        if path.exists() and not self.force:
            previous = json.loads(path.read_text(encoding="utf-8"))
            if previous.get("config_hash") != self.config_hash:
                raise RunError(
                    f"{self.out} holds outputs of config {previous.get('config_hash', '?')[:12]}; "
                    f"current config is {self.config_hash[:12]}. Pass --force to overwrite."
                )
        manifest = {
            "run_id": self.run_id,
            "command": self.command,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "seeds": list(self.cfg.seeds),
            "config": self.cfg.to_dict(),
            "versions": {
                "dnr": __version__,
                "numpy": np.__version__,
                "python": platform.python_version(),
            },
        }
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def checkpoint(self, name: str) -> Path:
        path = self.out / name
        if not path.exists():
            raise RunError(f"missing checkpoint: expected {path}")
        return path

    def write_log(self, name: str, rows: list[dict]) -> Path:
        path = self.out / "logs" / self.run_id / name
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(LOG_COLUMNS)
            for row in rows:
                writer.writerow(["" if row[c] is None else repr(row[c]) for c in LOG_COLUMNS])
        return path


def _load_divide(run: Run) -> DivideModel:
    model = load_module(run.checkpoint("divide.ckpt"))
    if not isinstance(model, DivideModel):
        raise RunError(f"{run.out / 'divide.ckpt'} does not hold a Divide model")
    return freeze(model)


def _load_backbone(run: Run) -> Backbone:
    backbone = load_module(run.checkpoint("refine.ckpt"))
    if not isinstance(backbone, Backbone):
        raise RunError(f"{run.out / 'refine.ckpt'} does not hold a backbone")
    return backbone


def cmd_synth(run: Run) -> None:
    data = generate(run.cfg.synth, run.seed)
    save_dataset(data, run.out / "data")
    print(f"wrote dataset to {run.out / 'data'}")


def cmd_divide(run: Run) -> None:
    data = generate(run.cfg.synth, run.seed)
    result = train_divide(run.cfg, data, run.seed)
    meta = {**result.module.meta(), "config_hash": run.config_hash, "seed": run.seed}
    save_checkpoint(run.out / "divide.ckpt", result.module, meta)
    path = run.write_log("divide.csv", result.log)
    print(f"wrote {run.out / 'divide.ckpt'} and {path}")


def cmd_refine(run: Run) -> None:
    model = _load_divide(run)
    data = generate(run.cfg.synth, run.seed)
    backbone = build_backbone(run.cfg, run.seed, 3 * model.d, "backbone.divide+refine")
    result = train_refine(run.cfg, model, backbone, data, run.seed)
    meta = {**backbone.meta(), "config_hash": run.config_hash, "seed": run.seed}
    save_checkpoint(run.out / "refine.ckpt", backbone, meta)
    path = run.write_log("refine.csv", result.log)
    print(f"wrote {run.out / 'refine.ckpt'} and {path}")


def cmd_eval(run: Run) -> None:
    model = _load_divide(run)
    backbone = _load_backbone(run)
    data = generate(run.cfg.synth, run.seed)
    result = ArmResult("divide+refine", run.seed, model, backbone, [], [])
    text = metrics_csv(evaluate_arm(run.cfg, result, data))
    (run.out / "metrics.csv").write_text(text, encoding="utf-8", newline="\n")
    sys.stdout.write(text)


def cmd_ablate(run: Run) -> None:
    text = metrics_csv(run_ablation(run.cfg))
    (run.out / "metrics.csv").write_text(text, encoding="utf-8", newline="\n")
    print(f"wrote {run.out / 'metrics.csv'}")


def _print_joint(joint: JointDist) -> None:
    print(pid_decompose(joint).as_row())


def cmd_pid(run: Run) -> None:
    """PID of the label against each pair of discretized checkpoint streams."""
    model = _load_divide(run)
    data = generate(run.cfg.synth, run.seed)
    streams = frozen_streams(model, data.test.x)
    slots = {m: np.concatenate(s, axis=1) for m, s in streams.items()}
    codes = {m: discretize(v, run.cfg.pid_bins) for m, v in slots.items()}
    mods = list(model.modalities)
    print("pair,u1,u2,r,s")
    for i, a in enumerate(mods):
        for b in mods[i + 1:]:
            atoms = pid_decompose(JointDist.from_samples(data.test.labels, codes[a], codes[b]))
            print(f"{a}{b},{atoms.as_row()}")


def cmd_export_embeddings(run: Run) -> None:
    """One row per (sample, modality) with its u, r and s stream vectors."""
    model = _load_divide(run)
    data = generate(run.cfg.synth, run.seed)
    d = model.d
    header = ["split", "sample_id", "label", "modality", "kl_u_r"]
    for stream in ("u", "r", "s"):
        header += [f"{stream}_{j}" for j in range(d)]
    path = run.out / "embeddings.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for name in SPLITS:
            split = data.split(name)
            streams = frozen_streams(model, split.x)
            for m in model.modalities:
                u, r, s = streams[m]
                kl = kl_simplex(u, r)
                for i in range(len(split)):
                    row = [name, str(int(split.ids[i])), str(int(split.labels[i])), m, repr(float(kl[i]))]
                    row += [repr(float(v)) for v in np.concatenate([u[i], r[i], s[i]])]
                    writer.writerow(row)
    print(f"wrote {path}")


HANDLERS = {
    "synth": cmd_synth,
    "divide": cmd_divide,
    "refine": cmd_refine,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "pid": cmd_pid,
    "export-embeddings": cmd_export_embeddings,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dnr", description="Divide-and-Refine multimodal experiments.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", type=Path, help="TOML experiment config")
    parser.add_argument("--seed", type=int, default=None, help="overrides the config seeds and DNR_SEED")
    parser.add_argument("--out", type=Path, default=Path("runs"), help="output directory (default: runs)")
    parser.add_argument("--force", action="store_true", help="overwrite outputs of a different config")
    parser.add_argument("--joint", type=Path, help="pid only: CSV of y,a,b,p rows")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "pid" and args.joint is not None:
            _print_joint(read_joint_csv(args.joint))
            return 0
        if args.joint is not None:
            raise RunError("--joint only applies to the pid command")
        if args.config is None:
            raise RunError(f"{args.command} needs --config")
        cfg = load_config(args.config, args.seed)
        run = Run(cfg, args.out, args.command, args.force)
        run.write_manifest()
        HANDLERS[args.command](run)
    except (RunError, ContractViolation, NumericFault, OSError) as exc:
        print(f"dnr {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
