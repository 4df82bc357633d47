"""The `aecnn` command line, driven end to end from Python.

Writes a config, trains a small model, evaluates it, runs the rotation
audit, and dumps local frames for a cloud, all through the same entry
point the installed `aecnn` script uses. Each command prints JSON lines;
the first line always carries "schema": 1.
"""
import json
import tempfile
from pathlib import Path

from aecnn.cli import main
from aecnn.config import NetworkConfig, SaFirstConfig, SaNextConfig, save_config

workdir = Path(tempfile.mkdtemp(prefix="aecnn-tour-"))
print(f"working in {workdir}\n")

config = NetworkConfig(
    n_points=64,
    sa_first=SaFirstConfig(n_ref=32, k=10, widths=(16, 24)),
    sa_next=(SaNextConfig(8, (24, 32)),),
    head_widths=(24,),
)
config_path = workdir / "small.ini"
save_config(config_path, config)

run_dir = workdir / "run"
print("$ aecnn train small.ini run/ --epochs 3 --n-per-class 10")
main(["train", str(config_path), str(run_dir),
      "--epochs", "3", "--n-per-class", "10"])

print("\n$ aecnn eval run/model.ckpt synth-classification --votes 3")
main(["eval", str(run_dir / "model.ckpt"), "synth-classification",
      "--n-per-class", "5", "--votes", "3"])

print("\n$ aecnn invariance-audit run/model.ckpt --clouds 5 --rotations 6")
code = main(["invariance-audit", str(run_dir / "model.ckpt"),
             "--clouds", "5", "--rotations", "6"])
print(f"(exit code {code}; 3 would mean the audit failed)")

# The run record is replayable JSON, one object per line.
lines = (run_dir / "run.jsonl").read_text().splitlines()
kinds = [json.loads(line)["type"] for line in lines]
print(f"\nrun.jsonl holds {len(lines)} lines: {kinds}")
