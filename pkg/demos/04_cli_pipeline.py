"""
The command line pipeline end to end
====================================

Drives the ``grouptraj`` commands from Python: synthesize a crowd, recover
its groups from motion alone, train briefly, evaluate, sample, and sweep
rho.  The same steps work from a shell with ``grouptraj <command> ...``.
"""

import argparse
import sys
from pathlib import Path

from grouptraj.cli import main

parser = argparse.ArgumentParser(description=__doc__.strip().splitlines()[0])
parser.add_argument("--out", default="demo_pipeline")
parser.add_argument("--epochs", type=int, default=5)
args = parser.parse_args()
out = Path(args.out)


def run(*argv):
    print("$ grouptraj", " ".join(argv))
    code = main(list(argv))
    if code != 0:
        sys.exit(code)


# ten independent episodes of three groups, with a little walking noise
run("gen-synth", "--out", str(out / "data"), "--group-sizes", "2,2,1", "--episodes", "10", "--noise", "0.02")
traj, labels = str(out / "data" / "synth.txt"), str(out / "data" / "synth_groups.txt")

# heuristic labels from positions and velocities (compare with synth_groups.txt)
run("label-groups", "--data", traj, "--out", str(out / "labels"))

common = ["--train", traj, "--train-labels", labels, "--epochs", str(args.epochs), "--lr", "1e-3", "--batch", "8"]
run("train", *common, "--out", str(out / "train"))
ckpt = str(out / "train" / "best.ckpt")
run("eval", "--checkpoint", ckpt, "--data", traj, "--labels", labels, "--out", str(out / "eval"))
run("sample", "--checkpoint", ckpt, "--data", traj, "--labels", labels, "--out", str(out / "sample"))

# the resolved config of any command reproduces it exactly
run("eval", "--config", str(out / "eval" / "eval.config"), "--out", str(out / "eval_again"))
same = (out / "eval" / "metrics.csv").read_text() == (out / "eval_again" / "metrics.csv").read_text()
print("rerun from echoed config identical:", same)

run("sweep-rho", *common, "--rhos", "0,0.5,1", "--out", str(out / "sweep"))
print((out / "sweep" / "rho_sweep.csv").read_text())
