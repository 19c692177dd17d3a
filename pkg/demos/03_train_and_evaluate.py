"""Train both models on a small phantom corpus and compare them.

Drives the same commands an operator would run from the shell, with a
deliberately tiny network so the whole script finishes in well under a
minute. Scale up `--count`, `train.epochs` and `model.widths` for a real run.

    python3 demos/03_train_and_evaluate.py [work_dir]
"""

import sys
import tempfile
from pathlib import Path

from ssar.cli import main

work = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp())

config = """\
data.manifest=corpus/manifest.csv
data.target_hw=12,12
data.n_slices=12
model.widths=4,8,16
model.blocks=1,1,1
model.stem_kernel=3
model.stem_stride=1
model.maxpool=false
model.hidden=8
train.lr0=1e-3
train.epochs=8
train.checkpoint_every=4
threads=1
"""
(work / "run.cfg").write_text(config)


def ssar(*args):
    print("$ ssar", " ".join(args))
    code = main(list(args))
    if code:
        sys.exit(code)


ssar("generate-synth", "--out", str(work / "corpus"), "--count", "40", "--dims", "12,12,12", "--seed", "0", "--force")
for kind in ("sliceseq", "vol3d"):
    ssar("train", "--config", str(work / "run.cfg"), "--model", kind, "--out", str(work / kind))
ssar(
    "eval",
    "--weights", str(work / "sliceseq" / "final.ssar"),
    "--weights", str(work / "vol3d" / "final.ssar"),
    "--manifest", str(work / "corpus" / "manifest.csv"),
    "--out", str(work / "eval"),
)
ssar("predict", "--weights", str(work / "sliceseq" / "final.ssar"), "--volume", str(work / "corpus" / "sub-000.raw"))
print("outputs in", work)
