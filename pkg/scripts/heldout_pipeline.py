"""gen -> train -> embed -> evaluate through the CLI, scoring a held-out test split.

The vocabulary is kept smaller than images x concepts so images share
concept words; otherwise every test caption is out of vocabulary and the
held-out numbers sit at chance.

    python scripts/heldout_pipeline.py --workdir /tmp/tern_demo --epochs 60
"""

import argparse
import json
import sys
from pathlib import Path

from tern.cli import main as tern
from tern.config import RunConfig


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--workdir", default="tern_demo")
    ap.add_argument("--images", type=int, default=100)
    ap.add_argument("--test-images", type=int, default=50)
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--vocab", type=int, default=60)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--folds", type=int, default=5)
    args = ap.parse_args(argv)

    root = Path(args.workdir)
    data, run = root / "data", root / "run"
    steps = [["gen", "--out", str(data), "--seed", str(args.seed), "--images", str(args.images),
              "--test-images", str(args.test_images), "--vocab", str(args.vocab)]]
    cfg = RunConfig.desk(data, run)
    cfg.train.epochs = args.epochs
    cfg.train.seed = args.seed
    cfg.train.checkpoint_every = max(1, args.epochs // 4)
    root.mkdir(parents=True, exist_ok=True)
    cfg.write(root / "config.json")
    conf = ["--config", str(root / "config.json")]
    emb = run / "embeddings_test.jsonl"
    steps += [["train", *conf],
              ["embed", *conf, "--checkpoint", str(run / "checkpoints" / "best.ckpt"), "--output", str(emb)],
              ["evaluate", *conf, "--embeddings", str(emb), "--out", str(root / "eval")],
              ["evaluate", *conf, "--embeddings", str(emb), "--out", str(root / "eval_folds"),
               "--folds", str(args.folds)]]
    for argv_ in steps:
        code = tern(argv_)
        if code:
            return code
    summary = json.loads((root / "eval" / "summary.json").read_text())
    print(json.dumps(summary, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
