"""Run the desk-scale training experiment and print summary metrics.

Trains the 3-level network on procedural toy heads, scores held-out
seeds, and optionally saves the checkpoint and a JSON report. This is
the same protocol the acceptance tests run, exposed for interactive use.
"""

import argparse
import json
import logging
import sys

from corticarve.experiment import evaluate_desk_model, train_desk_model
from corticarve.unet import save_checkpoint


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--head", choices=("sdt", "dice"), default="sdt")
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--cases", type=int, default=20, help="held-out test cases")
    ap.add_argument("--seed", type=int, default=11)
    ap.add_argument("--threshold", type=float, default=0.0, help="mask cut for the sdt head")
    ap.add_argument("--checkpoint", help="save the trained model here")
    ap.add_argument("--out-json", help="write per-case metrics here")
    a = ap.parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(asctime)s %(message)s")

    model, history = train_desk_model(head=a.head, steps=a.steps, seed=a.seed)
    if a.checkpoint:
        save_checkpoint(model, a.checkpoint)
    result = evaluate_desk_model(model, n_cases=a.cases, threshold=a.threshold)

    print(f"head {a.head}  steps {a.steps}  cases {a.cases}")
    print(f"mean dice {result.mean_dice:.4f}")
    print(f"mean surface distance {result.mean_msd:.3f} voxels")
    print(f"mean exposed boundary {result.mean_ebv:.2f} %")
    if a.out_json:
        with open(a.out_json, "w") as f:
            json.dump(
                {
                    "head": a.head, "steps": a.steps, "seed": a.seed,
                    "dice": result.dice, "msd_vox": result.msd_vox, "ebv": result.ebv,
                    "val_loss": history.val_loss,
                },
                f, indent=1,
            )
    return 0


if __name__ == "__main__":
    sys.exit(main())
