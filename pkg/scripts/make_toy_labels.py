"""Write procedural toy head label maps as NIfTI volumes.

The output files feed the `corticarve generate` and `corticarve train`
commands when no anatomical segmentations are at hand.
"""

import argparse
import os
import sys

from corticarve import fileio
from corticarve.toydata import make_toy_label_map


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out-dir", required=True)
    ap.add_argument("--count", type=int, default=8)
    ap.add_argument("--dims", type=int, default=32)
    ap.add_argument("--seed-base", type=int, default=0)
    a = ap.parse_args(argv)

    os.makedirs(a.out_dir, exist_ok=True)
    for i in range(a.count):
        m = make_toy_label_map(a.seed_base + i, dims=a.dims)
        path = os.path.join(a.out_dir, f"toy_{a.seed_base + i:03d}.nii")
        fileio.write_volume(m, path, datatype="int16")
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
