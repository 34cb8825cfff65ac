"""Regenerate the committed binary fixtures under tests/fixtures/.

Run from the repository root:

    python3 scripts/make_fixtures.py

Rewrites the golden forward-pass triple (checkpoint, input, expected output),
the hand-packed scaled NIfTI file, and the sha256 manifest. Regenerate only
when the formats themselves change; the test suite pins these bytes.
"""

import hashlib
import pathlib
import struct
import sys

import numpy as np

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from corticarve.unet import UNetConfig, UNetModel, save_checkpoint, unet_forward

FIXTURES = pathlib.Path(__file__).resolve().parents[1] / "tests" / "fixtures"


def golden_forward():
    cfg = UNetConfig(levels=3, filters=(4, 8, 16), head="sdt", in_shape=(16, 16, 16))
    model = UNetModel.create(cfg, seed=2024)
    # a couple of optimizer steps so Adam moments are non-trivial in the file
    from corticarve.unet import adam_step, unet_backward

    rng = np.random.default_rng(5)
    for _ in range(2):
        x = rng.random((16, 16, 16), dtype=np.float32)
        pred, cache = unet_forward(model, x, train=True)
        grads = unet_backward(model, cache, (pred / pred.size).astype(np.float32))
        adam_step(model, grads, 1e-3)
    save_checkpoint(model, FIXTURES / "golden_unet.ckpt", train_state={"note": "fixture"})

    x = np.random.default_rng(77).random((16, 16, 16), dtype=np.float32)
    y, _ = unet_forward(model, x)
    np.save(FIXTURES / "golden_input.npy", x)
    np.save(FIXTURES / "golden_output.npy", y.astype(np.float32))


def scaled_nifti():
    """Three-voxel int16 image with scl_slope=2, scl_inter=1, packed by hand.

    Stored values (3, -1, 10) must read back as float32 (7, -1, 21).
    """
    header = bytearray(348)
    struct.pack_into("<i", header, 0, 348)  # sizeof_hdr
    dims = (3, 1, 1)
    struct.pack_into("<8h", header, 40, 3, *dims, 1, 1, 1, 1)  # dim
    struct.pack_into("<h", header, 70, 4)  # datatype int16
    struct.pack_into("<h", header, 72, 16)  # bitpix
    struct.pack_into("<8f", header, 76, 1.0, 1.5, 2.0, 2.5, 1.0, 1.0, 1.0, 1.0)  # pixdim
    struct.pack_into("<f", header, 108, 352.0)  # vox_offset
    struct.pack_into("<f", header, 112, 2.0)  # scl_slope
    struct.pack_into("<f", header, 116, 1.0)  # scl_inter
    struct.pack_into("<h", header, 254, 1)  # sform_code
    struct.pack_into("<4f", header, 280, 1.5, 0.0, 0.0, -4.0)  # srow_x
    struct.pack_into("<4f", header, 296, 0.0, 2.0, 0.0, 5.0)  # srow_y
    struct.pack_into("<4f", header, 312, 0.0, 0.0, 2.5, 0.0)  # srow_z
    header[344:348] = b"n+1\x00"
    payload = np.array([3, -1, 10], dtype="<i2").tobytes()
    with open(FIXTURES / "scaled_int16.nii", "wb") as f:
        f.write(bytes(header) + b"\x00" * 4 + payload)


def manifest():
    lines = []
    for p in sorted(FIXTURES.iterdir()):
        if p.name == "MANIFEST.sha256":
            continue
        digest = hashlib.sha256(p.read_bytes()).hexdigest()
        lines.append(f"{digest}  {p.name}")
    (FIXTURES / "MANIFEST.sha256").write_text("\n".join(lines) + "\n")


if __name__ == "__main__":
    FIXTURES.mkdir(parents=True, exist_ok=True)
    golden_forward()
    scaled_nifti()
    manifest()
    print(f"fixtures written to {FIXTURES}")
