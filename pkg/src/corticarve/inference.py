"""Test-time mask extraction: conform, run the network, resample back."""

from __future__ import annotations

import warnings

import numpy as np

from .distance import SDTVolume
from .unet import UNetModel, unet_forward
from .volume import BinaryMask, ScalarVolume, conform, resample_to_grid


def _embed_centered(data, target_shape):
    """Center data in a zero array of target_shape, cropping where larger.

    Integer-voxel placement only, so embedding plus extraction is lossless
    for the surviving region. Returns (embedded, src_slices, dst_slices).
    """
    src_sl = []
    dst_sl = []
    for d, t in zip(data.shape, target_shape):
        if d <= t:
            off = (t - d) // 2
            src_sl.append(slice(0, d))
            dst_sl.append(slice(off, off + d))
        else:
            off = (d - t) // 2
            src_sl.append(slice(off, off + t))
            dst_sl.append(slice(0, t))
    out = np.zeros(target_shape, dtype=data.dtype)
    out[tuple(dst_sl)] = data[tuple(src_sl)]
    return out, tuple(src_sl), tuple(dst_sl)


def strip(model: UNetModel, vol: ScalarVolume, threshold: float = 0.0,
          return_sdt: bool = False):
    """Predict a brain mask in the input space of vol.

    The input is conformed (1-mm isotropic, [0, 1]) and center-embedded with
    zero fill into the network's fixed grid; the prediction is thresholded
    (sdt head) or argmaxed (dice head) in conformed space and resampled back
    to the original grid with nearest sampling. With return_sdt=True the sdt
    head also returns the predicted distances on the input grid (trilinear).
    """
    conf, orig_grid = conform(vol)
    net_shape = model.config.in_shape
    emb, src_sl, dst_sl = _embed_centered(conf.data, net_shape)
    if any(s.stop - s.start < d for s, d in zip(src_sl, conf.grid.dims)):
        warnings.warn(
            f"conformed dims {conf.grid.dims} exceed the network grid {net_shape}; "
            "anatomy outside the centered crop is treated as background"
        )
    pred, _ = unet_forward(model, emb.astype(np.float32), train=False)
    if model.config.head == "sdt":
        mask_net = pred >= threshold
    else:
        mask_net = pred[..., 1] > pred[..., 0]
    # pull the conformed region back out; voxels cropped away stay background
    mask_conf = np.zeros(conf.grid.dims, dtype=bool)
    mask_conf[src_sl] = mask_net[dst_sl]
    mask = resample_to_grid(BinaryMask(conf.grid, mask_conf), orig_grid, mode="nearest")
    if not return_sdt:
        return mask
    if model.config.head != "sdt":
        raise ValueError("return_sdt requires an sdt-head model")
    sdt_conf = np.full(conf.grid.dims, pred.min(), dtype=np.float64)
    sdt_conf[src_sl] = pred[dst_sl]
    sdt_vol = resample_to_grid(ScalarVolume(conf.grid, sdt_conf), orig_grid, mode="trilinear")
    return mask, SDTVolume(orig_grid, sdt_vol.data)
