"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 data error. Progress goes to stderr,
data to files or stdout; --json switches stdout summaries to JSON. All
randomness hangs off --seed. CORTICARVE_THREADS caps --jobs parallelism.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import fileio, metrics
from .distance import band_target, signed_distance_transform
from .fileio import IOFormatError, RunConfig, load_config
from .inference import strip
from .synthesis import SynthesisConfig, fit_extracerebral_labels, synthesize_sample
from .train import TrainConfig, train_loop
from .unet import UNetConfig, UNetModel, load_checkpoint, save_checkpoint

log = logging.getLogger("corticarve")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad flags; the contract here is exit 1 for usage
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _build_parser():
    p = _Parser(prog="corticarve", description="synthesis-trained brain extraction toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", metavar="command")

    g = sub.add_parser("generate", help="synthesize training samples from a label map")
    g.add_argument("--labels", required=True, help="input label volume (.nii or .raw)")
    g.add_argument("--config", help="TOML run config")
    g.add_argument("--out-dir", required=True)
    g.add_argument("--count", type=int, default=1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--jobs", type=int, default=1)
    g.add_argument("--json", action="store_true")

    s = sub.add_parser("sdt", help="signed distance transform of a mask")
    s.add_argument("--mask", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--band-mm", type=float, default=None, help="clamp magnitude to this band")

    x = sub.add_parser("labels-xc", help="add intensity-quantile extra-cerebral labels")
    x.add_argument("--image", required=True)
    x.add_argument("--labels", required=True, help="brain label volume")
    x.add_argument("-k", type=int, default=6, help="number of extra-cerebral labels")
    x.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a network on synthesized samples")
    t.add_argument("--labels", required=True, nargs="+", help="training label volumes")
    t.add_argument("--config", help="TOML run config")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--seed", type=int, default=None, help="override [train] seed")
    t.add_argument("--steps", type=int, default=None, help="override [train] steps")
    t.add_argument("--history-csv", help="write per-step losses here")
    t.add_argument("--json", action="store_true")

    st = sub.add_parser("strip", help="extract a brain mask from an image")
    st.add_argument("--model", required=True, help="checkpoint path")
    st.add_argument("--image", required=True)
    st.add_argument("--out", required=True, help="output mask volume")
    st.add_argument("--threshold", type=float, default=0.0, help="sdt cut, mm")
    st.add_argument("--out-sdt", help="also write the predicted distances (sdt head)")

    e = sub.add_parser("evaluate", help="score predicted masks against references")
    e.add_argument("--pred", required=True, nargs="+")
    e.add_argument("--truth", required=True, nargs="+")
    e.add_argument("--out-csv", help="per-case metric rows")
    e.add_argument("--baseline-csv", help="paired t-test against this earlier report")
    e.add_argument("--json", action="store_true")

    d = sub.add_parser("dv", help="discordant voxel percentage across frames")
    d.add_argument("masks", nargs="+", help="frame masks, two or more")
    d.add_argument("--json", action="store_true")

    b = sub.add_parser("ebv", help="exposed boundary voxel percentage of a mask")
    b.add_argument("--mask", required=True)
    b.add_argument("--json", action="store_true")
    return p


def _load_run_config(path) -> RunConfig:
    if path is None:
        return RunConfig(SynthesisConfig(), TrainConfig(), UNetConfig())
    return load_config(path)


def _emit(payload, as_json):
    if as_json:
        print(json.dumps(payload, sort_keys=True))
    else:
        for k, v in payload.items():
            print(f"{k}: {v}")


def _generate_one(args):
    s, cfg, out_dir, master_seed, index = args
    seed = int(np.random.SeedSequence([master_seed, index]).generate_state(1, np.uint64)[0])
    sample = synthesize_sample(s, cfg, seed)
    stem = os.path.join(out_dir, f"sample_{index:04d}")
    fileio.write_volume(sample.image, stem + "_img.nii", "float32")
    fileio.write_volume(sample.mask, stem + "_mask.nii", "uint8")
    fileio.write_volume(
        fileio.ScalarVolume(sample.sdt.grid, sample.sdt.values), stem + "_sdt.nii", "float32"
    )
    return stem


def _cmd_generate(a) -> int:
    cfg = _load_run_config(a.config).synthesis
    s = fileio.read_volume(a.labels, as_labels=True)
    os.makedirs(a.out_dir, exist_ok=True)
    jobs = max(1, a.jobs)
    cap = os.environ.get("CORTICARVE_THREADS")
    if cap:
        jobs = min(jobs, max(1, int(cap)))
    tasks = [(s, cfg, a.out_dir, a.seed, i) for i in range(a.count)]
    if jobs == 1:
        stems = [_generate_one(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            stems = list(ex.map(_generate_one, tasks))
    _emit({"written": len(stems), "out_dir": a.out_dir, "seed": a.seed}, a.json)
    return 0


def _cmd_sdt(a) -> int:
    mask = fileio.read_mask(a.mask)
    sdt = signed_distance_transform(mask)
    if a.band_mm is not None:
        sdt, _ = band_target(sdt, t=a.band_mm)
    fileio.write_volume(fileio.ScalarVolume(sdt.grid, sdt.values), a.out, "float32")
    return 0


def _cmd_labels_xc(a) -> int:
    head = fileio.read_volume(a.image)
    brain = fileio.read_volume(a.labels, as_labels=True)
    merged = fit_extracerebral_labels(head, brain, k=a.k)
    if merged.data.max() > np.iinfo(np.int16).max:
        raise IOFormatError("out-of-range-cast", "label ids exceed int16")
    fileio.write_volume(merged, a.out, "int16")
    return 0


def _cmd_train(a) -> int:
    run = _load_run_config(a.config)
    tcfg = run.train
    if a.seed is not None:
        tcfg = TrainConfig(**{**_cfg_dict(tcfg), "seed": a.seed})
    if a.steps is not None:
        tcfg = TrainConfig(**{**_cfg_dict(tcfg), "steps": a.steps})
    maps = [fileio.read_volume(p, as_labels=True) for p in a.labels]
    model = UNetModel.create(run.network, seed=tcfg.seed)
    model, state, history = train_loop(model, maps, run.synthesis, tcfg)
    from .train import _state_dict

    save_checkpoint(model, a.out, train_state=_state_dict(state))
    if a.history_csv:
        import csv

        with open(a.history_csv, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "train_loss", "lr"])
            for s, l, lr in zip(history.steps, history.train_loss, history.lr):
                w.writerow([s, repr(l), repr(lr)])
            w.writerow([])
            w.writerow(["val_step", "val_loss"])
            for s, l in zip(history.val_steps, history.val_loss):
                w.writerow([s, repr(l)])
    _emit(
        {
            "checkpoint": a.out,
            "steps": state.step,
            "final_lr": state.lr,
            "final_train_loss": history.train_loss[-1] if history.train_loss else None,
        },
        a.json,
    )
    return 0


def _cfg_dict(cfg):
    from dataclasses import asdict

    return asdict(cfg)


def _cmd_strip(a) -> int:
    model, _ = load_checkpoint(a.model)
    vol = fileio.read_volume(a.image)
    if a.out_sdt:
        mask, sdt = strip(model, vol, threshold=a.threshold, return_sdt=True)
        fileio.write_volume(fileio.ScalarVolume(sdt.grid, sdt.values), a.out_sdt, "float32")
    else:
        mask = strip(model, vol, threshold=a.threshold)
    fileio.write_volume(mask, a.out, "uint8")
    return 0


def _cmd_evaluate(a) -> int:
    if len(a.pred) != len(a.truth):
        raise ValueError(f"{len(a.pred)} predictions vs {len(a.truth)} references")
    reports = []
    ids = []
    for p, t in zip(a.pred, a.truth):
        pm = fileio.read_mask(p)
        tm = fileio.read_mask(t)
        reports.append(metrics.evaluate_pair(pm, tm))
        ids.append(os.path.basename(p))
    baseline = None
    if a.baseline_csv:
        _, baseline = metrics.read_report_csv(a.baseline_csv)
    summary = metrics.summarize_cohort(reports, baseline)
    if a.out_csv:
        metrics.write_report_csv(a.out_csv, reports, ids)
    if a.json:
        print(
            json.dumps(
                {
                    "n": summary.n,
                    "means": summary.means,
                    "sds": summary.sds,
                    "p_values": summary.p_values,
                },
                sort_keys=True,
            )
        )
    else:
        for line in summary.format_lines():
            print(line)
    return 0


def _cmd_dv(a) -> int:
    frames = [fileio.read_mask(p) for p in a.masks]
    val = metrics.discordant_voxel_pct(frames)
    _emit({"discordant_voxel_pct": val}, a.json)
    return 0


def _cmd_ebv(a) -> int:
    val = metrics.exposed_boundary_pct(fileio.read_mask(a.mask))
    _emit({"exposed_boundary_pct": val}, a.json)
    return 0


_COMMANDS = {
    "generate": _cmd_generate,
    "sdt": _cmd_sdt,
    "labels-xc": _cmd_labels_xc,
    "train": _cmd_train,
    "strip": _cmd_strip,
    "evaluate": _cmd_evaluate,
    "dv": _cmd_dv,
    "ebv": _cmd_ebv,
}


def run(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except (IOFormatError, FileNotFoundError, ValueError, RuntimeError) as e:
        log.error("%s", e)
        return 2


def main() -> int:
    return run(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
