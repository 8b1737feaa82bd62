"""Command-line front end: reconstruct, train, eval, costcurve, sweep, synth.

Every command is deterministic given its flags and --seed; the resolved
configuration is written next to the outputs as ``config.txt`` (key=value)
and can be fed back through ``--config`` to reproduce a run.  Exit codes:
0 success, 1 usage error, 2 data/config error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from .costvolume import (build_cost_volume, cost_curve, save_cost_curve_csv,
                         winner_take_all)
from .depthmap import DepthMap, load_depth_png, save_depth_png
from .errors import DataFormatError, NumericalError
from .features import FeatureMap, load_feature_map, rgb_features
from .features import downsample_nearest
from .geometry import InverseDepthGrid, scale_intrinsics
from .learning import (ExtractorConfig, TrainConfig, extractor_forward,
                       load_extractor, save_extractor, save_history_csv, train)
from .learning.loss import LossWeights
from .metrics import CSV_HEADER, evaluate, format_table, mean_metrics
from .regularizer import (RegularizerConfig, lambda_sweep, minimize_energy,
                          save_energy_csv, save_sweep_csv)
from . import dataio

logger = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(1)


def _add_common(p: _Parser):
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0, help="seed for all randomness")
    p.add_argument("--threads", type=int, default=1,
                   help="worker cap (kernels are vectorized; results never depend on it)")
    p.add_argument("--config", default=None,
                   help="key=value file of defaults, as written next to outputs")


def _add_grid(p: _Parser):
    p.add_argument("--grid-bins", type=int, default=64)
    p.add_argument("--rho-min", type=float, default=0.0)
    p.add_argument("--rho-max", type=float, default=4.0)


def _add_recon(p: _Parser):
    p.add_argument("--dataset", required=True, help="TUM-layout sequence directory")
    p.add_argument("--features", default="rgb",
                   help="descriptor provider: rgb | file:<dir> | trained:<params>")
    p.add_argument("--norm", choices=("l1", "sql2"), default="l1")
    p.add_argument("--window", type=int, default=30, help="live frames each side")
    p.add_argument("--window-stride", type=int, default=1)
    p.add_argument("--keyframes", default="middle",
                   help="'middle', 'all', or comma-separated frame indices")
    p.add_argument("--rgb-mean", default=None,
                   help="r,g,b training mean for the rgb provider (default: window mean)")
    p.add_argument("--lambda", dest="lam", type=float, default=100.0,
                   help="regularization strength")
    p.add_argument("--cost-scale", type=float, default=1.0,
                   help="data-term rescale for providers with non-RGB cost magnitudes")
    p.add_argument("--reg-iters", type=int, default=80)


def build_parser() -> _Parser:
    ap = _Parser(prog="planesweep",
                 description="multi-view plane-sweep depth estimation")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("reconstruct", parents=[], help="depth maps + metrics per keyframe")
    _add_recon(p); _add_grid(p); _add_common(p)

    p = sub.add_parser("train", help="train the descriptor extractor")
    p.add_argument("--dataset", required=True)
    p.add_argument("--gap", type=int, default=30, help="frame gap of training pairs")
    p.add_argument("--blocks", type=int, default=3)
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--init-scale", type=float, default=0.4)
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--step", type=float, default=2e-5)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--clip-norm", type=float, default=10.0)
    p.add_argument("--lambda-rho", type=float, default=5.0)
    p.add_argument("--lambda-d", type=float, default=1.0)
    p.add_argument("--margin", type=float, default=10.0)
    _add_grid(p); _add_common(p)

    p = sub.add_parser("eval", help="score predicted depth PNGs against ground truth")
    p.add_argument("--pred", required=True, help="directory of predicted depth PNGs")
    p.add_argument("--gt", required=True, help="directory of ground-truth depth PNGs")
    _add_common(p)

    p = sub.add_parser("costcurve", help="per-pixel matching-error curves")
    _add_recon(p); _add_grid(p)
    p.add_argument("--pixels", required=True,
                   help="full-resolution pixels 'u,v;u,v;...'")
    _add_common(p)

    p = sub.add_parser("sweep", help="RMSE vs regularization strength")
    _add_recon(p); _add_grid(p)
    p.add_argument("--lambdas", required=True, help="comma-separated lambda values")
    _add_common(p)

    p = sub.add_parser("synth", help="write a synthetic TUM-layout fixture")
    p.add_argument("--kind", choices=dataio.SCENE_KINDS, default="textured_plane")
    p.add_argument("--size", default="64x48", help="WxH in pixels")
    p.add_argument("--frames", type=int, default=11)
    p.add_argument("--fx", type=float, default=64.0)
    p.add_argument("--baseline", type=float, default=0.02)
    p.add_argument("--depth", type=float, default=2.0)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--stripe-period", type=float, default=0.22)
    p.add_argument("--stripe-amp", type=float, default=80.0)
    p.add_argument("--envelope-amp", type=float, default=12.0)
    _add_common(p)
    return ap


# ---------------------------------------------------------------------------
# config round trip
# ---------------------------------------------------------------------------

_CONFIG_SKIP = ("out", "config")


def _write_config(args: argparse.Namespace, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"command={args.command}\n")
        for k in sorted(vars(args)):
            if k in _CONFIG_SKIP or k == "command":
                continue
            v = getattr(args, k)
            f.write(f"{k}={'' if v is None else v}\n")


def _config_argv(path) -> tuple[str, list[str]]:
    """Flags encoded in a config file, plus the command it belongs to."""
    command = None
    argv = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#") or "=" not in line:
                continue
            k, v = line.split("=", 1)
            if k == "command":
                command = v
            elif v != "":
                argv.extend([f"--{k.replace('_', '-')}", v])
    if command is None:
        raise DataFormatError(f"{path}: missing command= line")
    return command, argv


def _merge_config(argv: list[str]) -> list[str]:
    """Splice config-file flags before the user's own so the latter win."""
    if "--config" not in argv:
        return argv
    i = argv.index("--config")
    if i + 1 >= len(argv):
        raise DataFormatError("--config requires a path")
    command, cfg_flags = _config_argv(argv[i + 1])
    rest = [a for j, a in enumerate(argv) if j not in (i, i + 1)]
    if rest and not rest[0].startswith("-"):
        if rest[0] != command:
            raise DataFormatError(
                f"config file is for '{command}', not '{rest[0]}'")
        rest = rest[1:]
    return [command] + cfg_flags + rest


# ---------------------------------------------------------------------------
# shared pipeline pieces
# ---------------------------------------------------------------------------

def _grid_from(args) -> InverseDepthGrid:
    return InverseDepthGrid(args.grid_bins, args.rho_min, args.rho_max)


def _parse_keyframes(spec: str, seq_len: int) -> list[int]:
    if spec == "middle":
        return [seq_len // 2]
    if spec == "all":
        return list(range(seq_len))
    try:
        idxs = [int(s) for s in spec.split(",") if s]
    except ValueError as e:
        raise DataFormatError(f"bad --keyframes value {spec!r}") from e
    for i in idxs:
        if not 0 <= i < seq_len:
            raise DataFormatError(f"keyframe {i} outside sequence of {seq_len}")
    return idxs


def _window_mean(frames) -> np.ndarray:
    acc = np.zeros(3)
    n = 0
    for fr in frames:
        acc += fr.rgb.reshape(-1, 3).sum(axis=0)
        n += fr.rgb.shape[0] * fr.rgb.shape[1]
    return acc / n


class _Provider:
    """Turns sequence frames into feature maps at a fixed scale factor."""

    def __init__(self, spec: str, args, seq: dataio.Sequence):
        self.spec = spec
        self.label = spec.split(":")[0]
        self._params = None
        self._dir = None
        self._mean = None
        if spec == "rgb":
            if args.rgb_mean:
                self._mean = np.array([float(v) for v in args.rgb_mean.split(",")])
            self.factor = 1
        elif spec.startswith("file:"):
            self._dir = spec[5:]
            probe = self._load_file(seq.frames[0].timestamp)
            f = seq.intrinsics.width // probe.width
            if f < 1 or f & (f - 1) or -(-seq.intrinsics.width // f) != probe.width:
                raise DataFormatError(
                    f"feature maps ({probe.width} wide) are not a power-of-two "
                    f"downscale of the images ({seq.intrinsics.width} wide)")
            self.factor = f
        elif spec.startswith("trained:"):
            self._params = load_extractor(spec[8:])
            self.factor = 2  # aggregated output of the stride-2 first block
        else:
            raise DataFormatError(f"unknown feature provider {spec!r}")

    def _load_file(self, ts: float) -> FeatureMap:
        path = os.path.join(self._dir, f"{ts:.6f}.fmap")
        if not os.path.exists(path):
            raise DataFormatError(f"missing feature map {path}")
        return load_feature_map(path)

    def maps_for(self, frames) -> list[FeatureMap]:
        if self.spec == "rgb":
            mean = self._mean if self._mean is not None else _window_mean(frames)
            return [rgb_features(fr.rgb, mean) for fr in frames]
        if self._dir is not None:
            return [self._load_file(fr.timestamp) for fr in frames]
        out = []
        for fr in frames:
            pyr, _ = extractor_forward(self._params, fr.rgb)
            out.append(pyr.aggregated)
        return out


def _keyframe_volume(seq, provider: _Provider, ref_idx: int, args, grid):
    win = dataio.make_window(seq, ref_idx, half_width=args.window,
                             stride=args.window_stride)
    maps = provider.maps_for([win.reference, *win.lives])
    intr_s = scale_intrinsics(seq.intrinsics, provider.factor)
    cv = build_cost_volume(maps[0], list(zip(maps[1:], win.relative_poses)),
                           grid, intr_s, norm=args.norm)
    gt_depth = downsample_nearest(win.reference.depth, provider.factor)
    gt = DepthMap(gt_depth, gt_depth > 0)
    return win, cv, gt


def cmd_reconstruct(args) -> int:
    seq = dataio.load_tum_sequence(args.dataset)
    provider = _Provider(args.features, args, seq)
    grid = _grid_from(args)
    reg_cfg = RegularizerConfig(lam=args.lam, cost_scale=args.cost_scale,
                                max_outer_iters=args.reg_iters)
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for ref_idx in _parse_keyframes(args.keyframes, len(seq)):
        win, cv, gt = _keyframe_volume(seq, provider, ref_idx, args, grid)
        ts = f"{win.reference.timestamp:.6f}"
        wta = winner_take_all(cv)
        res = minimize_energy(cv, reg_cfg)
        reg_dm = res.field.depth_map(reg_cfg.rho_floor)
        save_depth_png(wta, os.path.join(args.out, f"depth_wta_{ts}.png"))
        save_depth_png(reg_dm, os.path.join(args.out, f"depth_reg_{ts}.png"))
        save_energy_csv(res.energies, os.path.join(args.out, f"energy_{ts}.csv"))
        rows.append((f"{ts} wta", evaluate(wta, gt)))
        rows.append((f"{ts} regularized", evaluate(reg_dm, gt)))
    with open(os.path.join(args.out, "metrics.csv"), "w", encoding="utf-8") as f:
        f.write(f"keyframe,method,{CSV_HEADER}\n")
        for label, m in rows:
            ts, method = label.split(" ")
            f.write(f"{ts},{method},{m.csv_row()}\n")
    print(format_table(rows))
    _write_config(args, os.path.join(args.out, "config.txt"))
    return 0


def cmd_train(args) -> int:
    seq = dataio.load_tum_sequence(args.dataset)
    pairs = dataio.make_training_pairs(seq, gap=args.gap)
    if not pairs:
        raise DataFormatError(
            f"sequence of {len(seq)} frames yields no pairs at gap {args.gap}")
    cfg = TrainConfig(
        extractor=ExtractorConfig(blocks=args.blocks, channels=args.channels,
                                  init_scale=args.init_scale),
        grid=_grid_from(args),
        weights=LossWeights(args.lambda_rho, args.lambda_d, args.margin),
        iters=args.iters, step=args.step, momentum=args.momentum,
        clip_norm=args.clip_norm, seed=args.seed)
    result = train(pairs, cfg, seq.intrinsics)
    os.makedirs(args.out, exist_ok=True)
    save_extractor(result.params, os.path.join(args.out, "extractor.params"))
    save_history_csv(result.history, os.path.join(args.out, "loss_history.csv"))
    _write_config(args, os.path.join(args.out, "config.txt"))
    final = [v for _, tap, v in result.history if tap == "total"][-1]
    print(f"trained {args.iters} iterations on {len(pairs)} pairs; "
          f"final total loss {final:.6g}")
    return 0


def cmd_eval(args) -> int:
    preds = sorted(f for f in os.listdir(args.pred) if f.endswith(".png"))
    if not preds:
        raise DataFormatError(f"{args.pred}: no depth PNGs")
    rows = []
    for name in preds:
        gt_path = os.path.join(args.gt, name)
        if not os.path.exists(gt_path):
            raise DataFormatError(f"no ground truth for {name}")
        rows.append((name, evaluate(load_depth_png(os.path.join(args.pred, name)),
                                    load_depth_png(gt_path))))
    rows.append(("mean", mean_metrics([m for _, m in rows])))
    print(format_table(rows))
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "metrics.csv"), "w", encoding="utf-8") as f:
        f.write(f"frame,{CSV_HEADER}\n")
        for label, m in rows:
            f.write(f"{label},{m.csv_row()}\n")
    _write_config(args, os.path.join(args.out, "config.txt"))
    return 0


def _scaled_pixel(u: int, v: int, factor: int) -> tuple[int, int]:
    return (int(round((u + 0.5) / factor - 0.5)), int(round((v + 0.5) / factor - 0.5)))


def cmd_costcurve(args) -> int:
    seq = dataio.load_tum_sequence(args.dataset)
    grid = _grid_from(args)
    try:
        pixels = [tuple(int(v) for v in s.split(",")) for s in args.pixels.split(";") if s]
    except ValueError as e:
        raise DataFormatError(f"bad --pixels value {args.pixels!r}") from e
    providers = [_Provider("rgb", args, seq)]
    if args.features != "rgb":
        providers.append(_Provider(args.features, args, seq))
    os.makedirs(args.out, exist_ok=True)
    ref_idx = _parse_keyframes(args.keyframes, len(seq))[0]
    for provider in providers:
        _, cv, _ = _keyframe_volume(seq, provider, ref_idx, args, grid)
        for (u, v) in pixels:
            us, vs = _scaled_pixel(u, v, provider.factor)
            curve = cost_curve(cv, (us, vs))
            save_cost_curve_csv(grid, curve, os.path.join(
                args.out, f"costcurve_{provider.label}_u{u}_v{v}.csv"))
    _write_config(args, os.path.join(args.out, "config.txt"))
    return 0


def cmd_sweep(args) -> int:
    seq = dataio.load_tum_sequence(args.dataset)
    provider = _Provider(args.features, args, seq)
    grid = _grid_from(args)
    try:
        lambdas = [float(s) for s in args.lambdas.split(",") if s]
    except ValueError as e:
        raise DataFormatError(f"bad --lambdas value {args.lambdas!r}") from e
    ref_idx = _parse_keyframes(args.keyframes, len(seq))[0]
    win, cv, gt = _keyframe_volume(seq, provider, ref_idx, args, grid)
    cfg = RegularizerConfig(lam=1.0, cost_scale=args.cost_scale,
                            max_outer_iters=args.reg_iters)
    rows = lambda_sweep(cv, lambdas, gt, cfg)
    os.makedirs(args.out, exist_ok=True)
    save_sweep_csv(rows, os.path.join(args.out, "lambda_sweep.csv"))
    for lam, m in rows:
        print(f"lambda {lam:g}: rmse {m.rms:.4f}")
    _write_config(args, os.path.join(args.out, "config.txt"))
    return 0


def cmd_synth(args) -> int:
    try:
        w, h = (int(v) for v in args.size.lower().split("x"))
    except ValueError as e:
        raise DataFormatError(f"bad --size value {args.size!r}") from e
    cfg = dataio.SceneConfig(
        kind=args.kind, width=w, height=h, fx=args.fx, fy=args.fx,
        n_frames=args.frames, baseline=args.baseline, depth=args.depth,
        noise_sigma=args.noise, seed=args.seed,
        stripe_period=args.stripe_period, stripe_amp=args.stripe_amp,
        envelope_amp=args.envelope_amp)
    seq = dataio.synth_scene(cfg)
    os.makedirs(args.out, exist_ok=True)
    dataio.save_tum_sequence(seq, args.out)
    _write_config(args, os.path.join(args.out, "config.txt"))
    print(f"wrote {len(seq)} frames to {args.out}")
    return 0


_COMMANDS = {
    "reconstruct": cmd_reconstruct,
    "train": cmd_train,
    "eval": cmd_eval,
    "costcurve": cmd_costcurve,
    "sweep": cmd_sweep,
    "synth": cmd_synth,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        argv = _merge_config(argv)
    except (DataFormatError, OSError) as e:
        sys.stderr.write(f"planesweep: {e}\n")
        return 2
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (DataFormatError, OSError, ValueError) as e:
        sys.stderr.write(f"planesweep: data error: {e}\n")
        return 2
    except NumericalError as e:
        sys.stderr.write(f"planesweep: numerical failure: {e}\n")
        return 3


if __name__ == "__main__":
    sys.exit(main())
