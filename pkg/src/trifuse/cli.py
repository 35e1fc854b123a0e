"""Command-line front end.

Subcommands: depth2normal, events2frame, fuse, eval, gradcheck.  Exit codes
are a stable contract: 0 success, 1 check failure, 2 usage or input error.
Every command is deterministic given identical flags, inputs, and seeds.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from trifuse import fusion, metrics
from trifuse.container import ContainerError, load_tensor, save_tensor
from trifuse.events import EventError, parse_events, rasterize, split_windows
from trifuse.geometry import DepthMap, depth_to_normals, save_normal_png
from trifuse.gradcheck import DEFAULT_THRESHOLD, finite_diff_check
from trifuse.tensor import Tensor

DEFAULT_WINDOW_US = 50_000
DEFAULT_BINS = 1
KERNEL_FLAGS = {"delta": "delta", "bilinear-t": "bilinear_t"}


class UsageError(Exception):
    """Input or configuration problem; maps to exit code 2."""


@dataclass
class PipelineConfig:
    """Validated knobs shared by the pipeline commands."""

    seed: int = 0
    verbose: bool = False
    window_us: int = DEFAULT_WINDOW_US
    bins: int = DEFAULT_BINS
    kernel: str = "delta"
    width: int | None = None
    height: int | None = None
    channels: int | None = None
    reduced_channels: int | None = None
    groups: int | None = None
    iou_start: float = 0.50
    iou_stop: float = 0.95
    iou_step: float = 0.05

    def validate(self) -> None:
        if self.window_us <= 0:
            raise UsageError(f"--window-us must be positive, got {self.window_us}")
        if self.bins < 1:
            raise UsageError(f"--bins must be >= 1, got {self.bins}")
        if self.kernel not in KERNEL_FLAGS.values():
            raise UsageError(f"unknown kernel {self.kernel!r}")
        if not (0 < self.iou_step and 0 < self.iou_start <= self.iou_stop <= 1):
            raise UsageError(
                f"bad IoU sweep: start={self.iou_start} stop={self.iou_stop} step={self.iou_step}"
            )

    def iou_thresholds(self) -> tuple[float, ...]:
        out = []
        t = self.iou_start
        while t <= self.iou_stop + 1e-9:
            out.append(round(t, 6))
            t += self.iou_step
        return tuple(out)


def _require_input(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"input path does not exist: {p}")
    return p


def _log(args, message: str) -> None:
    if args.verbose:
        print(f"# {message}", file=sys.stderr)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def cmd_depth2normal(args) -> int:
    depth = DepthMap.from_tensor(load_tensor(_require_input(args.input)))
    normals = depth_to_normals(depth)
    save_tensor(args.output, normals.to_tensor())
    if args.png:
        save_normal_png(args.png, normals)
        _log(args, f"wrote {args.png}")
    count = int(normals.valid.sum())
    mean_nz = float(np.abs(normals.normal[2][normals.valid]).mean()) if count else 0.0
    print(f"valid pixels: {count}")
    print(f"mean |n_z|: {mean_nz:.6f}")
    return 0


def cmd_events2frame(args) -> int:
    config = PipelineConfig(
        window_us=args.window_us, bins=args.bins, kernel=KERNEL_FLAGS[args.kernel],
    )
    config.validate()
    if args.width < 1 or args.height < 1:
        raise UsageError(f"sensor geometry must be positive, got {args.width}x{args.height}")
    with open(_require_input(args.input), "rb") as fh:
        stream = parse_events(fh, width=args.width, height=args.height)
    windows = split_windows(stream, config.window_us)
    out_dir = Path(args.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, window in enumerate(windows):
        frame = rasterize(window, bins=config.bins, kernel=config.kernel)
        save_tensor(out_dir / f"window_{i:05d}.ten", frame.tensor)
        print(f"window {i:05d}: {len(window.events)} events")
    print(f"windows: {len(windows)}")
    return 0


def cmd_fuse(args) -> int:
    f_r = load_tensor(_require_input(args.rgb))
    f_n = load_tensor(_require_input(args.normal))
    f_e = load_tensor(_require_input(args.events))
    shapes = {t.shape for t in (f_r, f_n, f_e)}
    if len(shapes) != 1 or f_r.rank != 3:
        raise UsageError(
            f"feature inputs must share one (C,H,W) shape, got rgb={f_r.shape} "
            f"normal={f_n.shape} events={f_e.shape}"
        )
    for name, t in (("rgb", f_r), ("normal", f_n), ("events", f_e)):
        if not np.isfinite(t.data).all():
            raise UsageError(f"{name} features contain non-finite values")
    channels = f_r.shape[0]

    if args.init_seed is not None:
        c_prime = args.c_prime if args.c_prime is not None else fusion.default_reduced_channels(channels)
        groups = args.groups if args.groups is not None else fusion.default_groups(channels)
        try:
            adfm = fusion.adfm_init(channels, c_prime, seed=args.init_seed)
            eafm = fusion.eafm_init(channels, groups, seed=args.init_seed)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        if args.params:
            params_dir = Path(args.params)
            if (params_dir / fusion.MANIFEST_NAME).exists():
                raise UsageError(f"refusing to overwrite existing parameters in {params_dir}")
            fusion.save_fusion_params(params_dir, adfm, eafm)
            _log(args, f"initialized parameters (seed {args.init_seed}) into {params_dir}")
    elif args.params:
        try:
            adfm, eafm = fusion.load_fusion_params(args.params)
        except (OSError, ValueError) as exc:
            raise UsageError(str(exc)) from None
        if adfm.channels != channels:
            raise UsageError(f"params expect {adfm.channels} channels, inputs have {channels}")
    else:
        raise UsageError("either --params or --init-seed is required")

    stage1 = fusion.adfm_forward(f_r, f_n, adfm)
    if args.verbose:
        identical = np.array_equal(stage1.data, f_r.data)
        _log(args, f"adfm stage output identical to rgb input: {identical}")
    fused = fusion.eafm_forward(stage1, f_e, eafm)
    out_path = Path(args.output)
    save_tensor(out_path, fused)
    print(f"sha256: {_sha256(out_path)}")
    return 0


def cmd_eval(args) -> int:
    config = PipelineConfig(iou_start=args.iou_start, iou_stop=args.iou_stop, iou_step=args.iou_step)
    config.validate()
    path = _require_input(args.input)
    try:
        dets, gts = metrics.load_annotations(path)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from None
    report = metrics.map_suite(dets, gts, thresholds=config.iou_thresholds())
    print(report.format_table())
    if args.output:
        Path(args.output).write_text(json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n")
        _log(args, f"wrote {args.output}")
    return 0


def cmd_gradcheck(args) -> int:
    from trifuse import tensor as T

    if args.module not in ("adfm", "eafm"):
        raise UsageError(f"unknown module {args.module!r}, expected adfm or eafm")
    channels = args.c
    height, width = args.height, args.width
    c_prime = args.c_prime if args.c_prime is not None else fusion.default_reduced_channels(channels)
    # single group by default: per-channel normalization would make the conv
    # biases provably dead, which no relative gradient check can measure
    groups = args.groups if args.groups is not None else 1
    if args.module == "eafm" and channels % groups != 0:
        raise UsageError(f"groups={groups} does not divide channels={channels}")
    if not 1 <= c_prime <= channels:
        raise UsageError(f"--c-prime must lie in [1, {channels}], got {c_prime}")

    worst: dict[str, float] = {}
    for s in range(args.seeds):
        seed = args.seed + s
        rng = np.random.default_rng(seed)
        a = Tensor(rng.standard_normal((channels, height, width)).astype(np.float32))
        b = Tensor(rng.standard_normal((channels, height, width)).astype(np.float32))
        # the objective is a random weighted sum of the module output so no
        # parameter's influence cancels out of a uniform spatial sum
        weight = Tensor(rng.standard_normal((channels, height, width)).astype(np.float32))
        if args.module == "adfm":
            params = fusion.adfm_init(channels, c_prime, seed=seed)
            # nonzero gate so the attention path carries gradient
            named = dict(params.named())
            named["adfm.alpha"] = Tensor(rng.standard_normal(1).astype(np.float32))

            def fn(p, tape, a=a, b=b, weight=weight):
                out = fusion.adfm_forward(a, b, fusion.ADFMParams.from_named(p), tape)
                return T.mul(out, weight, tape)
        else:
            params = fusion.eafm_init(channels, groups, seed=seed)
            named = dict(params.named())

            def fn(p, tape, a=a, b=b, groups=groups, weight=weight):
                out = fusion.eafm_forward(a, b, fusion.EAFMParams.from_named(p, groups=groups), tape)
                return T.mul(out, weight, tape)

        report = finite_diff_check(fn, named, eps=args.eps, perturb=args.perturb_grad)
        for name, err in report.per_param.items():
            worst[name] = max(worst.get(name, 0.0), err)

    for name in sorted(worst):
        print(f"{name}: {worst[name]:.3e}")
    ok = max(worst.values()) < DEFAULT_THRESHOLD
    print(f"worst: {max(worst.values()):.3e} ({'PASS' if ok else 'FAIL'} at {DEFAULT_THRESHOLD:g})")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--seed", type=int, default=0, help="base seed for anything random")
    shared.add_argument("--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="trifuse", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("depth2normal", parents=[shared], help="depth .ten -> unit-normal .ten (+ optional PNG)")
    p.add_argument("--input", required=True, help="rank-2 depth .ten (NaN marks invalid pixels)")
    p.add_argument("--output", required=True, help="rank-3 (3,H,W) normal .ten to write")
    p.add_argument("--png", help="optional 8-bit RGB visualization path")
    p.set_defaults(fn=cmd_depth2normal)

    p = sub.add_parser("events2frame", parents=[shared], help="event CSV -> one frame .ten per time window")
    p.add_argument("--input", required=True, help="event CSV (t_us,x,y,polarity)")
    p.add_argument("--output", required=True, help="output directory for window_NNNNN.ten files")
    p.add_argument("--width", type=int, required=True, help="sensor width in pixels")
    p.add_argument("--height", type=int, required=True, help="sensor height in pixels")
    p.add_argument("--window-us", type=int, default=DEFAULT_WINDOW_US, help="window length in microseconds")
    p.add_argument("--bins", type=int, default=DEFAULT_BINS, help="temporal bins per window")
    p.add_argument("--kernel", choices=sorted(KERNEL_FLAGS), default="delta", help="deposit kernel")
    p.set_defaults(fn=cmd_events2frame)

    p = sub.add_parser("fuse", parents=[shared], help="fuse rgb/normal/event feature maps")
    p.add_argument("--rgb", required=True, help="RGB feature .ten (C,H,W)")
    p.add_argument("--normal", required=True, help="normal feature .ten (C,H,W)")
    p.add_argument("--events", required=True, help="event feature .ten (C,H,W)")
    p.add_argument("--output", required=True, help="fused feature .ten to write")
    p.add_argument("--params", help="parameter directory (see README for layout)")
    p.add_argument("--init-seed", type=int, help="initialize fresh parameters from this seed")
    p.add_argument("--c-prime", type=int, help="reduced channel count for initialization")
    p.add_argument("--groups", type=int, help="group-norm group count for initialization")
    p.set_defaults(fn=cmd_fuse)

    p = sub.add_parser("eval", parents=[shared], help="detection metrics from annotations JSON")
    p.add_argument("--input", required=True, help="annotations JSON")
    p.add_argument("--output", help="report JSON to write")
    p.add_argument("--iou-start", type=float, default=0.50)
    p.add_argument("--iou-stop", type=float, default=0.95)
    p.add_argument("--iou-step", type=float, default=0.05)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[shared], help="finite-difference check of fusion gradients")
    p.add_argument("--module", required=True, help="adfm or eafm")
    p.add_argument("--c", type=int, default=4, help="channel count")
    p.add_argument("--c-prime", type=int, help="reduced channels (adfm)")
    p.add_argument("--groups", type=int, help="group-norm groups (eafm)")
    p.add_argument("--height", type=int, default=3)
    p.add_argument("--width", type=int, default=3)
    p.add_argument("--seeds", type=int, default=20, help="number of random cases")
    p.add_argument("--eps", type=float, default=1e-3, help="central-difference step")
    p.add_argument(
        "--perturb-grad", type=float, default=0.0,
        help="test-only negative control: scale analytic gradients by (1 + value)",
    )
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ContainerError, EventError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
