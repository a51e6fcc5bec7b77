"""``gsmamba`` command line: verify, bench, field, backbone."""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import kernels
from .backbone import (PUBLISHED_TARGETS, PRESETS, BackboneConfig, backbone_forward,
                       count_params_flops, init_backbone, preset, stage_shapes)
from .errors import ParameterError
from .figures import (PATTERNS, WEIGHT_MODES, compute_field, direction_ppm, field_projections,
                      magnitude_pgm, scan_path_svg, synthetic_pattern)
from .graphscan import TokenGrid
from .verification import SuiteParams, run_suite

OUT_DIR_ENV = "GSMAMBA_OUT_DIR"
REPORT_SCHEMA = "gsmamba.verify/1"
TARGET_BAND = 0.15

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_INPUT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    height: int = 4
    width: int = 4
    channels: int = 3
    radius: int = 1
    heads: int = 1
    state_dim: int = 4
    rel_bias: bool = True
    radii: tuple[int, int, int, int] = (1, 1, 2, 3)
    variant: str = "tiny"
    tolerance: float | None = None
    tolerances: dict = field(default_factory=dict)
    out_dir: str = "gsmamba_out"
    backbone: dict | None = None

    def validate(self) -> "RunConfig":
        def bad(name, why):
            raise UsageError(f"invalid config field '{name}': {why}")

        if not 0 <= self.seed < 2**64:
            bad("seed", "must be a 64-bit unsigned integer")
        for name in ("height", "width", "channels", "heads", "state_dim"):
            if getattr(self, name) < 1:
                bad(name, "must be >= 1")
        if self.radius < 0:
            bad("radius", "must be >= 0")
        if len(self.radii) != 4 or any(r < 0 for r in self.radii):
            bad("radii", "needs four non-negative entries")
        if self.tolerance is not None and self.tolerance < 0:
            bad("tolerance", "must be >= 0")
        if self.variant.lower() not in PRESETS and self.backbone is None:
            bad("variant", f"unknown variant {self.variant!r}; valid: {sorted(PRESETS)}")
        return self


_FIELD_NAMES = {f.name for f in fields(RunConfig)}


def _coerce(name: str, value):
    if name == "radii":
        return tuple(int(v) for v in value)
    return value


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except OSError as e:
        raise InputError(f"cannot read config file {path}: {e}") from None
    except json.JSONDecodeError as e:
        raise UsageError(f"config file {path} is not valid JSON: {e}") from None
    if not isinstance(data, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    unknown = sorted(set(data) - _FIELD_NAMES)
    if unknown:
        raise UsageError(f"invalid config field '{unknown[0]}': not a RunConfig field")
    return {k: _coerce(k, v) for k, v in data.items()}


def build_config(args: argparse.Namespace) -> RunConfig:
    values = load_config(args.config)
    for name in ("seed", "height", "width", "channels", "radius", "heads", "variant", "tolerance"):
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    if args.out_dir is not None:
        values["out_dir"] = args.out_dir
    elif os.environ.get(OUT_DIR_ENV):
        values["out_dir"] = os.environ[OUT_DIR_ENV]
    try:
        cfg = RunConfig(**values)
    except TypeError as e:
        raise UsageError(str(e)) from None
    return cfg.validate()


def atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ------------------------------------------------------------------ verify


def cmd_verify(cfg: RunConfig, out=None) -> int:
    out = out or sys.stdout
    sp = SuiteParams(seed=cfg.seed, height=cfg.height, width=cfg.width, channels=cfg.channels,
                     radius=cfg.radius, heads=cfg.heads, state_dim=cfg.state_dim,
                     rel_bias=cfg.rel_bias)
    results = run_suite(sp, tolerances=cfg.tolerances, override=cfg.tolerance)
    failed = [r.name for r in results if not r.passed]
    report = {
        "schema": REPORT_SCHEMA,
        "backend": kernels.BACKEND,
        "config": {k: v for k, v in asdict(cfg).items() if k != "backbone"},
        "passed": not failed,
        "failed": failed,
        "checks": [r.to_dict() for r in results],
    }
    lines = [f"{'check':<22} {'status':<6} {'max_error':>12} {'tolerance':>12} {'seconds':>9}"]
    for r in results:
        lines.append(f"{r.name:<22} {'PASS' if r.passed else 'FAIL':<6} {r.max_error:>12.3e} "
                     f"{r.tolerance:>12.3e} {r.seconds:>9.4f}")
    lines.append("overall: " + ("PASS" if not failed else "FAIL (" + ", ".join(failed) + ")"))
    text = "\n".join(lines) + "\n"
    d = Path(cfg.out_dir)
    atomic_write(d / "verify_report.json", (json.dumps(report, indent=2) + "\n").encode())
    atomic_write(d / "verify_report.txt", text.encode())
    out.write(text)
    return EXIT_OK if not failed else EXIT_FAIL


# ------------------------------------------------------------------ bench


def parse_grid(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like 64x128, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError(f"grid extents must be positive, got {text!r}")
    return h, w


def cmd_bench(cfg: RunConfig, backends: list[str], repeats: int, grids=None, out=None) -> int:
    out = out or sys.stdout
    from .bench import CSV_HEADER, DEFAULT_GRIDS, run_bench

    rows = run_bench(radius=cfg.radius, channels=cfg.channels, grids=grids or DEFAULT_GRIDS,
                     backends=backends, repeats=repeats, seed=cfg.seed)
    text = CSV_HEADER + "\n" + "".join(r.csv() + "\n" for r in rows)
    atomic_write(Path(cfg.out_dir) / "bench.csv", text.encode())
    out.write(text)
    return EXIT_OK


# ------------------------------------------------------------------ field


def load_grid(path: str) -> TokenGrid:
    try:
        arr = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as e:
        raise InputError(f"cannot read feature grid {path}: {e}") from None
    if arr.ndim != 3:
        raise InputError(f"feature grid {path} must be H x W x D, got shape {arr.shape}")
    return TokenGrid(arr)


def cmd_field(cfg: RunConfig, pattern: str | None, input_path: str | None, weights: str,
              out=None) -> dict[str, Path]:
    out = out or sys.stdout
    grid = load_grid(input_path) if input_path else synthetic_pattern(
        pattern or "checker", cfg.height, cfg.width, cfg.channels)
    proj = field_projections(weights, grid.channels, cfg.radius, cfg.seed, heads=cfg.heads)
    fig = compute_field(grid, proj, cfg.radius)
    stem = Path(input_path).stem if input_path else (pattern or "checker")
    stem = f"{stem}_{weights}"
    d = Path(cfg.out_dir)
    paths = {"magnitude": d / f"{stem}_magnitude.pgm", "direction": d / f"{stem}_direction.ppm",
             "path": d / f"{stem}_path.svg"}
    atomic_write(paths["magnitude"], magnitude_pgm(fig))
    atomic_write(paths["direction"], direction_ppm(fig))
    atomic_write(paths["path"], scan_path_svg(fig))
    for p in paths.values():
        out.write(f"wrote {p}\n")
    return paths


# ------------------------------------------------------------------ backbone


def resolve_backbone(cfg: RunConfig) -> BackboneConfig:
    if cfg.backbone is not None:
        try:
            return BackboneConfig.from_dict(dict(cfg.backbone))
        except (TypeError, ParameterError) as e:
            raise UsageError(f"invalid config field 'backbone': {e}") from None
    try:
        bc = preset(cfg.variant)
    except ParameterError as e:
        raise UsageError(str(e)) from None
    return replace(bc, radii=tuple(cfg.radii), heads=cfg.heads, rel_bias=cfg.rel_bias)


def cmd_backbone(cfg: RunConfig, resolution: int, run_forward: bool, out=None) -> dict:
    out = out or sys.stdout
    bc = resolve_backbone(cfg)
    try:
        shapes = stage_shapes(bc, resolution)
    except ParameterError as e:
        raise UsageError(str(e)) from None
    cost = count_params_flops(bc, resolution)
    lines = [f"variant {bc.name} @ {resolution}x{resolution}"]
    for s, shp in enumerate(shapes, 1):
        lines.append(f"  stage {s}: {shp[0]}x{shp[1]}x{shp[2]}  radius {bc.radii[s - 1]}")
    lines.append(f"  params {cost.params:,}  FLOPs(MAC) {cost.flops:,}")
    report = {"variant": bc.name, "resolution": resolution, "stage_shapes": shapes,
              "params": cost.params, "flops": cost.flops,
              "breakdown": {k: list(v) for k, v in cost.breakdown.items()}}
    target = PUBLISHED_TARGETS.get(bc.name)
    if target is not None and resolution == 224:
        rp, rf = cost.params / target[0], cost.flops / target[1]
        ok = abs(rp - 1) <= TARGET_BAND and abs(rf - 1) <= TARGET_BAND
        lines.append(f"  published {target[0] / 1e6:.0f}M / {target[1] / 1e9:.1f}G -> ratio "
                     f"{rp:.3f} / {rf:.3f} (band +-{TARGET_BAND:.0%}) {'OK' if ok else 'OUTSIDE'}")
        report.update(target_params=target[0], target_flops=target[1], within_band=ok)
    if run_forward:
        img = np.random.default_rng(cfg.seed).normal(size=(resolution, resolution, bc.in_channels))
        res = backbone_forward(img, init_backbone(bc, cfg.seed))
        got = [tuple(s.shape) for s in res.stages]
        lines.append(f"  forward stage shapes {got}")
        report["forward_shapes"] = got
    text = "\n".join(lines) + "\n"
    atomic_write(Path(cfg.out_dir) / f"backbone_{bc.name}.json",
                 (json.dumps(report, indent=2) + "\n").encode())
    out.write(text)
    return report


# ------------------------------------------------------------------ entry


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int)
    common.add_argument("--height", type=int)
    common.add_argument("--width", type=int)
    common.add_argument("--channels", type=int)
    common.add_argument("--radius", type=int)
    common.add_argument("--heads", type=int)
    common.add_argument("--variant")
    common.add_argument("--tolerance", type=float, help="override every check tolerance")
    common.add_argument("--out-dir", dest="out_dir")
    common.add_argument("--config", help="JSON file with RunConfig fields")

    p = argparse.ArgumentParser(prog="gsmamba", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("verify", parents=[common], help="run the invariant suite")
    b = sub.add_parser("bench", parents=[common], help="time GraphScan and the scan kernels")
    b.add_argument("--backend", choices=kernels.available() + ["all"], default=None)
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--grid", type=parse_grid, action="append", dest="grids",
                   help="HxW grid to time (repeatable; default 16x16 up to 128x128)")
    f = sub.add_parser("field", parents=[common], help="emit displacement-field figures")
    src = f.add_mutually_exclusive_group()
    src.add_argument("--pattern", choices=PATTERNS)
    src.add_argument("--input", help=".npy file holding an H x W x D feature grid")
    f.add_argument("--weights", choices=WEIGHT_MODES, default="random")
    k = sub.add_parser("backbone", parents=[common], help="stage shapes and parameter/FLOP counts")
    k.add_argument("--resolution", type=int, default=224)
    k.add_argument("--run", action="store_true", help="also run a seeded forward pass")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = build_config(args)
        if args.command == "verify":
            return cmd_verify(cfg)
        if args.command == "bench":
            backends = kernels.available() if args.backend == "all" else [args.backend or kernels.BACKEND]
            return cmd_bench(cfg, backends, args.repeats, args.grids)
        if args.command == "field":
            cmd_field(cfg, args.pattern, args.input, args.weights)
            return EXIT_OK
        if args.command == "backbone":
            cmd_backbone(cfg, args.resolution, args.run)
            return EXIT_OK
    except UsageError as e:
        print(f"gsmamba: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (InputError, ParameterError) as e:
        print(f"gsmamba: {e}", file=sys.stderr)
        return EXIT_INPUT if isinstance(e, InputError) else EXIT_USAGE
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
