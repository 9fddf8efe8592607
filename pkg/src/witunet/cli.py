"""Command-line entry point.

Subcommands: make-data, train, denoise, eval, gradcheck, bench.
Config precedence: built-in defaults < config file ("key = value" lines,
'#' comments) < command-line flags; every override is logged to stderr.
Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from .errors import UsageError, WitunetError
from .bench import bench_table, loglog_slope, run_bench
from .data import NoiseSpec, PhantomSpec, build_corpus, TEST_MANIFEST, TRAIN_MANIFEST
from .gradcheck import FD_SETTINGS, check_network
from .metrics import MetricConfig
from .network import NetConfig, WiTUnet
from .tensor import atomic_write_bytes, load_wten, save_wten
from .training import OptimConfig, evaluate, train

# every key accepted in a config file, with its target dataclass field
_NET_KEYS = {f.name: f.type for f in dataclasses.fields(NetConfig)}
_OPTIM_KEYS = {f.name: f.type for f in dataclasses.fields(OptimConfig)}
KNOWN_KEYS = sorted(set(_NET_KEYS) | set(_OPTIM_KEYS) | {"metric_max"})


def _parse_value(raw: str):
    raw = raw.strip()
    low = raw.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null"):
        return None
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        return raw


def read_config_file(path: str) -> dict:
    """Flat "key = value" file; unknown keys are rejected with the known list."""
    if not os.path.exists(path):
        raise UsageError(f"config file not found: {path}")
    values = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in KNOWN_KEYS:
                raise UsageError(
                    f"{path}:{lineno}: unknown key {key!r}; known keys: {', '.join(KNOWN_KEYS)}"
                )
            values[key] = _parse_value(raw)
    return values


def _log_override(source: str, key: str, value) -> None:
    print(f"config: {key} = {value} ({source})", file=sys.stderr)


def build_configs(args) -> tuple[NetConfig, OptimConfig, float]:
    """Merge defaults, config file and flags into the two config objects."""
    net_kw, optim_kw = {}, {}
    metric_max = 1.0
    if getattr(args, "config", None):
        for key, value in read_config_file(args.config).items():
            _log_override("config file", key, value)
            if key == "metric_max":
                metric_max = float(value)
            elif key in _NET_KEYS:
                net_kw[key] = value
            else:
                optim_kw[key] = value
    if getattr(args, "preset", None) == "desk":
        base_net, base_optim = NetConfig.desk(), OptimConfig.desk()
    else:
        base_net, base_optim = NetConfig(), OptimConfig()
    net_kw = {**dataclasses.asdict(base_net), **net_kw}
    optim_kw = {**dataclasses.asdict(base_optim), **optim_kw}
    for key in _NET_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            _log_override("flag", key, flag)
            net_kw[key] = flag
    for key in _OPTIM_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            _log_override("flag", key, flag)
            optim_kw[key] = flag
    if getattr(args, "ablate_lipe", False):
        _log_override("flag", "use_lipe", False)
        net_kw["use_lipe"] = False
    if getattr(args, "ablate_nested", False):
        _log_override("flag", "use_nested", False)
        net_kw["use_nested"] = False
    if getattr(args, "metric_max", None) is not None:
        _log_override("flag", "metric_max", args.metric_max)
        metric_max = args.metric_max
    return NetConfig(**net_kw), OptimConfig(**optim_kw), metric_max


def _add_config_flags(p: argparse.ArgumentParser, net: bool = True, optim: bool = True) -> None:
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--preset", choices=["default", "desk"], default="default",
                   help="base hyperparameter preset (desk = small test-scale net)")
    if net:
        g = p.add_argument_group("network")
        g.add_argument("--base-channels", dest="base_channels", type=int)
        g.add_argument("--depth", type=int)
        g.add_argument("--window", type=int)
        g.add_argument("--blocks-per-level", dest="blocks_per_level", type=int)
        g.add_argument("--head-dim", dest="head_dim", type=int)
        g.add_argument("--lipe-expansion", dest="lipe_expansion", type=int)
        g.add_argument("--projection-after", dest="projection_after", action="store_const", const=True)
        g.add_argument("--lipe-depthwise", dest="lipe_depthwise", action="store_const", const=True)
        g.add_argument("--shared-bias-table", dest="shared_bias_table", action="store_const", const=True)
        g.add_argument("--ablate-lipe", action="store_true", help="replace LiPe with a plain MLP feed-forward")
        g.add_argument("--ablate-nested", action="store_true", help="plain U-shaped skips instead of the dense lattice")
    if optim:
        g = p.add_argument_group("optimizer")
        g.add_argument("--lr", type=float)
        g.add_argument("--beta1", type=float)
        g.add_argument("--beta2", type=float)
        g.add_argument("--weight-decay", dest="weight_decay", type=float)
        g.add_argument("--epochs", type=int)
        g.add_argument("--seed", type=int)
        g.add_argument("--clip-norm", dest="clip_norm", type=float)
        g.add_argument("--lr-schedule", dest="lr_schedule", choices=["none", "cosine"])


def cmd_make_data(args) -> int:
    phantom = PhantomSpec(size=args.size, seed=args.seed)
    noise = NoiseSpec(gaussian_sigma=args.sigma, poisson_photons=args.poisson_photons, seed=args.seed + 1)
    out = build_corpus(args.n_train, args.n_test, phantom, noise, args.out)
    print(f"wrote {args.n_train + args.n_test} pairs under {out}")
    print(f"train manifest: {os.path.join(out, TRAIN_MANIFEST)}")
    print(f"test manifest:  {os.path.join(out, TEST_MANIFEST)}")
    return 0


def cmd_train(args) -> int:
    net_cfg, optim_cfg, _ = build_configs(args)
    if not args.corpus and not args.train_manifest:
        raise UsageError("pass --corpus DIR or --train-manifest PATH")
    train_manifest = args.train_manifest or os.path.join(args.corpus, TRAIN_MANIFEST)
    val_manifest = args.val_manifest or (os.path.join(args.corpus, TEST_MANIFEST) if args.corpus else "")
    if not os.path.exists(train_manifest):
        raise UsageError(f"training manifest not found: {train_manifest}")
    log = train(
        net_cfg, optim_cfg, train_manifest, args.out,
        val_manifest=val_manifest if val_manifest and os.path.exists(val_manifest) else None,
        log_dir=args.log_dir, resume=args.resume,
    )
    last = log.steps[-1] if log.steps else (0, 0, float("nan"))
    print(f"finished {len(log.steps)} steps in {log.wall_clock_s:.1f}s; final loss {last[2]:.6g}")
    if log.epochs:
        e, p, s, r = log.epochs[-1]
        print(f"validation @ epoch {e}: psnr {p:.3f} dB, ssim {s:.4f}, rmse {r:.5f}")
    print(f"checkpoint: {args.out}")
    return 0


def _write_pgm(path: str, image: np.ndarray) -> None:
    """8-bit binary PGM of a [0,1] image, for quick visual inspection."""
    img = np.clip(np.asarray(image, dtype=np.float32), 0.0, 1.0)
    img = img.reshape(img.shape[-2], img.shape[-1])
    data = (img * 255.0 + 0.5).astype(np.uint8)
    header = f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode()
    atomic_write_bytes(path, header + data.tobytes())


def cmd_denoise(args) -> int:
    net = WiTUnet.from_checkpoint(args.checkpoint)
    image = load_wten(args.input)
    out = net.denoise(image.reshape(image.shape[-2], image.shape[-1]))
    save_wten(args.output, out[None] if image.ndim == 3 else out)
    print(f"denoised {args.input} -> {args.output}")
    if args.pgm:
        _write_pgm(args.pgm, out)
        print(f"preview: {args.pgm}")
    return 0


def cmd_eval(args) -> int:
    metric_cfg = MetricConfig(data_range=args.metric_max if args.metric_max else 1.0)
    if not args.corpus and not args.manifest:
        raise UsageError("pass --corpus DIR or --manifest PATH")
    manifest = args.manifest or os.path.join(args.corpus, TEST_MANIFEST)
    result = evaluate(args.checkpoint, manifest, metric_cfg)
    os.makedirs(args.out_dir, exist_ok=True)
    model_csv = os.path.join(args.out_dir, "model.csv")
    baseline_csv = os.path.join(args.out_dir, "baseline.csv")
    agg_path = os.path.join(args.out_dir, "aggregates.json")
    atomic_write_bytes(model_csv, result.model.to_csv().encode())
    atomic_write_bytes(baseline_csv, result.baseline.to_csv().encode())
    agg = (
        '{\n"model": ' + result.model.aggregates_json()
        + ',\n"input-baseline": ' + result.baseline.aggregates_json() + "\n}\n"
    )
    atomic_write_bytes(agg_path, agg.encode())
    m, b = result.model.aggregates(), result.baseline.aggregates()
    print(f"model:          psnr {m['psnr']['mean']:.3f} dB, ssim {m['ssim']['mean']:.4f}, rmse {m['rmse']['mean']:.5f}")
    print(f"input-baseline: psnr {b['psnr']['mean']:.3f} dB, ssim {b['ssim']['mean']:.4f}, rmse {b['rmse']['mean']:.5f}")
    print(f"reports: {model_csv}, {baseline_csv}, {agg_path}")
    return 0


def cmd_gradcheck(args) -> int:
    net_cfg, _, _ = build_configs(args)
    dtype = np.float64 if args.f64 else np.float32
    tol = FD_SETTINGS[dtype]["tol"]
    res = check_network(net_cfg, image_hw=(args.size, args.size), dtype=dtype,
                        n_samples=args.samples, seed=args.seed if args.seed is not None else 3)
    status = "pass" if res.passed else "FAIL"
    print(f"{status}  full-network  max_rel_err={res.max_error:.3e}  tol={tol:g}  coords={res.sampled}")
    return 0 if res.passed else 2


def cmd_bench(args) -> int:
    sizes = [int(s) for s in args.sizes.split(",")]
    rows = run_bench(sizes=sizes, channels=args.channels, m=args.window or 8,
                     heads=args.heads, measure_global=not args.skip_global)
    table = bench_table(rows)
    print(table, end="")
    if args.out:
        atomic_write_bytes(args.out, table.encode())
    tokens = [r.tokens for r in rows]
    slope_w = loglog_slope(tokens, [r.windowed_s for r in rows])
    print(f"windowed attention scales ~ (H*W)^{slope_w:.2f}")
    if not args.skip_global:
        slope_g = loglog_slope(tokens, [r.global_s for r in rows])
        print(f"global attention scales ~ (H*W)^{slope_g:.2f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="witunet", description=__doc__,
                                 formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-data", help="generate a synthetic paired corpus")
    p.add_argument("--n-train", type=int, default=8)
    p.add_argument("--n-test", type=int, default=2)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--sigma", type=float, default=0.08)
    p.add_argument("--poisson-photons", type=int, default=None)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_make_data)

    p = sub.add_parser("train", help="train a denoiser on a corpus")
    _add_config_flags(p)
    p.add_argument("--corpus", help="corpus directory (uses its train/test manifests)")
    p.add_argument("--train-manifest", help="explicit training manifest path")
    p.add_argument("--val-manifest", help="explicit validation manifest path")
    p.add_argument("--out", required=True, help="checkpoint output path (.witu)")
    p.add_argument("--log-dir", help="directory for steps.csv / epochs.csv")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("denoise", help="denoise one WTEN image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="input WTEN image")
    p.add_argument("--output", required=True, help="output WTEN image")
    p.add_argument("--pgm", help="also write an 8-bit PGM preview")
    p.set_defaults(fn=cmd_denoise)

    p = sub.add_parser("eval", help="evaluate a checkpoint against a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", help="corpus directory (uses its test manifest)")
    p.add_argument("--manifest", help="explicit manifest path")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--metric-max", dest="metric_max", type=float, default=None,
                   help="PSNR/SSIM data range (1.0 normalized, 400 HU window)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full network")
    _add_config_flags(p, optim=False)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--f64", action="store_true", help="float64 check mode (h=1e-5, tol=1e-4)")
    p.add_argument("--samples", type=int, default=120)
    p.add_argument("--size", type=int, default=16, help="probe image side")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("bench", help="attention FLOPs and wall-time scaling table")
    p.add_argument("--sizes", default="32,64,128", help="comma-separated square sizes")
    p.add_argument("--channels", type=int, default=32)
    p.add_argument("--window", type=int, default=8)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--skip-global", action="store_true")
    p.add_argument("--out", help="write the CSV table here too")
    p.set_defaults(fn=cmd_bench)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return 1 if e.code not in (0, None) else 0
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (WitunetError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
