"""``nvrc`` command line: encode, decode, eval, sweep, report.

Exit codes: 0 success, 2 unreadable input, 3 invalid configuration,
4 unsupported stream version, 5 corrupt stream (checksum, truncation,
malformed payload), 1 anything else.
"""

import argparse
import csv
import json
import logging
import os
import sys
import time

import torch

from . import config as config_mod
from .errors import ChecksumError, ConfigurationError, DecodeError, NvrcError, UsageError, VersionError
from .hierarchy import decode_stream, encode_codec, rate_report
from .metrics import RdCurve, bd_rate, ms_ssim, ms_ssim_scales, psnr
from .trainer import Trainer
from .video import InputError, load_video, save_video

EXIT_INPUT = 2
EXIT_CONFIG = 3
EXIT_VERSION = 4
EXIT_CORRUPT = 5

LAMBDAS = (0.5, 1.0, 2.0, 4.0)
VARIANTS = ("default", "v1", "v2", "v3", "v4", "v5")

logger = logging.getLogger("nvrc")


def _emit(record, stream=None):
    """One JSON object per line."""
    print(json.dumps(record, sort_keys=True), file=stream or sys.stdout, flush=True)


def _threads():
    value = os.environ.get("NVRC_THREADS")
    if value:
        try:
            n = int(value)
        except ValueError:
            raise ConfigurationError(f"NVRC_THREADS must be an integer, got {value!r}") from None
        if n < 1:
            raise ConfigurationError("NVRC_THREADS must be positive")
        torch.set_num_threads(n)


def build_config(args, video, variant=None):
    """FullConfig from --config, the video geometry and command-line overrides."""
    cfg = config_mod.load(args.config) if getattr(args, "config", None) else config_mod.FullConfig()
    t, h, w, c = video.shape
    overrides = {"frames": t, "height": h, "width": w, "channels": c, "color": video.color}
    ablate = variant if variant is not None else getattr(args, "ablate", None)
    if ablate and ablate != "default":
        overrides.update(config_mod.ablation(ablate))
    if getattr(args, "rd_lambda", None) is not None:
        overrides["rd_lambda"] = args.rd_lambda
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "loss", None) is not None:
        overrides["loss"] = args.loss
    cfg = cfg.with_overrides(**overrides)
    cfg.model.validate()
    cfg.codec.validate()
    cfg.train.validate()
    return cfg


def run_encode(video, cfg, log_stream=None):
    """Train on ``video`` and code the result; returns (EncodeResult, summary dict)."""
    log = []
    start = time.perf_counter()
    trainer = Trainer(video.frames, cfg.model, cfg.codec, cfg.train, log)
    codec = trainer.run()
    train_seconds = time.perf_counter() - start
    if log_stream is not None:
        for entry in log:
            print(entry.to_json(), file=log_stream)
    result = encode_codec(codec)
    report = rate_report(result.data)
    rec = result.reconstruction
    summary = {
        "event": "encoded",
        "bytes": len(result.data),
        "bpp": report["bpp"],
        "psnr": psnr(rec, video.frames),
        "ms_ssim": _video_ms_ssim(rec, video.frames),
        "train_seconds": round(train_seconds, 3),
        "rate_report": report["bits"],
        "phi_coded_bits": report["phi_coded_bits"],
    }
    return result, summary


def _video_ms_ssim(a, b):
    x = torch.as_tensor(a).double().permute(0, 3, 1, 2)
    y = torch.as_tensor(b).double().permute(0, 3, 1, 2)
    return float(ms_ssim(x, y, window=_window(x.shape[-2], x.shape[-1])))


def _window(h, w):
    # the standard 11-tap window unless the frames are too small for it
    return 11 if min(h, w) >= 11 else (min(h, w) // 2) * 2 - 1


# -- subcommands ---------------------------------------------------------------------------


def cmd_encode(args):
    video = load_video(args.input)
    cfg = build_config(args, video)
    out = args.out or "out.nvrc"
    log_path = out + ".log.jsonl"
    with open(log_path, "w", encoding="utf-8") as fh:
        result, summary = run_encode(video, cfg, fh)
    with open(out, "wb") as fh:
        fh.write(result.data)
    summary["output"] = out
    summary["log"] = log_path
    _emit(summary)
    return 0


def cmd_decode(args):
    try:
        with open(args.input, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise InputError(f"cannot read {args.input}: {exc}") from exc
    result = decode_stream(data)
    out = args.out or "decoded.y4m"
    save_video(out, result.video)
    t, h, w, c = result.video.shape
    _emit({"event": "decoded", "output": out, "frames": t, "height": h, "width": w})
    return 0


def cmd_eval(args):
    a = load_video(args.decoded).frames
    b = load_video(args.reference).frames
    if a.shape != b.shape:
        raise UsageError(f"geometry mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    win = _window(a.shape[1], a.shape[2])
    rows = []
    for i in range(a.shape[0]):
        x = a[i : i + 1].double().permute(0, 3, 1, 2)
        y = b[i : i + 1].double().permute(0, 3, 1, 2)
        value, infinite = psnr(a[i], b[i], with_flag=True)
        rows.append({"frame": i, "psnr": value, "psnr_infinite": infinite, "ms_ssim": float(ms_ssim(x, y, window=win))})
    avg_psnr, inf = psnr(a, b, with_flag=True)
    summary = {
        "frame": "mean",
        "psnr": avg_psnr,
        "psnr_infinite": inf,
        "ms_ssim": sum(r["ms_ssim"] for r in rows) / len(rows),
        "ms_ssim_scales": ms_ssim_scales(a.shape[1], a.shape[2], win),
    }
    _write_csv(args.out, rows + [summary], ["frame", "psnr", "psnr_infinite", "ms_ssim"])
    _emit({"event": "eval", **summary})
    return 0


def cmd_sweep(args):
    video = load_video(args.input)
    lambdas = tuple(float(x) for x in args.lambdas.split(",")) if args.lambdas else LAMBDAS
    variants = tuple(args.variants.split(",")) if args.variants else VARIANTS
    for v in variants:
        if v != "default":
            config_mod.ablation(v)
    out = args.out or "sweep"
    os.makedirs(out, exist_ok=True)
    curves = {}
    rows = []
    for v in variants:
        points = []
        for lam in lambdas:
            args.rd_lambda = lam
            cfg = build_config(args, video, variant=v)
            result, summary = run_encode(video, cfg)
            points.append((summary["bpp"], summary["psnr"]))
            rows.append({"variant": v, "lambda": lam, "bpp": summary["bpp"], "psnr": summary["psnr"], "ms_ssim": summary["ms_ssim"], "bytes": summary["bytes"]})
            _emit({"event": "sweep_point", "variant": v, "lambda": lam, "bpp": summary["bpp"], "psnr": summary["psnr"]})
        curves[v] = RdCurve(points)
    _write_csv(os.path.join(out, "curves.csv"), rows, ["variant", "lambda", "bpp", "psnr", "ms_ssim", "bytes"])
    table = []
    if "default" in curves:
        for v, curve in curves.items():
            try:
                value = bd_rate(curves["default"], curve)
            except UsageError as exc:
                value = None
                logger.warning("BD-rate for %s unavailable: %s", v, exc)
            table.append({"variant": v, "bd_rate_percent": value})
        _write_csv(os.path.join(out, "bd_rate.csv"), table, ["variant", "bd_rate_percent"])
    _emit({"event": "sweep", "output": out, "bd_rate": {r["variant"]: r["bd_rate_percent"] for r in table}})
    return 0


def cmd_report(args):
    try:
        with open(args.input, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise InputError(f"cannot read {args.input}: {exc}") from exc
    report = rate_report(data)
    if args.out:
        rows = [
            {"category": k, "bits": report["bits"][k], "parameters": report["parameters"][k], "bits_per_parameter": report["bits_per_parameter"].get(k, "")}
            for k in report["bits"]
        ]
        _write_csv(args.out, rows, ["category", "bits", "parameters", "bits_per_parameter"])
    _emit({"event": "report", **report})
    return 0


def _write_csv(path, rows, columns):
    if not path:
        return
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)


# -- entry point ----------------------------------------------------------------------------------


def _common(p, training=True):
    p.add_argument("--out", help="output path")
    p.add_argument("--config", help="key = value configuration file")
    if training:
        p.add_argument("--lambda", dest="rd_lambda", type=float, help="rate-distortion weight")
        p.add_argument("--seed", type=int, help="training seed")
        p.add_argument("--loss", choices=("rgb", "yuv"), help="distortion in RGB or YUV 4:4:4")


def make_parser():
    parser = argparse.ArgumentParser(prog="nvrc", description="Neural video representation codec")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", help="train a representation and write a .nvrc stream")
    p.add_argument("input", help=".y4m file, PNG directory or synthetic[:key=value,...]")
    _common(p)
    p.add_argument("--ablate", choices=sorted(config_mod.ABLATIONS), help="ablation variant")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="decode a .nvrc stream to Y4M or PNG frames")
    p.add_argument("input")
    p.add_argument("--out", help="output .y4m file or PNG directory")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="PSNR and MS-SSIM of decoded frames against a reference")
    p.add_argument("decoded")
    p.add_argument("reference")
    p.add_argument("--out", help="per-frame CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train a lambda grid for each variant; write RD curves and BD-rates")
    p.add_argument("input")
    _common(p)
    p.add_argument("--lambdas", help="comma-separated lambda values (default 0.5,1,2,4)")
    p.add_argument("--variants", help="comma-separated variants among default,v1..v5")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="per-category rate report of a stream")
    p.add_argument("input")
    p.add_argument("--out", help="CSV output")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr, format="%(message)s")
    try:
        _threads()
        return args.func(args)
    except InputError as exc:
        print(f"nvrc: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ConfigurationError as exc:
        print(f"nvrc: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except VersionError as exc:
        print(f"nvrc: {exc}", file=sys.stderr)
        return EXIT_VERSION
    except (ChecksumError, DecodeError) as exc:
        print(f"nvrc: corrupt stream: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except NvrcError as exc:
        print(f"nvrc: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
