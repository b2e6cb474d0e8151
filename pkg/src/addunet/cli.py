"""``addunet`` command-line tool.

Exit codes: 0 success, 2 usage or input error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import config as cfgmod
from .analysis import dump_collage, export_alpha_trajectory, fft_radial_profiles, sweep_alpha
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import DataFormatError, NoiseSpec, corrupt, crop, load_dataset, load_pgm, pad_to_multiple, save_pgm
from .model import ConfigError, build, forward
from .objectives import format_metric, psnr, ssim
from .trainer import NumericalAbort, evaluate, train

log = logging.getLogger("addunet")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


class InputError(Exception):
    pass


def _write_echo(path: Path, items: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{k} = {items[k]}\n" for k in sorted(items)))


def _overrides(args) -> dict[str, str]:
    out = {}
    for key in cfgmod.SCHEMA:
        v = getattr(args, f"cfg_{key}", None)
        if v is not None:
            out[key] = v
    for item in args.set or []:
        if "=" not in item:
            raise InputError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def cmd_train(args) -> int:
    out = Path(args.out)
    resolved = cfgmod.resolve(args.config, _overrides(args))
    data = load_dataset(args.data)
    mcfg, tcfg = cfgmod.build_configs(resolved, data.num_classes)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfgmod.echo(resolved) + f"data = {args.data}\n")
    dtype = np.float64 if resolved["dtype"] == "float64" else np.float32
    model = build(mcfg, seed=tcfg.seed, dtype=dtype)
    tlog = train(model, data, tcfg, out_dir=out)
    save_checkpoint(model, out / "final.ckpt", {"epoch": len(tlog.records), "seed": tcfg.seed})
    if mcfg.has_gates:
        export_alpha_trajectory(tlog, out / "alpha_trajectory.csv")
    print(f"trained {len(tlog.records)} epochs; best epoch {tlog.best_epoch} "
          f"val PSNR {format_metric(tlog.best_psnr_db)} dB -> {out}")
    return EXIT_OK


def _denoise_array(model, noisy: np.ndarray) -> np.ndarray:
    padded, rec = pad_to_multiple(noisy.astype(model.dtype), 2 ** model.config.depth)
    with ag.use_tape(ag.Tape()), ag.no_grad():
        try:
            out = forward(model, padded).denoised.value
        except ag.ShapeError as e:
            raise InputError(f"input shape {noisy.shape} incompatible with checkpoint: {e}") from None
    return crop(out, rec)


def _image_files(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(path.glob("*.pgm"))
        if not files:
            raise InputError(f"no .pgm files in {path}")
        return files
    if not path.exists():
        raise FileNotFoundError(str(path))
    return [path]


def cmd_denoise(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    inputs = _image_files(Path(args.input))
    batch = Path(args.input).is_dir()
    out = Path(args.out)
    if batch:
        out.mkdir(parents=True, exist_ok=True)
    rows = []
    for f in inputs:
        noisy = load_pgm(f)
        den = _denoise_array(model, noisy)
        target = out / f.name if batch else out
        target.parent.mkdir(parents=True, exist_ok=True)
        save_pgm(den, target)
        if args.clean:
            ref_path = Path(args.clean) / f.name if Path(args.clean).is_dir() else Path(args.clean)
            ref = load_pgm(ref_path)
            den_c = np.clip(den, 0, 1)
            rows.append([f.name, format_metric(psnr(den_c, ref)), format_metric(ssim(den_c[0], ref[0]) if min(ref.shape[-2:]) >= 11 else None)])
    if args.clean:
        metrics = (out / "metrics.csv") if batch else out.with_suffix(".metrics.csv")
        with open(metrics, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["file", "psnr_db", "ssim"])
            w.writerows(rows)
    print(f"denoised {len(inputs)} image(s) -> {out}")
    return EXIT_OK


def _noise(args) -> NoiseSpec:
    return NoiseSpec.parse(args.noise, args.noise_seed)


def cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    data = load_dataset(args.data)
    ev = evaluate(model, data, _noise(args), batch_size=args.batch_size)
    result = {
        "psnr_db": format_metric(ev.psnr_db),
        "noisy_psnr_db": format_metric(ev.noisy_psnr_db),
        "ssim": format_metric(ev.ssim),
        "accuracy": format_metric(ev.accuracy),
        "loss_den": format_metric(ev.loss_den),
        "images": len(data),
    }
    text = "".join(f"{k},{result[k]}\n" for k in ("psnr_db", "noisy_psnr_db", "ssim", "accuracy", "loss_den", "images"))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text("metric,value\n" + text)
    print(text, end="")
    return EXIT_OK


def cmd_sweep_alpha(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    if not model.config.has_gates:
        raise InputError("sweep-alpha needs a gated real-additive checkpoint")
    data = load_dataset(args.data)
    if not 0 <= args.index < len(data):
        raise InputError(f"image index {args.index} outside dataset of {len(data)}")
    clean = data.images[args.index : args.index + 1]
    noisy = corrupt(clean, _noise(args))
    gate = args.gate or (model.config.depth + 1) // 2
    res = sweep_alpha(model, noisy, clean, gate, args.grid_points, args.grid_max)
    res.write_csv(args.out)
    print(f"gate {gate}: learned alpha {res.learned_alpha:.4f}, PSNR {res.learned_psnr_db:.3f} dB; "
          f"grid max {max(res.psnr_db):.3f} dB -> {args.out}")
    return EXIT_OK


def cmd_analyze_filters(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    profiles = fft_radial_profiles(model, args.bins, args.top_k)
    for p in profiles:
        (out / f"level_{p.level}.json").write_text(json.dumps(p.to_dict(), sort_keys=True) + "\n")
    print("level,spectral_centroid")
    for p in profiles:
        print(f"{p.level},{p.centroid!r}")
    return EXIT_OK


def cmd_dump_collage(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    noisy = load_pgm(args.input)
    mult = 2 ** model.config.depth
    if noisy.shape[-1] % mult or noisy.shape[-2] % mult:
        noisy, _ = pad_to_multiple(noisy, mult)
    files = dump_collage(model, noisy, args.out)
    print(f"wrote {len(files)} images -> {args.out}")
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="addunet", description="Additive U-Net denoising toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="key=value config file")
    t.add_argument("--data", required=True, help="dataset specifier, e.g. synth:2000,32,0")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    for key in cfgmod.SCHEMA:
        t.add_argument("--" + key.replace("_", "-"), dest=f"cfg_{key}", metavar="V")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("denoise", help="denoise PGM image(s)")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--input", required=True, help="noisy .pgm file or directory")
    d.add_argument("--out", required=True, help="output .pgm (or directory for batch input)")
    d.add_argument("--clean", help="clean reference .pgm or directory; enables metrics CSV")
    d.set_defaults(func=cmd_denoise)

    def noise_args(sp):
        sp.add_argument("--noise", default="awgn:0.2", help="awgn:S, awgn255:S, sp:P or mixed:S,P")
        sp.add_argument("--noise-seed", type=int, default=0)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", help="metrics CSV path")
    e.add_argument("--batch-size", type=int, default=32)
    noise_args(e)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep-alpha", help="sweep one skip gate at inference")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--index", type=int, default=0, help="image index within the dataset")
    s.add_argument("--gate", type=int, default=0, help="1-based gate index (default: middle level)")
    s.add_argument("--grid-points", type=int, default=21)
    s.add_argument("--grid-max", type=float, default=1.0)
    s.add_argument("--out", required=True, help="sweep CSV path")
    noise_args(s)
    s.set_defaults(func=cmd_sweep_alpha)

    a = sub.add_parser("analyze-filters", help="radial spectra of encoder kernels")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--bins", type=int, default=32)
    a.add_argument("--top-k", type=int, default=4)
    a.add_argument("--out", required=True, help="output directory")
    a.set_defaults(func=cmd_analyze_filters)

    c = sub.add_parser("dump-collage", help="write intermediate states of one forward pass")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--input", required=True, help="noisy .pgm")
    c.add_argument("--out", required=True, help="output directory")
    c.set_defaults(func=cmd_dump_collage)
    return p


def _echo_invocation(args) -> None:
    items = {k: v for k, v in vars(args).items() if k not in ("func", "verbose") and v is not None}
    if args.command == "train":
        return  # train writes its own resolved config
    out = Path(args.out) if getattr(args, "out", None) else None
    if out is None:
        return
    target = out / "invocation.txt" if args.command in ("analyze-filters", "dump-collage") or out.is_dir() \
        else out.with_name(out.name + ".invocation.txt")
    _write_echo(target, {k: (",".join(v) if isinstance(v, list) else v) for k, v in items.items()})


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        code = args.func(args)
        _echo_invocation(args)
        return code
    except NumericalAbort as e:
        print(f"error: {e}; diagnostics: {json.dumps(e.diagnostics, default=str)}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, FileNotFoundError, IsADirectoryError, PermissionError, DataFormatError, CheckpointError,
            ConfigError, cfgmod.ConfigKeyError, ag.ShapeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
