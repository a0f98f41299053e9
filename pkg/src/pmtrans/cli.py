"""Command-line front end: ``pmtrans <command> [options]``.

Exit status is 0 on success, 1 when a check fails and 2 on usage or config
errors. Every error is reported on stderr as one line ``error: <code>: <detail>``.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .model import DEFAULT_BRANCHES, BranchSpec, PMTransConfig
from .serialization import FormatError, load_tensor, save_tensor
from .tensor import ConfigError, ContractError, ShapeError

log = logging.getLogger("pmtrans")


class CLIError(Exception):
    def __init__(self, code: str, detail: str = "", status: int = 2):
        super().__init__(detail)
        self.code = code
        self.detail = detail
        self.status = status


# ------------------------------------------------------------- run config

_TRAIN_KEYS = {
    "batch_size": int, "base_lr": float, "max_epochs": int, "poly_power": float,
    "gate_freeze_epochs": int, "beta1": float, "beta2": float, "adam_eps": float,
    "augment": "bool", "shift_frac": float, "rotate_deg": float, "flip_prob": float,
    "val_fraction": float, "split_seed": int, "seed": int,
}
_MODEL_KEYS = {
    "height": int, "width": int, "in_channels": int, "base_channels": int, "heads": int,
    "cnn_stages": int, "gate_with_cnn": "bool", "init_seed": int, "dtype": str,
    "ds_weight_full": float, "ds_weight_half": float, "ds_weight_quarter": float,
    **{f"depth_{b.name}": int for b in DEFAULT_BRANCHES},
    **{f"span_divisor_{b.name}": int for b in DEFAULT_BRANCHES},
}


def _default_run_config() -> dict:
    from .training import TrainConfig

    m = PMTransConfig()
    t = TrainConfig()
    out = {
        "height": m.height, "width": m.width, "in_channels": m.in_channels,
        "base_channels": m.base_channels, "heads": m.heads, "cnn_stages": m.cnn_stages, "gate_with_cnn": m.gate_with_cnn,
        "init_seed": m.seed, "dtype": m.dtype,
        "ds_weight_full": m.ds_weights[0], "ds_weight_half": m.ds_weights[1],
        "ds_weight_quarter": m.ds_weights[2],
    }
    for b in m.branches:
        out[f"depth_{b.name}"] = b.depth
        out[f"span_divisor_{b.name}"] = b.span_divisor
    out.update({f.name: getattr(t, f.name) for f in fields(t)})
    return out


def _convert(key: str, kind, raw: str):
    if kind == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise CLIError("bad-value", f"{key}={raw!r} is not a boolean")
    try:
        return kind(raw)
    except ValueError:
        raise CLIError("bad-value", f"{key}={raw!r} is not a valid {kind.__name__}") from None


def parse_run_config(text: str) -> dict:
    """Merge ``key=value`` lines over the defaults. Unknown keys are errors."""
    cfg = _default_run_config()
    kinds = {**_TRAIN_KEYS, **_MODEL_KEYS}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CLIError("bad-config-line", f"line {lineno}: expected key=value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in kinds:
            raise CLIError("unknown-config-key", f"line {lineno}: {key}")
        cfg[key] = _convert(key, kinds[key], raw)
    return cfg


def format_run_config(cfg: dict) -> str:
    lines = ["# effective configuration"]
    for k in sorted(cfg):
        v = cfg[k]
        lines.append(f"{k}={str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"


def build_configs(cfg: dict):
    from .training import TrainConfig

    branches = tuple(
        BranchSpec(b.name, b.scale, cfg[f"depth_{b.name}"], cfg[f"span_divisor_{b.name}"])
        for b in DEFAULT_BRANCHES
    )
    model = PMTransConfig(
        height=cfg["height"], width=cfg["width"], in_channels=cfg["in_channels"],
        base_channels=cfg["base_channels"], heads=cfg["heads"], branches=branches, cnn_stages=cfg["cnn_stages"],
        ds_weights=(cfg["ds_weight_full"], cfg["ds_weight_half"], cfg["ds_weight_quarter"]),
        gate_with_cnn=cfg["gate_with_cnn"], seed=cfg["init_seed"], dtype=cfg["dtype"],
    )
    train = TrainConfig(**{k: cfg[k] for k in _TRAIN_KEYS})
    return model, train


# --------------------------------------------------------------- commands


def _load_samples(data_dir: str):
    from .training import load_dataset

    path = Path(data_dir)
    if not path.is_dir():
        raise CLIError("no-such-directory", str(path))
    samples = load_dataset(path)
    if not samples:
        raise CLIError("empty-dataset", f"no samples under {path / 'images'}")
    return samples


def cmd_synth(args) -> int:
    from .training import generate_synthetic_dataset, save_dataset

    if args.count < 1:
        raise CLIError("bad-value", "--count must be positive")
    samples = generate_synthetic_dataset(args.count, args.height, args.width, args.seed, args.channels)
    save_dataset(args.out, samples)
    frac = float(np.mean([s.mask.mean() for s in samples]))
    print(f"wrote {len(samples)} samples to {args.out} (foreground fraction {frac:.3f})")
    return 0


def cmd_train(args) -> int:
    from .model import build_pmtrans
    from .training import split_dataset, train

    cfg_path = Path(args.config)
    if not cfg_path.is_file():
        raise CLIError("no-such-file", str(cfg_path))
    run = parse_run_config(cfg_path.read_text(encoding="utf-8"))
    model_cfg, train_cfg = build_configs(run)
    samples = _load_samples(args.data)
    c, h, w = samples[0].image.shape
    if (c, h, w) != (model_cfg.in_channels, model_cfg.height, model_cfg.width):
        raise CLIError("config-data-mismatch",
                       f"data is {c}x{h}x{w}, config expects "
                       f"{model_cfg.in_channels}x{model_cfg.height}x{model_cfg.width}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_run_config(run), encoding="utf-8")
    train_set, val_set = split_dataset(samples, train_cfg.val_fraction, train_cfg.split_seed)
    model = build_pmtrans(model_cfg)

    def report(epoch, _model, row):
        print(f"epoch {epoch} loss {row['train_loss']:.4f} val_dice {row['val_dice']:.2f}", flush=True)

    res = train(model, train_set, val_set, train_cfg, out_dir=out, epoch_callback=report)
    print(f"best val_dice {res.best_dice:.2f} at epoch {res.best_epoch}; checkpoint {res.checkpoint}")
    return 0


def _load_model(path: str):
    from .training import load_checkpoint

    if not Path(path).is_file():
        raise CLIError("no-such-file", path)
    return load_checkpoint(path)


def cmd_eval(args) -> int:
    from .training import evaluate, format_dice

    samples = _load_samples(args.data)
    model = _load_model(args.model)
    score = evaluate(model, samples, threshold=args.threshold)
    print(f"dice {format_dice(score)} over {len(samples)} samples")
    return 0


def write_pgm(path, mask: np.ndarray) -> None:
    """Binary P5 PGM, 0 for background and 255 for foreground."""
    img = (np.asarray(mask) > 0).astype(np.uint8) * 255
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def cmd_predict(args) -> int:
    from .training import predict_probabilities

    model = _load_model(args.model)
    if not Path(args.image).is_file():
        raise CLIError("no-such-file", args.image)
    img = load_tensor(args.image).astype(np.float32)
    if img.ndim == 2:
        img = img[None]
    expect = (model.cfg.in_channels, model.cfg.height, model.cfg.width)
    if img.shape != expect:
        raise CLIError("shape-mismatch", f"image {img.shape}, model expects {expect}")
    prob = predict_probabilities(model, img[None])[0]
    mask = (prob > args.threshold).astype(np.uint8)
    out = Path(args.out)
    save_tensor(out, mask)
    pgm = out.with_suffix(".pgm")
    write_pgm(pgm, mask[0])
    print(f"wrote {out} and {pgm} ({int(mask.sum())} foreground pixels)")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import desk_gradient_checks

    reports = desk_gradient_checks(args.seed, args.tolerance, args.coords, args.target)
    ok = True
    for name, rep in reports.items():
        status = "PASS" if rep.passed else "FAIL"
        ok &= rep.passed
        print(f"{name}: max_rel_error={rep.max_rel_error:.3e} checked={rep.checked} "
              f"one_sided={rep.one_sided} kinks_skipped={len(rep.kinks_skipped)} {status}")
    print("PASS" if ok else "FAIL")
    if not ok:
        raise CLIError("gradcheck-failed", f"tolerance {args.tolerance:g} exceeded", status=1)
    return 0


def cmd_audit(args) -> int:
    from .complexity import (ENUMERATION_LIMIT, SCHEMES, AttentionScheme, brute_force_pair_enumeration,
                             count_attention_pairs, scheme_comparison_report)

    report = scheme_comparison_report(args.height, args.width)
    print(report.format_table())
    if args.csv:
        Path(args.csv).write_text(report.to_csv(), encoding="utf-8")
    if args.height * args.width <= ENUMERATION_LIMIT:
        bad = []
        for kind in SCHEMES:
            s = AttentionScheme(kind, args.height, args.width)
            if count_attention_pairs(s) != brute_force_pair_enumeration(s).nominal:
                bad.append(kind)
        if bad:
            raise CLIError("audit-mismatch", ",".join(bad), status=1)
        print("formula counts match pixel enumeration")
    else:
        print(f"enumeration skipped above {ENUMERATION_LIMIT} pixels")
    return 0


# ----------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError("usage", message.replace("\n", " "))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pmtrans", description="Pyramid axial-transformer segmentation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic ellipse dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=48)
    s.add_argument("--height", type=int, default=64)
    s.add_argument("--width", type=int, default=64)
    s.add_argument("--channels", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train from a key=value config file")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="mean Dice (percent) of a checkpoint on a dataset")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--threshold", type=float, default=0.5)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", help="segment one PMTN image")
    s.add_argument("--model", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True, help="PMTN mask path; a .pgm is written alongside")
    s.add_argument("--threshold", type=float, default=0.5)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("gradcheck", help="finite-difference gradient checks in float64")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tolerance", type=float, default=1e-4)
    s.add_argument("--coords", type=int, default=3, help="coordinates sampled per model tensor")
    s.add_argument("--target", nargs="+", choices=["block", "gate", "model"], default=["block", "gate", "model"])
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("audit", help="attention-pair counts and receptive fields")
    s.add_argument("--height", type=int, required=True)
    s.add_argument("--width", type=int, required=True)
    s.add_argument("--csv")
    s.set_defaults(func=cmd_audit)
    return p


def _thread_limit():
    raw = os.environ.get("PMTRANS_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise CLIError("bad-env", f"PMTRANS_THREADS={raw!r}") from None
    if n < 1:
        raise CLIError("bad-env", "PMTRANS_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        limiter = _thread_limit()
        try:
            return args.func(args)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except CLIError as e:
        print(f"error: {e.code}: {e.detail}" if e.detail else f"error: {e.code}", file=sys.stderr)
        return e.status
    except ContractError as e:
        msg = str(e)
        code = "empty-dataset" if msg == "empty-dataset" else "contract"
        print(f"error: {code}: {msg}", file=sys.stderr)
        return 2
    except (ConfigError, ShapeError) as e:
        print(f"error: config: {e}".replace("\n", " "), file=sys.stderr)
        return 2
    except (FormatError, FileNotFoundError, KeyError) as e:
        print(f"error: bad-file: {e}".replace("\n", " "), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
