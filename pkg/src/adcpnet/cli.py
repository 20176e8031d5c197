"""``adcp {train|eval|predict|ablate|selftest} --config <path> [--seed n] [--out <path>]``.

Configuration is an INI file. Sections and keys (all optional unless the
command needs them):

[model]   preset, C, C_3d, C_dop, N, D_max, dic_width, offsets, stage2_agg
[data]    source (synthetic|directory), path, val_path, count, val_count, seed,
          val_seed, height, width, n_layers, disp_min, disp_max, n_bars,
          bar_width, texture_scale, slant
[train]   lr, iters, batch, seed, lr_halving_period, crop (HxW), val_every,
          checkpoint, log, resume
[eval]    checkpoint, split (train|val), report
[predict] checkpoint, left, right, out, pfm, scale
[ablate]  variants, n, seeds, report
"""
from __future__ import annotations

import argparse
import configparser
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

SCHEMA = {
    "model": {
        "preset": str, "C": int, "C_3d": int, "C_dop": int, "N": int, "D_max": int,
        "dic_width": int, "offsets": str, "stage2_agg": str,
    },
    "data": {
        "source": str, "path": str, "val_path": str, "count": int, "val_count": int, "seed": int,
        "val_seed": int, "height": int, "width": int, "n_layers": int, "disp_min": int,
        "disp_max": int, "n_bars": int, "bar_width": int, "texture_scale": int, "slant": float,
    },
    "train": {
        "lr": float, "iters": int, "batch": int, "seed": int, "lr_halving_period": int,
        "crop": str, "val_every": int, "checkpoint": str, "log": str, "resume": str,
    },
    "eval": {"checkpoint": str, "split": str, "report": str},
    "predict": {"checkpoint": str, "left": str, "right": str, "out": str, "pfm": str, "scale": float},
    "ablate": {"variants": str, "n": str, "seeds": str, "report": str},
}


class ConfigError(ValueError):
    pass


def read_config(path) -> dict[str, dict]:
    """Parse and type-check an INI file against ``SCHEMA``; unknown keys are errors."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str  # keep C_3d etc. case-sensitive
    try:
        cp.read(path)
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from None
    out: dict[str, dict] = {s: {} for s in SCHEMA}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in cp.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            try:
                out[section][key] = SCHEMA[section][key](raw.strip())
            except ValueError:
                raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from None
    return out


def _int_list(text: str) -> list[int]:
    return [int(t) for t in text.replace(",", " ").split()]


def _resolve(base: Path, p: Optional[str]) -> Optional[Path]:
    if p is None:
        return None
    p = Path(p)
    return p if p.is_absolute() else base / p


def _output(out: Optional[str], base: Path, configured: Optional[str]) -> Optional[Path]:
    # --out is relative to the working directory, config paths to the config file
    return Path(out).resolve() if out else _resolve(base, configured)


def _need_file(p: Optional[Path], what: str) -> Path:
    if p is None:
        raise ConfigError(f"missing {what}")
    if not p.is_file():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _need_outdir(p: Optional[Path], what: str) -> Path:
    if p is None:
        raise ConfigError(f"missing {what}")
    if not p.parent.is_dir():
        raise ConfigError(f"directory for {what} does not exist: {p.parent}")
    return p


def _check_data_paths(data: dict, base: Path, need_val: bool) -> None:
    if data.get("source", "synthetic") == "directory":
        for key in ("path",) + (("val_path",) if need_val and "val_path" in data else ()):
            p = _resolve(base, data.get(key))
            if p is None or not p.is_dir():
                raise ConfigError(f"[data] {key} is not a directory: {p}")
    elif data.get("source", "synthetic") != "synthetic":
        raise ConfigError(f"[data] source must be 'synthetic' or 'directory', got {data['source']!r}")


# ---------------------------------------------------------------------------
# builders (imports deferred so the thread cap applies before numpy loads)


def model_config(sec: dict):
    from .model import ModelConfig

    sec = dict(sec)
    preset = sec.pop("preset", None)
    if preset:
        return ModelConfig.preset(preset, **sec)
    return ModelConfig(**{"scale_preset": None, **sec})


def datasets(data: dict, base: Path):
    from .data import SceneSpec, SyntheticStream, load_directory, synthetic_set

    if data.get("source", "synthetic") == "directory":
        train_set = load_directory(_resolve(base, data["path"]))
        val_set = load_directory(_resolve(base, data["val_path"])) if "val_path" in data else []
        return train_set, val_set
    spec = SceneSpec(
        height=data.get("height", 64), width=data.get("width", 96), n_layers=data.get("n_layers", 3),
        disp_range=(data.get("disp_min", 2), data.get("disp_max", 32)), n_bars=data.get("n_bars", 0),
        bar_width=data.get("bar_width", 4), texture_scale=data.get("texture_scale", 4),
        slant=data.get("slant", 0.0),
    )
    # generated on demand, so count can exceed what fits in memory
    train_set = SyntheticStream(spec, data.get("count", 8), data.get("seed", 0))
    val_set = synthetic_set(spec, data.get("val_count", 0), data.get("val_seed", 10_000))
    return train_set, val_set


def train_hyper(sec: dict, seed: Optional[int]):
    from .train import TrainHyper

    kw = {k: sec[k] for k in ("lr", "iters", "batch", "lr_halving_period", "val_every") if k in sec}
    if "crop" in sec:
        try:
            h, w = (int(v) for v in sec["crop"].lower().split("x"))
        except ValueError:
            raise ConfigError(f"[train] crop must look like 48x64, got {sec['crop']!r}") from None
        kw["crop"] = (h, w)
    kw["seed"] = seed if seed is not None else sec.get("seed", 0)
    return TrainHyper(**kw)


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg: dict, base: Path, seed: Optional[int], out: Optional[str]) -> int:
    from .train import format_log, load_checkpoint, save_checkpoint, train

    tr = cfg["train"]
    ckpt_path = _need_outdir(_output(out, base, tr.get("checkpoint")), "[train] checkpoint")
    log_path = _need_outdir(_resolve(base, tr.get("log")) or ckpt_path.with_suffix(".log"), "[train] log")
    resume_path = _resolve(base, tr.get("resume"))
    if resume_path is not None:
        _need_file(resume_path, "[train] resume")
    _check_data_paths(cfg["data"], base, need_val=True)
    hyper = train_hyper(tr, seed)
    config = model_config(cfg["model"])
    train_set, val_set = datasets(cfg["data"], base)
    resume = load_checkpoint(resume_path) if resume_path else None
    mode = "a" if resume else "w"
    with open(log_path, mode) as log:
        def on_log(rec):
            log.write(format_log(rec) + "\n")
            log.flush()

        ck = train(config, train_set, val_set, hyper, resume=resume, on_log=on_log)
    save_checkpoint(ck, ckpt_path)
    print(f"wrote {ckpt_path} and {log_path} after {ck.iteration} iterations")
    return 0


def cmd_eval(cfg: dict, base: Path, seed: Optional[int], out: Optional[str]) -> int:
    from .regression import format_report
    from .train import evaluate, load_checkpoint

    ev = cfg["eval"]
    ck_path = _need_file(_resolve(base, ev.get("checkpoint")), "[eval] checkpoint")
    report = _output(out, base, ev.get("report"))
    if report is not None:
        _need_outdir(report, "[eval] report")
    split = ev.get("split", "val")
    if split not in ("train", "val"):
        raise ConfigError(f"[eval] split must be 'train' or 'val', got {split!r}")
    _check_data_paths(cfg["data"], base, need_val=split == "val")
    train_set, val_set = datasets(cfg["data"], base)
    dataset = val_set if split == "val" else train_set
    if not dataset:
        raise ConfigError(f"[eval] the {split} split is empty")
    rec = evaluate(load_checkpoint(ck_path).to_model(), dataset)
    rec = {"checkpoint": str(ck_path), "split": split, "images": len(dataset), **rec}
    text = format_report(rec)
    if report is not None:
        report.write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_predict(cfg: dict, base: Path, seed: Optional[int], out: Optional[str]) -> int:
    from .data import export_gray, load_image, save_pfm
    from .train import load_checkpoint, predict

    pr = cfg["predict"]
    ck_path = _need_file(_resolve(base, pr.get("checkpoint")), "[predict] checkpoint")
    left_p = _need_file(_resolve(base, pr.get("left")), "[predict] left")
    right_p = _need_file(_resolve(base, pr.get("right")), "[predict] right")
    img_out = _need_outdir(_output(out, base, pr.get("out")), "[predict] out")
    pfm_out = _need_outdir(_resolve(base, pr.get("pfm")) or img_out.with_suffix(".pfm"), "[predict] pfm")
    left, right = load_image(left_p), load_image(right_p)
    if left.shape != right.shape:
        raise ConfigError(f"left {left.shape[1:]} and right {right.shape[1:]} sizes differ")
    ck = load_checkpoint(ck_path)
    disp = predict(ck.to_model(), left, right)
    scale = pr.get("scale", 255.0 / max(ck.config.D_max - 1, 1))
    export_gray(disp, img_out, scale)
    save_pfm(pfm_out, disp)
    print(f"wrote {img_out} and {pfm_out} ({disp.shape[0]}x{disp.shape[1]})")
    return 0


def cmd_ablate(cfg: dict, base: Path, seed: Optional[int], out: Optional[str]) -> int:
    from .ablation import VARIANTS, format_table, run_ablation

    ab = cfg["ablate"]
    report = _output(out, base, ab.get("report"))
    if report is not None:
        _need_outdir(report, "[ablate] report")
    variants = [v.strip() for v in ab.get("variants", ",".join(VARIANTS)).split(",") if v.strip()]
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"[ablate] unknown variant {v!r}; choose from {', '.join(VARIANTS)}")
    Ns = _int_list(ab.get("n", str(cfg["model"].get("N", 5))))
    seeds = [seed] if seed is not None else _int_list(ab.get("seeds", str(cfg["train"].get("seed", 0))))
    _check_data_paths(cfg["data"], base, need_val=True)
    hyper = train_hyper(cfg["train"], None)
    base_cfg = model_config(cfg["model"])
    train_set, val_set = datasets(cfg["data"], base)
    if not val_set:
        raise ConfigError("[ablate] needs a validation set ([data] val_count or val_path)")
    rows = run_ablation(base_cfg, variants, Ns, seeds, train_set, val_set, hyper)
    table = format_table(rows)
    if report is not None:
        report.write_text(table)
    sys.stdout.write(table)
    return 0


def cmd_selftest(cfg: dict, base: Path, seed: Optional[int], out: Optional[str], fault: Optional[str] = None) -> int:
    from .selftest import run_selftest

    lines: list[str] = []

    def report(line):
        print(line, flush=True)
        lines.append(line)

    ok = run_selftest(seed or 0, fault=fault, report=report)
    if out:
        _need_outdir(Path(out), "--out").write_text("\n".join(lines) + "\n")
    return 0 if ok else 1


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "ablate": cmd_ablate,
    "selftest": cmd_selftest,
}


def _apply_thread_cap() -> None:
    n = os.environ.get("ADCP_THREADS")
    if n is None:
        return
    if not n.isdigit() or int(n) < 1:
        raise ConfigError(f"ADCP_THREADS must be a positive integer, got {n!r}")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = n


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="adcp", description="Two-stage stereo matcher: train, evaluate, predict.")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="INI configuration file (optional for selftest)")
    ap.add_argument("--seed", type=int, help="override the training/ablation seed")
    ap.add_argument("--out", help="override the primary output path")
    ap.add_argument("--inject-fault", metavar="OP", help=argparse.SUPPRESS)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _apply_thread_cap()
        if args.command == "selftest":
            return cmd_selftest({}, Path.cwd(), args.seed, args.out, args.inject_fault)
        if not args.config:
            raise ConfigError("--config is required")
        cfg = read_config(args.config)
        base = Path(args.config).resolve().parent
        return COMMANDS[args.command](cfg, base, args.seed, args.out)
    except (ValueError, FileNotFoundError) as e:
        print(f"adcp: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
