"""Command-line entry point.

Commands: ``train``, ``ablate``, ``reconstruct``, ``generate``,
``estimate-kernel`` and ``spectrum``. Config values can be overridden with
``--key=value`` (highest precedence), then the ``--config`` file, then the
``DEBLUR_SEED`` environment variable (seed only), then built-in defaults.

Exit codes: 0 success, 2 usage or config error, 3 numeric divergence,
4 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint
from .config import ConfigError, TrainConfig, dump_config, parse_config_text
from .data import Dataset, gen_shapes, pgm_write, read_idx, split_indices, tile_grid, write_manifest
from .kernels import fit_kernel_least_squares, kernel_second_moment
from .metrics import mean_log_spectrum, radial_power_spectrum, spectrum_gap
from .trainer import (TrainingDiverged, _generated_kernels, evaluate, load_models, posterior_means,
                      reconstruct, train)

__all__ = ["main", "build_dataset", "parse_grid", "resolve_config"]

logger = logging.getLogger("deblurvae")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4
MAX_GRID = 64
ALIASES = {"loss": "loss_kind", "eps": "epsilon", "warmup": "warmup_epochs"}


class UsageError(Exception):
    pass


class CheckpointError(Exception):
    pass


# ---------------------------------------------------------------- config plumbing

def _parse_overrides(extra: list) -> dict:
    """Turn leftover ``--key=value`` / ``--key value`` tokens into a dict."""
    out = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or len(tok) < 3:
            raise UsageError(f"unexpected argument {tok!r}")
        if "=" in tok:
            key, value = tok[2:].split("=", 1)
        else:
            if i + 1 >= len(extra):
                raise UsageError(f"missing value for {tok}")
            key, value = tok[2:], extra[i + 1]
            i += 1
        key = key.replace("-", "_")
        out[ALIASES.get(key, key)] = value
        i += 1
    return out


def resolve_config(path, overrides: dict, env=None) -> TrainConfig:
    """Defaults < DEBLUR_SEED < config file < command-line overrides."""
    env = os.environ if env is None else env
    values = {}
    if env.get("DEBLUR_SEED"):
        values["seed"] = env["DEBLUR_SEED"]
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file {path} does not exist")
        values.update(parse_config_text(p.read_text()))
    values.update(overrides)
    return TrainConfig().with_overrides(values)


def build_dataset(cfg: TrainConfig, data: str | None = None) -> Dataset:
    """Dataset named by ``data`` (``shapes`` or an IDX path), else by the config."""
    source = data or (cfg.idx_path if cfg.data == "idx" else cfg.data)
    if source == "shapes":
        return gen_shapes(cfg.n_images, cfg.image_size, cfg.image_size, cfg.data_seed, cfg.preset)
    if not source:
        raise UsageError("config selects idx data but idx_path is empty")
    ds = read_idx(source, size=cfg.image_size, seed=cfg.data_seed)
    if cfg.idx_limit and cfg.idx_limit < len(ds):
        n = cfg.idx_limit
        ds = Dataset(ds.images[:n], *split_indices(n, cfg.data_seed), provenance=ds.provenance,
                     labels=None if ds.labels is None else ds.labels[:n])
    return ds


def _write_run_manifest(out: Path, cfg: TrainConfig, command: str, started: str,
                        finished: str = "") -> None:
    layout = "manifest.cfg metrics.csv ckpt_epoch*.dbve samples/ kernels/ spectra/"
    extra = {"command": command, "version": f"deblurvae-{__version__}", "seed": cfg.seed,
             "started": started, "finished": finished or "running", "layout": layout}
    (out / "manifest.cfg").write_text(dump_config(cfg, extra))


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S")


def _write_csv(path: Path, header: list, rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for r in rows:
            wr.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


# ---------------------------------------------------------------- train / ablate

def _run_training(cfg: TrainConfig, out: Path, command: str, data: str | None = None) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    started = _now()
    _write_run_manifest(out, cfg, command, started)
    dataset = build_dataset(cfg, data)
    write_manifest(out / "dataset.csv", dataset)
    result = train(cfg, dataset, out)
    _write_run_manifest(out, cfg, command, started, _now())
    test = dataset.test if len(dataset.test_idx) else dataset.train
    _, summary = evaluate(result.model, result.generator, test)
    summary["final_total"] = result.rows[-1]["total"]
    return summary


def cmd_train(args, overrides) -> int:
    cfg = resolve_config(args.config, overrides)
    summary = _run_training(cfg, Path(args.out), "train", args.data)
    print(f"train: psnr={summary['psnr']:.3f} ssim={summary['ssim']:.4f} "
          f"kernel_m2={summary['kernel_m2']:.4f} spectrum_gap={summary['spectrum_gap']:.5f}")
    return EXIT_OK


def parse_grid(text: str | None) -> list:
    """``"C=0.005,0.025;beta=0.5,1"`` -> list of override dicts (cartesian product)."""
    if text is None or not text.strip():
        return [{}]
    axes = []
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise UsageError(f"malformed grid axis {part!r}; expected key=v1,v2")
        key, values = (s.strip() for s in part.split("=", 1))
        key = ALIASES.get(key, key)
        vals = [v.strip() for v in values.split(",") if v.strip()]
        if not key or not vals:
            raise UsageError(f"malformed grid axis {part!r}; expected key=v1,v2")
        axes.append([(key, v) for v in vals])
    combos = [dict(c) for c in itertools.product(*axes)]
    if len(combos) > MAX_GRID:
        raise UsageError(f"grid has {len(combos)} points; at most {MAX_GRID} allowed")
    return combos


def _grid_run(job):
    index, cfg, out, data = job
    name = f"run{index:03d}"
    try:
        summary = _run_training(cfg, out / name, "ablate", data)
        summary["status"] = "ok"
    except TrainingDiverged as exc:
        summary = {"status": f"diverged: {exc}"}
    return name, summary


def cmd_ablate(args, overrides) -> int:
    base = resolve_config(args.config, overrides)
    points = parse_grid(args.grid)
    cfgs = [base.with_overrides(p) for p in points]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_run_manifest(out, base, "ablate", _now())
    jobs = [(i, c, out, args.data) for i, c in enumerate(cfgs)]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_grid_run, jobs))
    else:
        results = [_grid_run(j) for j in jobs]
    keys = sorted({k for p in points for k in p})
    metrics = ["spectrum_gap", "spectrum_gap_hf", "psnr", "ssim", "kernel_m2", "final_total"]
    rows = []
    for (name, summary), point in zip(results, points):
        rows.append([name] + [point.get(k, "") for k in keys]
                    + [summary.get(m, float("nan")) for m in metrics] + [summary["status"]])

    def rank_key(r):
        gap, ps = r[1 + len(keys)], r[3 + len(keys)]
        bad = not np.isfinite(gap)
        return (bad, gap if not bad else 0.0, -ps if np.isfinite(ps) else 0.0, r[0])

    rows.sort(key=rank_key)
    _write_csv(out / "summary.csv", ["rank", "run"] + keys + metrics + ["status"],
               [[i + 1] + r for i, r in enumerate(rows)])
    diverged = sum(1 for r in rows if r[-1] != "ok")
    print(f"ablate: {len(rows)} runs, {diverged} diverged; best {rows[0][0]}")
    return EXIT_DIVERGED if diverged else EXIT_OK


# ---------------------------------------------------------------- checkpoint commands

def _load_for_ckpt(args, overrides):
    ckpt = Path(args.ckpt)
    config = args.config
    if config is None and (ckpt.parent / "manifest.cfg").is_file():
        config = ckpt.parent / "manifest.cfg"
    cfg = resolve_config(config, overrides)
    if not ckpt.is_file():
        raise OSError(f"checkpoint {ckpt} not found")
    try:
        load_checkpoint(ckpt)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from exc
    model, gen = load_models(cfg, ckpt, cfg.image_size)
    return cfg, model, gen


def _eval_images(cfg: TrainConfig, args, model) -> np.ndarray:
    ds = build_dataset(cfg, args.data)
    images = ds.test if len(ds.test_idx) else ds.train
    c = model.config
    if images.shape[1:] != (c.in_channels, c.image_size, c.image_size):
        raise ValueError(f"data dims {images.shape[1:]} do not match the checkpoint model "
                         f"({c.in_channels}, {c.image_size}, {c.image_size})")
    if args.n:
        images = images[:args.n]
    return images


def cmd_reconstruct(args, overrides) -> int:
    cfg, model, gen = _load_for_ckpt(args, overrides)
    images = _eval_images(cfg, args, model)
    out = Path(args.out)
    (out / "samples").mkdir(parents=True, exist_ok=True)
    rec = reconstruct(model, images)
    ncols = min(16, len(images))
    for start in range(0, len(images), ncols):
        pair = np.concatenate([images[start:start + ncols], rec[start:start + ncols]])
        pgm_write(out / "samples" / f"recon_{start // ncols:03d}.pgm", tile_grid(pair, ncols=ncols))
    rows, summary = evaluate(model, gen, images)
    _write_csv(out / "reconstruct.csv", ["index", "psnr", "ssim", "kernel_m2"],
               [[r["index"], r["psnr"], r["ssim"], r["kernel_m2"]] for r in rows])
    _write_csv(out / "reconstruct_summary.csv", list(summary), [list(summary.values())])
    print(f"reconstruct: {len(images)} images, psnr={summary['psnr']:.3f} ssim={summary['ssim']:.4f}")
    return EXIT_OK


def cmd_generate(args, overrides) -> int:
    cfg, model, _ = _load_for_ckpt(args, overrides)
    seed = cfg.seed if args.seed is None else args.seed
    out = Path(args.out)
    (out / "samples").mkdir(parents=True, exist_ok=True)
    imgs = model.generate(args.n, seed)
    pgm_write(out / "samples" / f"generated_seed{seed}.pgm", tile_grid(imgs, ncols=min(8, max(args.n, 1))))
    print(f"generate: {args.n} samples with seed {seed}")
    return EXIT_OK


def _kernel_image(k: np.ndarray) -> np.ndarray:
    """Scale a kernel into [-1, 1] for display (peak magnitude maps to 1)."""
    peak = np.abs(k).max()
    return k / peak if peak > 0 else k


def _simplex_m2(k: np.ndarray) -> float:
    # least-squares kernels are unconstrained; project onto the simplex by clipping
    w = np.clip(k, 0, None)
    total = w.sum()
    return float(kernel_second_moment(w / total)) if total > 0 else float("nan")


def cmd_estimate_kernel(args, overrides) -> int:
    cfg, model, gen = _load_for_ckpt(args, overrides)
    images = _eval_images(cfg, args, model)
    out = Path(args.out) / "kernels"
    out.mkdir(parents=True, exist_ok=True)
    rec = reconstruct(model, images)
    generated = _generated_kernels(gen, posterior_means(model, images))
    s = cfg.kernel_size
    rows, panel = [], []
    m2_gen, m2_fit = [], []
    for i in range(len(images)):
        fitted = np.mean([fit_kernel_least_squares(images[i, c], rec[i, c], s, ridge=args.ridge).weights
                          for c in range(images.shape[1])], axis=0)
        g = generated[i]
        mg = float(kernel_second_moment(g)) if gen.normalization == "softmax" else float("nan")
        mf = _simplex_m2(fitted)
        m2_gen.append(mg)
        m2_fit.append(mf)
        rows.append([i, "generated", mg] + list(g.ravel()))
        rows.append([i, "fitted", mf] + list(fitted.ravel()))
        pgm_write(out / f"kernel_{i:04d}_generated.pgm", _kernel_image(g))
        pgm_write(out / f"kernel_{i:04d}_fitted.pgm", _kernel_image(fitted))
        panel.extend([_kernel_image(g), _kernel_image(fitted)])
    _write_csv(out / "kernels.csv", ["index", "source", "m2"] + [f"w{j}" for j in range(s * s)], rows)
    pgm_write(out / "panel.pgm", tile_grid(np.stack(panel), ncols=2))
    summary = {"n": len(images), "mean_generated_m2": float(np.mean(m2_gen)),
               "mean_fitted_m2": float(np.mean(m2_fit))}
    _write_csv(out / "summary.csv", list(summary), [list(summary.values())])
    print(f"estimate-kernel: {len(images)} images, mean generated m2={summary['mean_generated_m2']:.4f}")
    return EXIT_OK


def _log_image(spec: np.ndarray) -> np.ndarray:
    """Centered, [-1, 1]-scaled view of a mean log-spectrum."""
    s = np.fft.fftshift(spec)
    lo, hi = s.min(), s.max()
    return 2 * (s - lo) / (hi - lo) - 1 if hi > lo else np.zeros_like(s)


def cmd_spectrum(args, overrides) -> int:
    if args.ckpt:
        cfg, model, _ = _load_for_ckpt(args, overrides)
        images = _eval_images(cfg, args, model)
    else:
        cfg = resolve_config(args.config, overrides)
        ds = build_dataset(cfg, args.data)
        images = ds.test if len(ds.test_idx) else ds.train
        if args.n:
            images = images[:args.n]
        model = None
    sets = {"data": images}
    if args.ref:
        ref_ds = build_dataset(cfg, args.ref)
        sets["ref"] = ref_ds.test if len(ref_ds.test_idx) else ref_ds.train
    if model is not None:
        sets["recon"] = reconstruct(model, images)
        sets["generated"] = model.generate(len(images), cfg.seed)
    out = Path(args.out) / "spectra"
    out.mkdir(parents=True, exist_ok=True)
    H = images.shape[-1]
    rows = []
    for name, imgs in sets.items():
        pgm_write(out / f"{name}_logspec.pgm", _log_image(mean_log_spectrum(imgs)))
        prof = radial_power_spectrum(imgs.reshape(-1, H, H))
        _write_csv(out / f"{name}_radial.csv", ["radius", "power", "count"],
                   zip(prof.radius, prof.power, prof.counts))
        rows.append([name, spectrum_gap(imgs, images), spectrum_gap(imgs, images, min_radius=H / 8),
                     prof.alpha])
    _write_csv(out / "gap.csv", ["set", "spectrum_gap", "spectrum_gap_hf", "alpha"], rows)
    print("spectrum: " + ", ".join(f"{r[0]} gap={r[1]:.5f}" for r in rows))
    return EXIT_OK


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deblurvae", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"deblurvae {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=False):
        sp.add_argument("--config", required=config_required, help="flat key = value config file")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--data", help="'shapes' or an IDX image file (default: from config)")

    sp = sub.add_parser("train", help="train one model")
    common(sp, config_required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("ablate", help="sequential grid of training runs")
    common(sp, config_required=True)
    sp.add_argument("--grid", default="", help='e.g. "C=0.005,0.025,0.1;beta=0.5,1"')
    sp.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    sp.set_defaults(func=cmd_ablate)

    for name, func, help_ in [("reconstruct", cmd_reconstruct, "reconstruction grids and scores"),
                              ("generate", cmd_generate, "prior samples"),
                              ("estimate-kernel", cmd_estimate_kernel, "fitted and generated kernels"),
                              ("spectrum", cmd_spectrum, "mean log-spectra and gaps")]:
        sp = sub.add_parser(name, help=help_)
        common(sp)
        sp.add_argument("--ckpt", required=name != "spectrum", help="checkpoint (.dbve)")
        sp.add_argument("--n", type=int, default=16 if name == "generate" else 0,
                        help="number of images (0 = whole test split)")
        sp.add_argument("--seed", type=int, default=None, help="sampling seed (generate)")
        sp.add_argument("--ridge", type=float, default=1e-6, help="least-squares ridge (estimate-kernel)")
        sp.add_argument("--ref", help="second dataset to compare (spectrum)")
        sp.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s", stream=sys.stderr)
    try:
        overrides = _parse_overrides(extra)
        return args.func(args, overrides)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"deblurvae: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"deblurvae: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, CheckpointError) as exc:
        print(f"deblurvae: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        print(f"deblurvae: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
