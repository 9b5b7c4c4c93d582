"""Command line entry point.

    mindvis synth-data --out run/
    mindvis pretrain   --out run/
    mindvis finetune   --out run/
    mindvis sample     --out run/ --seed 7 --sampler plms --steps 50
    mindvis evaluate   --out run/
    mindvis ablate     --out grid/ --axis cond_mode --values c,ct --repeats 3

Every command reads its inputs from and writes its artifacts to ``--out``,
plus a ``manifest-<command>.json`` with the resolved config, its hash, the
seed and content hashes of inputs and outputs. Exit codes: 0 ok, 1 invalid
config, 2 missing dependency artifact.
"""
from __future__ import annotations

import argparse
import concurrent.futures
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .conditioning import ToyUNet
from .config import ABLATION_AXES, ConfigError, RunConfig, load_config
from .data import export_csv, load_dataset, save_dataset
from .pipeline import (build_codec, build_dataset, evaluate_samples, make_noise_schedule, pretrain_denoiser, run_pipeline,
                       run_stage_a, run_stage_b, sample_images, train_oracle)
from .trainer import (Checkpoint, CheckpointError, build_conditional_denoiser, load_checkpoint,
                      load_module_state, save_checkpoint, write_loss_csv)

log = logging.getLogger("mindvis")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING = 0, 1, 2

DATASET = "dataset.mvds"
STAGE_A = "stage_a.mvck"
STAGE_B = "stage_b.mvck"
SAMPLES = "samples.mvck"


class MissingArtifact(Exception):
    pass


def thread_cap() -> int:
    raw = os.environ.get("MINDVIS_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"MINDVIS_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"MINDVIS_THREADS must be a positive integer, got {raw!r}")
    return n


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, cfg: RunConfig, inputs: list, outputs: list) -> Path:
    manifest = {
        "command": command,
        "version": __version__,
        "seed": cfg.seed,
        "config_hash": cfg.hash(),
        "config": cfg.to_dict(),
        "inputs": {Path(p).name: file_sha256(p) for p in inputs},
        "outputs": {Path(p).name: file_sha256(p) for p in outputs},
    }
    path = out / f"manifest-{command}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing {path}; run `mindvis {hint}` first")
    return path


def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6 with 8-bit channels; ``image`` is H x W x 3 in [0, 1]."""
    px = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = px.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + px.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError("not a binary PPM")
    w, h = map(int, parts[1].split())
    px = np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)
    return px.astype(np.float32) / 255


def image_grid(ground_truth: np.ndarray, samples: np.ndarray, gap: int = 2) -> np.ndarray:
    """One row per input: ground truth, then each sampling, on a white background."""
    n, s, h, w, _ = samples.shape
    grid = np.ones((n * (h + gap) - gap, (s + 1) * (w + gap) - gap, 3), dtype=np.float32)
    for i in range(n):
        row = [ground_truth[i]] + list(samples[i])
        for j, img in enumerate(row):
            grid[i * (h + gap):i * (h + gap) + h, j * (w + gap):j * (w + gap) + w] = img
    return grid


# ---------------------------------------------------------------------------
# commands

def _load_dataset(out: Path):
    return load_dataset(require(out / DATASET, "synth-data"))


def cmd_synth_data(cfg: RunConfig, out: Path, args) -> list:
    ds = build_dataset(cfg)
    save_dataset(ds, out / DATASET)
    outputs = [out / DATASET]
    if args.csv:
        export_csv(ds, out / "dataset.csv")
        outputs.append(out / "dataset.csv")
    write_manifest(out, "synth-data", cfg, [], outputs)
    print(f"wrote {len(ds.train)} train / {len(ds.test)} test pairs and {len(ds.unpaired)} unpaired samples")
    return outputs


def cmd_pretrain(cfg: RunConfig, out: Path, args) -> list:
    ds = _load_dataset(out)
    trainer = run_stage_a(cfg, ds, callback=_progress("stage A", cfg.trainer.stage_a.max_epochs))
    ckpt = trainer.checkpoint()
    ckpt.metadata["run_config_hash"] = cfg.hash()
    save_checkpoint(ckpt, out / STAGE_A)
    (out / "loss_stage_a.csv").unlink(missing_ok=True)
    write_loss_csv(trainer.history, out / "loss_stage_a.csv", "stage_a")
    outputs = [out / STAGE_A, out / "loss_stage_a.csv"]
    write_manifest(out, "pretrain", cfg, [out / DATASET], outputs)
    print(f"stage A loss {trainer.history[0]:.4f} -> {trainer.history[-1]:.4f}")
    return outputs


def cmd_finetune(cfg: RunConfig, out: Path, args) -> list:
    ds = _load_dataset(out)
    inputs = [out / DATASET]
    enc_ckpt = None
    if cfg.trainer.use_pretraining:
        enc_ckpt = load_checkpoint(require(out / STAGE_A, "pretrain"))
        if enc_ckpt.metadata.get("mbm") != cfg.mbm.to_dict():
            raise ConfigError("stage A checkpoint was trained with a different mbm config")
        inputs.append(out / STAGE_A)
    unet = pretrain_denoiser(cfg, _cache_dir(out, args))
    trainer = run_stage_b(cfg, ds, enc_ckpt, unet, callback=_progress("stage B", cfg.trainer.stage_b.max_epochs),
                          cache_dir=_cache_dir(out, args))
    ckpt = trainer.checkpoint()
    ckpt.metadata["run_config_hash"] = cfg.hash()
    save_checkpoint(ckpt, out / STAGE_B)
    (out / "loss_stage_b.csv").unlink(missing_ok=True)
    write_loss_csv(trainer.history, out / "loss_stage_b.csv", "stage_b")
    (out / "freeze_policy.txt").write_text(trainer.policy.report(trainer.model) + "\n")
    outputs = [out / STAGE_B, out / "loss_stage_b.csv", out / "freeze_policy.txt"]
    write_manifest(out, "finetune", cfg, inputs, outputs)
    print(f"stage B loss {trainer.history[0]:.4f} -> {trainer.history[-1]:.4f}")
    return outputs


def _load_finetuned(cfg: RunConfig, ckpt: Checkpoint, num_voxels: int):
    meta = ckpt.metadata
    if meta.get("mbm") != cfg.mbm.to_dict() or meta.get("unet", {}).get("channels") != list(cfg.conditioning.channels):
        raise ConfigError("stage B checkpoint does not match the current mbm/conditioning config")
    model = build_conditional_denoiser(num_voxels, cfg.mbm, ToyUNet(cfg.conditioning), None, cfg.seed)
    load_module_state(model, ckpt.subset("model."))
    model.eval()
    return model


def cmd_sample(cfg: RunConfig, out: Path, args) -> list:
    ds = _load_dataset(out)
    ckpt = load_checkpoint(require(out / STAGE_B, "finetune"))
    voxels = ds.voxels("test")
    model = _load_finetuned(cfg, ckpt, voxels.shape[1])
    codec = build_codec(cfg, _cache_dir(out, args))
    samples = sample_images(model, codec, make_noise_schedule(cfg), voxels, cfg.eval.samplings,
                            cfg.diffusion.sampler, cfg.diffusion.steps, cfg.seed)
    save_checkpoint(Checkpoint({"samples": samples}, {"stage": "samples", "seed": cfg.seed,
                                                      "sampler": cfg.diffusion.sampler,
                                                      "steps": cfg.diffusion.steps,
                                                      "run_config_hash": cfg.hash()}), out / SAMPLES)
    write_ppm(out / "samples.ppm", image_grid(ds.images("test"), samples))
    outputs = [out / SAMPLES, out / "samples.ppm"]
    if args.png:
        from PIL import Image
        grid = np.round(image_grid(ds.images("test"), samples) * 255).astype(np.uint8)
        Image.fromarray(grid).save(out / "samples.png")
        outputs.append(out / "samples.png")
    write_manifest(out, "sample", cfg, [out / DATASET, out / STAGE_B], outputs)
    print(f"sampled {samples.shape[1]} images for each of {samples.shape[0]} test inputs")
    return outputs


def cmd_evaluate(cfg: RunConfig, out: Path, args) -> list:
    ds = _load_dataset(out)
    samples = load_checkpoint(require(out / SAMPLES, "sample")).tensors["samples"]
    oracle = train_oracle(cfg, ds, _cache_dir(out, args))
    report = evaluate_samples(samples, ds.images("test"), oracle, cfg.eval.n_way, cfg.eval.top_k,
                              cfg.eval.trials, cfg.seed)
    report.extra["config_hash"] = cfg.hash()
    report.write_csv(out / "metrics.csv")
    report.write_json(out / "metrics.json")
    outputs = [out / "metrics.csv", out / "metrics.json"]
    write_manifest(out, "evaluate", cfg, [out / DATASET, out / SAMPLES], outputs)
    print(f"{report.n}-way top-{report.k}: {report.success_rate:.4f}  fid {report.fid:.3f}  "
          f"consistency {report.consistency_mean:.3f} +- {report.consistency_std:.3f}")
    return outputs


def parse_values(raw: str) -> list:
    """Comma-separated values, each parsed as JSON when possible (``0.5,true,ct``)."""
    values = []
    for item in raw.split(","):
        item = item.strip()
        try:
            values.append(json.loads(item))
        except json.JSONDecodeError:
            values.append(item)
    return values


def _ablation_point(cfg_dict: dict, cache_dir: str) -> dict:
    torch.set_num_threads(1)
    cfg = RunConfig.from_dict(cfg_dict)
    result = run_pipeline(cfg, cache_dir)
    r = result.report
    return {"success_rate": r.success_rate, "fid": r.fid, "mse": r.mse,
            "consistency_mean": r.consistency_mean, "consistency_std": r.consistency_std}


def summarize_ablation(axis: str, values: list, runs: list) -> list:
    """Per value: mean and sample std of accuracy over seeds, Welch p-value against the first value."""
    from scipy import stats

    def accs(v):
        return [r["success_rate"] for r in runs if r["value"] == v and r["error"] == ""]

    base = accs(values[0])
    rows = []
    for v in values:
        a = accs(v)
        mean = float(np.mean(a)) if a else float("nan")
        std = float(np.std(a, ddof=1)) if len(a) > 1 else 0.0 if a else float("nan")
        if v == values[0] or len(a) < 2 or len(base) < 2:
            p = float("nan")
        else:
            p = float(stats.ttest_ind(a, base, equal_var=False).pvalue)
        rows.append({"axis": axis, "value": json.dumps(v), "n_seeds": len(a), "mean": mean, "std": std,
                     "mean_pm_std": f"{mean:.4f} ± {std:.4f}", "p_vs_first": p,
                     "failures": sum(1 for r in runs if r["value"] == v and r["error"])})
    return rows


def cmd_ablate(cfg: RunConfig, out: Path, args) -> list:
    if args.axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {args.axis!r}; choose from {', '.join(ABLATION_AXES)}")
    if not args.values:
        raise ConfigError("--values is required for ablate")
    if args.repeats < 1:
        raise ConfigError("--repeats must be >= 1")
    key = ABLATION_AXES[args.axis]
    values = parse_values(args.values)
    points = []
    for v in values:
        point = cfg.replace(**{key: v})  # validates every value before anything runs
        for r in range(args.repeats):
            points.append((v, cfg.seed + r, replace(point, seed=cfg.seed + r)))
    cache = str(_cache_dir(out, args))
    workers = min(thread_cap(), len(points))
    runs = []
    if workers == 1:
        outcomes = []
        for _, _, point in points:
            try:
                outcomes.append((_ablation_point(point.to_dict(), cache), ""))
            except Exception as exc:  # recorded, grid continues
                outcomes.append((None, f"{type(exc).__name__}: {exc}"))
    else:
        # warm the shared caches once so workers do not race to build them
        pretrain_denoiser(points[0][2], cache)
        with concurrent.futures.ProcessPoolExecutor(workers) as pool:
            futures = [pool.submit(_ablation_point, p.to_dict(), cache) for _, _, p in points]
            outcomes = []
            for f in futures:
                try:
                    outcomes.append((f.result(), ""))
                except Exception as exc:
                    outcomes.append((None, f"{type(exc).__name__}: {exc}"))
    for (v, seed, _), (metrics, err) in zip(points, outcomes):
        row = {"value": v, "seed": seed, "error": err}
        row.update(metrics or {"success_rate": float("nan"), "fid": float("nan"), "mse": float("nan"),
                               "consistency_mean": float("nan"), "consistency_std": float("nan")})
        runs.append(row)
        if err:
            log.warning("ablation point %s=%r seed %d failed: %s", args.axis, v, seed, err)

    runs_path = out / "ablation_runs.csv"
    with open(runs_path, "w", newline="") as fh:
        w = csv.writer(fh)
        cols = ["value", "seed", "success_rate", "fid", "mse", "consistency_mean", "consistency_std", "error"]
        w.writerow(["axis"] + cols)
        for r in runs:
            w.writerow([args.axis] + [json.dumps(r[c]) if c == "value" else r[c] for c in cols])
    table_path = out / "ablation.csv"
    rows = summarize_ablation(args.axis, values, runs)
    with open(table_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    outputs = [table_path, runs_path]
    write_manifest(out, "ablate", cfg, [], outputs)
    for r in rows:
        print(f"{args.axis}={r['value']}: {r['mean_pm_std']} (n={r['n_seeds']}, p={r['p_vs_first']:.3g})")
    return outputs


def _cache_dir(out: Path, args) -> Path:
    return Path(args.cache) if args.cache else out / "cache"


def _progress(label: str, total: int):
    def cb(epoch, loss):
        if epoch == 1 or epoch % 20 == 0 or epoch == total:
            log.info("%s epoch %d/%d loss %.5f", label, epoch, total, loss)
    return cb


COMMANDS = {
    "synth-data": cmd_synth_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "sample": cmd_sample,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config; omitted keys take the desk defaults")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--out", help="artifact directory (overrides the config)")
    common.add_argument("--cond-mode", choices=["c", "ct"], help="conditioning mode")
    common.add_argument("--sampler", choices=["ddpm", "plms"])
    common.add_argument("--steps", type=int, help="PLMS steps")
    common.add_argument("--cache", help="cache for the pretrained denoiser and oracle (default OUT/cache)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mindvis", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth-data", parents=[common], help="generate the synthetic paired dataset") \
        .add_argument("--csv", action="store_true", help="also export dataset.csv")
    sub.add_parser("pretrain", parents=[common], help="Stage A masked brain modeling")
    sub.add_parser("finetune", parents=[common], help="Stage B conditional finetuning")
    sub.add_parser("sample", parents=[common], help="decode test inputs into an image grid") \
        .add_argument("--png", action="store_true", help="also write samples.png")
    sub.add_parser("evaluate", parents=[common], help="identification accuracy, FID, MSE, consistency")
    p = sub.add_parser("ablate", parents=[common], help="run the pipeline over one config axis")
    p.add_argument("--axis", required=True, help=f"one of {', '.join(ABLATION_AXES)}")
    p.add_argument("--values", required=True, help="comma-separated values, e.g. c,ct or 0.35,0.75")
    p.add_argument("--repeats", type=int, default=3, help="seeds per value: seed, seed+1, ...")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = args.out
    if args.cond_mode is not None:
        overrides["conditioning.cond_mode"] = args.cond_mode
    if args.sampler is not None:
        overrides["diffusion.sampler"] = args.sampler
    if args.steps is not None:
        overrides["diffusion.steps"] = args.steps
    cfg = cfg.replace(**overrides) if overrides else cfg
    if cfg.out is None:
        raise ConfigError("no output directory: pass --out or set \"out\" in the config")
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        thread_cap()
        # one intra-op thread keeps floating-point reductions, and so artifacts, reproducible
        torch.set_num_threads(1)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, out, args)
    except (ConfigError, CheckpointError) as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except OSError as exc:
        if isinstance(exc, FileNotFoundError) and args.config and Path(exc.filename or "") == Path(args.config):
            print(f"error: invalid config: cannot read {args.config}", file=sys.stderr)
            return EXIT_CONFIG
        raise
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
