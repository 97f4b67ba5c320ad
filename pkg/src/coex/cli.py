"""Command-line surface: dataset synthesis, training, evaluation, verification.

Every artifact-producing command writes a ``run_manifest.json`` beside its
outputs: resolved configuration, seed, format versions, and a hashed file
inventory.  In deterministic mode (``--threads 1``, the default) rerunning a
command with the same inputs reproduces its outputs byte for byte.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .networks import (CHECKPOINT_VERSION, ExpertConfig, GateConfig,
                       build_expert, build_gate, expert_gradient_report,
                       gate_gradient_report, load_checkpoint, save_checkpoint)
from .noise import (AWGN, JPEG, STD_LUMA_QUANT, EvalGrid, NoiseSpec,
                    apply_noise, dct8x8, idct8x8, load_image, make_eval_grid,
                    quant_table, read_grid_csv, save_image, synth_image,
                    write_grid_csv)
from .evaluation import (assignment_grid, denoise_blind,
                         effective_complexity, evaluate_grid, psnr, ssim)
from .training import (CompetitionTrainer, TrainConfig, clone_experts,
                       competition_step, compute_loss_vector, param_digest,
                       sample_patch_batch, winner)
from .rng import Rng, derive_seed

IMAGE_EXTENSIONS = (".pgm", ".png")


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

def load_dataset(path) -> list:
    """All grayscale images in a directory, sorted by filename."""
    d = Path(path)
    if not d.is_dir():
        raise CliError(f"dataset directory not found: {path}")
    files = sorted(p for p in d.iterdir()
                   if p.suffix.lower() in IMAGE_EXTENSIONS)
    if not files:
        raise CliError(f"no {'/'.join(IMAGE_EXTENSIONS)} images in {path}")
    return [load_image(p) for p in files]


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, config: dict, seed: int) -> Path:
    """Hash every file in the run directory into run_manifest.json."""
    entries = []
    for p in sorted(out_dir.rglob("*")):
        if p.is_file() and p.name != "run_manifest.json":
            entries.append({"path": str(p.relative_to(out_dir)),
                            "sha256": _sha256(p), "bytes": p.stat().st_size})
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "versions": {"coex": __version__,
                     "checkpoint_format": CHECKPOINT_VERSION},
        "outputs": entries,
    }
    path = out_dir / "run_manifest.json"
    with open(path, "w", newline="\n") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_config_file(path, values: dict) -> None:
    with open(path, "w", newline="\n") as f:
        for k in sorted(values):
            f.write(f"{k}={_format_value(values[k])}\n")


def read_config_file(path) -> dict:
    values = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, val = line.partition("=")
            if not sep:
                raise CliError(f"{path}: malformed config line {line!r}")
            values[key.strip()] = val.strip()
    return values


_TRAIN_KEYS = {
    "n_experts": int, "expert": str, "patch_size": int,
    "patches_per_batch": int, "pretrain_epochs": int, "compete_epochs": int,
    "iters_per_epoch": int, "lr": float, "seed": int, "noise": str,
    "train_gate": lambda s: s in ("true", "1", "yes"), "threads": int,
}
_RUN_KEYS = {"data": str, "checkpoint_every": int, "eval_every": int,
             "eval_n": int}


def _coerce_config(raw: dict) -> tuple:
    """Split a flat key=value mapping into TrainConfig kwargs + run options."""
    cfg, run = {}, {}
    for key, val in raw.items():
        if key in _TRAIN_KEYS:
            cfg[key] = _TRAIN_KEYS[key](val) if isinstance(val, str) else val
        elif key in _RUN_KEYS:
            run[key] = _RUN_KEYS[key](val) if isinstance(val, str) else val
        else:
            raise CliError(f"unknown config key {key!r}")
    return cfg, run


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    out = Path(args.out)
    if args.procedural is None and args.from_images is None and args.grid is None:
        raise CliError("synth needs --procedural, --from-images, or --grid")
    out.mkdir(parents=True, exist_ok=True)
    images = []
    if args.from_images:
        src = Path(args.from_images)
        if not src.is_dir():
            raise CliError(f"image directory not found: {src}")
        files = sorted(p for p in src.iterdir()
                       if p.suffix.lower() in IMAGE_EXTENSIONS)
        if not files:
            raise CliError(f"no images found in {src}")
        images = [load_image(p) for p in files]
    if args.procedural:
        for i in range(args.procedural):
            rng = Rng(derive_seed(args.seed, "synth", i))
            images.append(synth_image(args.kind, args.size, rng))
    for i, img in enumerate(images):
        save_image(out / f"img_{i:04d}.pgm", img)

    grid = None
    if args.grid:
        n = args.n if args.n else (len(images) if images else 68)
        grid = make_eval_grid(args.grid, n)
        write_grid_csv(out / f"grid_{args.grid}.csv", grid)
    if args.degrade:
        if grid is None or not images:
            raise CliError("--degrade needs both images and --grid")
        for row_i, (idx, spec) in enumerate(grid.entries):
            if idx >= len(images):
                raise CliError(f"grid index {idx} outside the {len(images)}-image "
                               f"dataset")
            rng = Rng(derive_seed(args.seed, "degrade", row_i))
            noisy = np.clip(apply_noise(images[idx], spec, rng), 0.0, 1.0)
            save_image(out / f"noisy_{args.grid}_{idx:04d}.pgm", noisy)

    config = {"procedural": args.procedural, "size": args.size,
              "kind": args.kind, "from_images": args.from_images,
              "grid": args.grid, "n": args.n, "degrade": args.degrade}
    write_manifest(out, "synth", config, args.seed)
    print(f"synth: wrote {len(images)} images"
          + (f" + grid_{args.grid}.csv" if grid else "") + f" to {out}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _log_path(run_dir: Path) -> Path:
    return run_dir / "trainlog.csv"


def _append_epoch_rows(run_dir: Path, trainer: CompetitionTrainer, record) -> None:
    path = _log_path(run_dir)
    fresh = not path.exists()
    with open(path, "a", newline="\n") as f:
        if fresh:
            f.write(trainer.log.csv_header() + "\n")
        for row in trainer.log.csv_rows(record):
            f.write(row + "\n")


def _truncate_log(run_dir: Path, epoch: int) -> None:
    """Drop rows past a resume point (a crash can leave the log one epoch
    ahead of the newest checkpoint)."""
    path = _log_path(run_dir)
    if not path.exists():
        return
    with open(path) as f:
        lines = f.readlines()
    kept = lines[:1] + [ln for ln in lines[1:]
                        if ln.strip() and int(ln.split(",", 1)[0]) < epoch]
    with open(path, "w", newline="\n") as f:
        f.writelines(kept)


def _latest_checkpoint(run_dir: Path):
    ckpts = sorted((run_dir / "checkpoints").glob("epoch_*.ckpt"))
    return ckpts[-1] if ckpts else None


def _make_eval_hook(config: TrainConfig, images, every: int, n: int):
    if every <= 0:
        return None
    n = min(n, len(images))
    entries = (make_eval_grid(AWGN, n).entries
               + make_eval_grid(JPEG, n).entries)
    grid = EvalGrid(entries)
    eval_seed = derive_seed(config.seed, "train-eval")

    def hook(trainer):
        if trainer.epochs_done % every != 0:
            return None
        report = evaluate_grid(trainer.bundle(), images[:n], grid, eval_seed)
        vals = [r.psnr for r in report.rows if np.isfinite(r.psnr)]
        return float(np.mean(vals)) if vals else None

    return hook


def cmd_train(args) -> int:
    if args.resume:
        run_dir = Path(args.resume)
        raw = read_config_file(run_dir / "config.txt")
        cfg_kwargs, run_opts = _coerce_config(raw)
        if args.threads is not None:
            cfg_kwargs["threads"] = args.threads
        config = TrainConfig(**cfg_kwargs)
        data_dir = args.data or run_opts.get("data")
    else:
        if not args.data or not args.out:
            raise CliError("train needs --data and --out (or --resume)")
        run_dir = Path(args.out)
        defaults = {}
        if args.config:
            defaults, run_defaults = _coerce_config(read_config_file(args.config))
        else:
            run_defaults = {}
        flag_map = {
            "n_experts": args.experts, "expert": args.expert,
            "patch_size": args.patch, "patches_per_batch": args.patches_per_batch,
            "pretrain_epochs": args.pretrain_epochs,
            "compete_epochs": args.compete_epochs,
            "iters_per_epoch": args.iters_per_epoch, "lr": args.lr,
            "seed": args.seed, "noise": args.noise, "threads": args.threads,
        }
        cfg_kwargs = dict(defaults)
        for key, val in flag_map.items():
            if val is not None:
                cfg_kwargs[key] = val
        if args.no_gate:
            cfg_kwargs["train_gate"] = False
        config = TrainConfig(**cfg_kwargs)
        run_opts = dict(run_defaults)
        for key, val in (("checkpoint_every", args.checkpoint_every),
                         ("eval_every", args.eval_every),
                         ("eval_n", args.eval_n)):
            if val is not None:
                run_opts[key] = val
        data_dir = args.data

    ckpt_every = int(run_opts.get("checkpoint_every", 10))
    eval_every = int(run_opts.get("eval_every", 0))
    eval_n = int(run_opts.get("eval_n", 16))

    images = load_dataset(data_dir)
    trainer = CompetitionTrainer(config, images)

    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "checkpoints").mkdir(exist_ok=True)
    if args.resume:
        latest = _latest_checkpoint(run_dir)
        if latest is None:
            raise CliError(f"{run_dir}: no checkpoint to resume from")
        trainer.adopt(load_checkpoint(latest))
        _truncate_log(run_dir, trainer.epochs_done)
        print(f"train: resuming {run_dir} at epoch {trainer.epochs_done}")
    else:
        resolved = {f: getattr(config, f) for f in _TRAIN_KEYS}
        resolved.update({"data": str(data_dir), "checkpoint_every": ckpt_every,
                         "eval_every": eval_every, "eval_n": eval_n})
        write_config_file(run_dir / "config.txt", resolved)

    def epoch_hook(tr, record):
        _append_epoch_rows(run_dir, tr, record)
        done = tr.epochs_done
        if done % ckpt_every == 0 or done == config.total_epochs:
            save_checkpoint(run_dir / "checkpoints" / f"epoch_{done:04d}.ckpt",
                            tr.bundle())

    trainer.run(eval_hook=_make_eval_hook(config, images, eval_every, eval_n),
                epoch_hook=epoch_hook,
                stop_after=args.stop_after)

    if trainer.epochs_done == config.total_epochs:
        save_checkpoint(run_dir / "final.ckpt", trainer.bundle())
    resolved = {f: getattr(config, f) for f in _TRAIN_KEYS}
    write_manifest(run_dir, "train",
                   {**resolved, "data": str(data_dir)}, config.seed)
    wins = (trainer.log.epochs[-1].wins.tolist() if trainer.log.epochs else [])
    print(f"train: {trainer.epochs_done}/{config.total_epochs} epochs done, "
          f"final-epoch wins {wins}, "
          f"effective clusters {trainer.log.effective_clusters()}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(args) -> int:
    bundle = load_checkpoint(args.checkpoint)
    images = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.grid_csv:
        grid = read_grid_csv(args.grid_csv)
    else:
        n = args.n if args.n else min(68, len(images))
        if n > len(images):
            raise CliError(f"grid size {n} exceeds dataset of {len(images)} "
                           f"images; checkpoint/dataset mismatch")
        kinds = [AWGN, JPEG] if args.grid == "both" else [args.grid]
        entries = []
        for kind in kinds:
            entries.extend(make_eval_grid(kind, n).entries)
        grid = EvalGrid(entries)

    report = evaluate_grid(bundle, images, grid, args.seed,
                           threads=args.threads)
    report.to_csv(out / "report.csv")
    report.summary_to_csv(out / "summary.csv")

    if args.dump_images:
        img_dir = out / "images"
        img_dir.mkdir(exist_ok=True)
        for row_i, (idx, spec) in enumerate(grid.entries):
            rng = Rng(derive_seed(args.seed, "eval", row_i))
            noisy = apply_noise(images[idx], spec, rng)
            den, _ = denoise_blind(bundle, noisy)
            save_image(img_dir / f"{spec.source}_{idx:04d}_noisy.pgm",
                       np.clip(noisy, 0.0, 1.0))
            save_image(img_dir / f"{spec.source}_{idx:04d}_denoised.pgm", den)

    if args.assignment:
        agrid = assignment_grid(bundle, images, seed=args.seed)
        agrid.to_csv(out / "assignment.csv")
        print(f"eval: oracle/routed agreement {agrid.agreement:.3f}")
    if args.complexity:
        comp = effective_complexity(bundle, (args.height, args.width))
        comp.to_csv(out / "complexity.csv")
        print(f"eval: effective params {comp.params_effective:.1f} "
              f"of {comp.params_total} total at "
              f"{args.width}x{args.height}")

    config = {"checkpoint": str(args.checkpoint), "data": str(args.data),
              "grid": args.grid, "n": args.n, "grid_csv": args.grid_csv,
              "assignment": args.assignment, "complexity": args.complexity,
              "threads": args.threads}
    write_manifest(out, "eval", config, args.seed)
    for agg in report.aggregates:
        print(f"eval: {agg.source} mean PSNR "
              f"{agg.mean_psnr:.2f} dB over {agg.finite_count} finite rows")
    return 0


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------

def _verify_checks(seed: int):
    """Yield (name, passed, detail) for the built-in verification suite."""
    rep = expert_gradient_report(ExpertConfig(3, 4), seed=seed)
    yield ("gradient_check_expert_d3c4", rep.passed,
           f"max_rel_err={rep.max_rel_error:.3e} tol={rep.tolerance}")
    rep = gate_gradient_report(7, seed=seed)
    yield ("gradient_check_gate", rep.passed,
           f"max_rel_err={rep.max_rel_error:.3e} tol={rep.tolerance}")

    rng = Rng(derive_seed(seed, "verify", "dct"))
    blocks = rng.normal(64 * 32).reshape(32, 8, 8)
    err = float(np.abs(idct8x8(dct8x8(blocks)) - blocks).max())
    yield ("dct_roundtrip", err < 1e-10, f"max_abs_err={err:.3e}")

    a = np.full((16, 16), 0.25)
    p = psnr(a, a + 0.1)
    yield ("psnr_uniform_difference", abs(p - 20.0) < 0.01, f"psnr={p:.6f} dB")
    img = synth_image("mixed", 64, Rng(derive_seed(seed, "verify", "img")))
    yield ("ssim_identity", ssim(img, img) == 1.0, "ssim(x,x)=1.0")
    yield ("quant_table_q50", bool(np.array_equal(quant_table(50),
                                                  STD_LUMA_QUANT)),
           "quality-50 table equals the standard luminance table")

    # winner-take-all freeze + clone tie-break on a small competition run
    rng = Rng(derive_seed(seed, "verify", "wta"))
    e1 = build_expert(ExpertConfig(2, 4), rng)
    gate = build_gate(GateConfig(3), rng)
    imgs = [synth_image("mixed", 48, rng.spawn("vimg", i)) for i in range(3)]
    experts = clone_experts(e1, 3)
    batch0 = sample_patch_batch((imgs[0], imgs[0]), 4, 16, rng)
    losses = compute_loss_vector(experts, batch0)
    tie_ok = all(l == losses[0] for l in losses) and winner(losses) == 0
    yield ("clone_tiebreak", tie_ok,
           f"post-clone losses bit-identical, first winner "
           f"{winner(losses)}")
    frozen = True
    for it in range(40):
        noisy = apply_noise(imgs[it % 3],
                            NoiseSpec(AWGN, 5.0 if it % 2 else 50.0), rng)
        batch = sample_patch_batch((noisy, imgs[it % 3]), 4, 16, rng)
        before = [param_digest(e) for e in experts]
        res = competition_step(experts, gate, batch)
        after = [param_digest(e) for e in experts]
        for j in range(3):
            if j == res.winner:
                frozen &= before[j] != after[j]
            else:
                frozen &= before[j] == after[j]
    yield ("winner_take_all_freeze", frozen,
           "non-winners bit-frozen over 40 iterations, winner changed")


def cmd_verify(args) -> int:
    lines = []
    failures = 0
    for name, passed, detail in _verify_checks(args.seed):
        status = "PASS" if passed else "FAIL"
        line = f"{name}: {status} ({detail})"
        lines.append(line)
        print(line)
        failures += 0 if passed else 1
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "verify_report.txt", "w", newline="\n") as f:
            f.write("\n".join(lines) + "\n")
        write_manifest(out, "verify", {}, args.seed)
    if failures:
        print(f"verify: {failures} check(s) FAILED")
        return 1
    print("verify: all checks passed")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="coex",
        description="Blind denoising via a competition of convolutional "
                    "experts with a gating router.")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate datasets and evaluation grids")
    sp.add_argument("--out", required=True)
    sp.add_argument("--procedural", type=int, default=None, metavar="N",
                    help="generate N procedural images")
    sp.add_argument("--size", type=int, default=96)
    sp.add_argument("--kind", default="mixed",
                    choices=("gradient", "checker", "fractal", "mixed"))
    sp.add_argument("--from-images", default=None, metavar="DIR",
                    help="import an existing image directory")
    sp.add_argument("--grid", choices=(AWGN, JPEG), default=None)
    sp.add_argument("--n", type=int, default=None, help="grid length")
    sp.add_argument("--degrade", action="store_true",
                    help="also write noisy images per the grid")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_synth)

    tp = sub.add_parser("train", help="run two-phase competition training")
    tp.add_argument("--data", default=None)
    tp.add_argument("--out", default=None)
    tp.add_argument("--resume", default=None, metavar="RUNDIR")
    tp.add_argument("--config", default=None, metavar="FILE",
                    help="key=value config file (flags override)")
    tp.add_argument("--experts", type=int, default=None)
    tp.add_argument("--expert", default=None, metavar="dXcY")
    tp.add_argument("--patch", type=int, default=None)
    tp.add_argument("--patches-per-batch", type=int, default=None)
    tp.add_argument("--pretrain-epochs", type=int, default=None)
    tp.add_argument("--compete-epochs", type=int, default=None)
    tp.add_argument("--iters-per-epoch", type=int, default=None)
    tp.add_argument("--lr", type=float, default=None)
    tp.add_argument("--seed", type=int, default=None)
    tp.add_argument("--noise", default=None)
    tp.add_argument("--no-gate", action="store_true")
    tp.add_argument("--threads", type=int, default=None)
    tp.add_argument("--checkpoint-every", type=int, default=None)
    tp.add_argument("--eval-every", type=int, default=None)
    tp.add_argument("--eval-n", type=int, default=None)
    tp.add_argument("--stop-after", type=int, default=None,
                    help="stop after this many epochs (for resumable runs)")
    tp.set_defaults(func=cmd_train)

    ep = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    ep.add_argument("--checkpoint", required=True)
    ep.add_argument("--data", required=True)
    ep.add_argument("--out", required=True)
    ep.add_argument("--grid", choices=(AWGN, JPEG, "both"), default="both")
    ep.add_argument("--n", type=int, default=None)
    ep.add_argument("--grid-csv", default=None)
    ep.add_argument("--assignment", action="store_true")
    ep.add_argument("--complexity", action="store_true")
    ep.add_argument("--width", type=int, default=481)
    ep.add_argument("--height", type=int, default=321)
    ep.add_argument("--dump-images", action="store_true")
    ep.add_argument("--seed", type=int, default=0)
    ep.add_argument("--threads", type=int, default=1)
    ep.set_defaults(func=cmd_eval)

    vp = sub.add_parser("verify", help="run the built-in verification suite")
    vp.add_argument("--seed", type=int, default=0)
    vp.add_argument("--out", default=None)
    vp.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ValueError, OSError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
