"""Command-line entry point: ``tvp <subcommand>``.

Subcommands: make-data, pretrain-gen, train, eval, generate, reproduce.
Every flag can also be set in an INI config (``--config``); flags win.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __doc__ as _pkg_doc
from .config import VARIANTS, RunConfig, dump_run_config, load_run_config
from .dataset import (
    Vocabulary,
    dataset_digest,
    load_arrays,
    make_balanced,
    read_manifest,
    sample_indices,
    to_uint8,
    to_unit_range,
    tokenize,
    write_dataset,
)
from .errors import ConfigError, MissingPrerequisite, TVPError, ValidationError
from .generator import pretrain_generator
from .metrics import assembly_predictor, evaluate, format_table
from .trainer import (
    GeneratorArtifact,
    Trainer,
    load_assembly,
    load_generator_artifact,
    read_checkpoint_config,
    save_generator_artifact,
)

log = logging.getLogger("tvp")

GENERATOR_FILE = "generator.tvp"
FINAL_CKPT = "final.tvp"
GIF_DELAY_MS = 150

# desk-suite pass/fail thresholds (end-to-end ordering check)
SSIM_MARGIN = 0.02
MSE_DROP_RATIO = 0.6


# ------------------------------------------------------------------ stages


def run_make_data(cfg: RunConfig, out: Path) -> dict:
    d = cfg.data
    dims = (d.height, d.width, d.frames)
    amp = d.amplitude or None
    scale = d.glyph_scale or None
    train = make_balanced(d.train_clips, d.seed, dims, amp, scale)
    val = make_balanced(d.val_clips, d.seed, dims, amp, scale, offset=d.train_clips)
    write_dataset([(c, "train") for c in train] + [(c, "val") for c in val], out, generation_seed=d.seed)
    info = {"clips": len(train) + len(val), "train": len(train), "val": len(val), "digest": dataset_digest(out)}
    (out / "config.ini").write_text(dump_run_config(cfg))
    return info


def _require_data(data_dir: Path):
    if not (Path(data_dir) / "manifest.jsonl").is_file():
        raise MissingPrerequisite(f"no dataset at {data_dir}; run `tvp make-data --out {data_dir}` first")


def _vocab(data_dir: Path) -> Vocabulary:
    return Vocabulary.load(read_manifest(data_dir).vocab_path)


def run_pretrain(cfg: RunConfig, data_dir: Path, out: Path, progress=None) -> GeneratorArtifact:
    _require_data(data_dir)
    m = cfg.model
    train = load_arrays(data_dir, "train", m.n_frames, m.max_len)
    val = load_arrays(data_dir, "val", m.n_frames, m.max_len)
    frames = train.frames.reshape(-1, *train.frames.shape[2:])
    held = val.frames.reshape(-1, *val.frames.shape[2:])
    res = pretrain_generator(frames, held, m, cfg.pretrain, progress=progress)
    art = GeneratorArtifact(res.generator, res.inverter, m, res.digest, res.recon_mse, res.converged)
    out.mkdir(parents=True, exist_ok=True)
    save_generator_artifact(out / GENERATOR_FILE, art)
    (out / "config.ini").write_text(dump_run_config(cfg))
    (out / "pretrain.json").write_text(json.dumps(
        {"digest": res.digest, "recon_mse": res.recon_mse, "converged": res.converged,
         "loss_history": res.history}, indent=1))
    return art


def _generator_path(path) -> Path:
    path = Path(path)
    return path / GENERATOR_FILE if path.is_dir() else path


def run_train(cfg: RunConfig, data_dir: Path, generator: Path, out: Path, variant: str | None = None,
              steps: int | None = None, progress=None) -> Trainer:
    _require_data(data_dir)
    art = load_generator_artifact(_generator_path(generator))
    tcfg = cfg.train_config()
    tcfg = dataclasses.replace(tcfg, variant=variant or tcfg.variant, data_dir=str(data_dir),
                               generator_path=str(_generator_path(generator)))
    if steps is not None:
        tcfg = dataclasses.replace(tcfg, steps=steps)
    vocab = _vocab(data_dir)
    data = load_arrays(data_dir, "train", tcfg.model.n_frames, tcfg.model.max_len, vocab)
    out.mkdir(parents=True, exist_ok=True)
    resolved = dataclasses.replace(cfg, train=tcfg)
    (out / "config.ini").write_text(dump_run_config(resolved))
    vocab.save(out / "vocab.json")
    trainer = Trainer(tcfg, art, data, len(vocab), run_dir=out)
    log_path = out / "log.jsonl"
    log_path.unlink(missing_ok=True)
    trainer.train(log_path=log_path, progress=progress)
    digest = trainer.save(out / FINAL_CKPT)
    (out / "digests.json").write_text(json.dumps({
        "checkpoint": digest, "generator": art.digest, "config": tcfg.digest(),
        "dataset": dataset_digest(data_dir)}, indent=1))
    return trainer


def _checkpoint_path(path) -> Path:
    path = Path(path)
    return path / FINAL_CKPT if path.is_dir() else path


def _load_model(checkpoint: Path, generator: Path | None = None):
    ckpt = _checkpoint_path(checkpoint)
    if not ckpt.is_file():
        raise MissingPrerequisite(f"no checkpoint at {ckpt}; run `tvp train` first")
    tcfg = read_checkpoint_config(ckpt)
    art = load_generator_artifact(_generator_path(generator or tcfg.generator_path))
    vocab_file = ckpt.parent / "vocab.json"
    vocab = Vocabulary.load(vocab_file) if vocab_file.is_file() else _vocab(Path(tcfg.data_dir))
    return load_assembly(ckpt, art, len(vocab)), tcfg, vocab


def run_eval(checkpoint: Path, data_dir: Path | None = None, split: str = "val", include_first: bool = False,
             generator: Path | None = None, label: str | None = None, noise_seed: int = 0):
    model, tcfg, vocab = _load_model(checkpoint, generator)
    data_dir = Path(data_dir or tcfg.data_dir)
    _require_data(data_dir)
    data = load_arrays(data_dir, split, tcfg.model.n_frames, tcfg.model.max_len, vocab)
    if data.frames.shape[2:4] != (tcfg.model.height, tcfg.model.width):
        raise ConfigError(f"dataset frames {data.frames.shape[2:4]} do not match model dims")
    return evaluate(assembly_predictor(model, noise_seed), data, include_first, label or tcfg.variant)


def _read_png(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def render_outputs(frames: np.ndarray, caption: str, out: Path, ground_truth: np.ndarray | None = None):
    """Write ``out``.gif (150 ms per frame) and ``out``.png: frames left to
    right, ground truth row above when given, caption in a footer band."""
    from PIL import Image, ImageDraw

    N, H, W, _ = frames.shape
    rows = [frames] if ground_truth is None else [ground_truth, frames]
    footer = 12
    grid = Image.new("RGB", (N * W, len(rows) * H + footer), (255, 255, 255))
    for r, row in enumerate(rows):
        for n in range(N):
            grid.paste(Image.fromarray(row[n]), (n * W, r * H))
    ImageDraw.Draw(grid).text((2, len(rows) * H), caption, fill=(0, 0, 0))
    grid.save(out.with_suffix(".png"), optimize=False)
    imgs = [Image.fromarray(f) for f in frames]
    imgs[0].save(out.with_suffix(".gif"), save_all=True, append_images=imgs[1:], duration=GIF_DELAY_MS, loop=0)
    return out.with_suffix(".gif"), out.with_suffix(".png")


def run_generate(checkpoint: Path, image: Path, caption: str, out: Path, generator: Path | None = None,
                 ground_truth: Path | None = None, noise_seed: int = 0):
    model, tcfg, vocab = _load_model(checkpoint, generator)
    m = tcfg.model
    x1 = _read_png(image)
    if x1.shape[:2] != (m.height, m.width):
        raise ValidationError(f"image is {x1.shape[:2]}, model expects {(m.height, m.width)}")
    tok = tokenize(caption, vocab, m.max_len)
    real = tok.ids[1 : tok.original_length]
    if len(real) and np.all(real == vocab["[UNK]"]):
        log.warning("no caption token is in the vocabulary; proceeding with [UNK] tokens")
    predict = assembly_predictor(model, noise_seed)
    clip = predict(x1[None, None].repeat(m.n_frames, 1), tok.ids[None], tok.mask[None])[0]
    clip[0] = x1  # first frame is the given input
    gt = None
    if ground_truth is not None:
        files = sorted(Path(ground_truth).glob("*.png"))
        if len(files) < m.n_frames:
            raise ValidationError(f"ground truth has {len(files)} frames, need {m.n_frames}")
        gt = np.stack([_read_png(files[i]) for i in sample_indices(len(files), m.n_frames)])
    out.parent.mkdir(parents=True, exist_ok=True)
    return render_outputs(clip, caption, out, gt)


def run_reproduce(cfg: RunConfig, out: Path, variants=VARIANTS, progress=None) -> dict:
    """make-data -> pretrain-gen -> train each variant -> eval, with a table."""
    out.mkdir(parents=True, exist_ok=True)
    stage = "make-data"
    try:
        data_dir = out / "data"
        if not (data_dir / "manifest.jsonl").is_file():
            run_make_data(cfg, data_dir)
        stage = "pretrain-gen"
        gen_dir = out / "generator"
        if not (gen_dir / GENERATOR_FILE).is_file():
            run_pretrain(cfg, data_dir, gen_dir, progress)
        reports, timings = {}, {}
        for v in variants:
            stage = f"train {v}"
            t0 = time.time()
            run_train(cfg, data_dir, gen_dir, out / "runs" / v, variant=v, progress=progress)
            timings[v] = time.time() - t0
            stage = f"eval {v}"
            rep = run_eval(out / "runs" / v, data_dir, "val", cfg.eval.include_first, label=v)
            (out / "runs" / v / "report.json").write_text(rep.to_json())
            reports[v] = rep
    except TVPError as exc:
        raise type(exc)(f"stage {stage!r} failed: {exc}") from exc
    table = format_table(reports)
    summary = {"table": table, "aggregates": {k: r.aggregates() for k, r in reports.items()},
               "train_seconds": timings, "checks": desk_checks(out, reports)}
    (out / "report.txt").write_text(table + "\n\n" + "\n".join(
        f"{'PASS' if ok else 'FAIL'}  {name}" for name, ok in summary["checks"].items()) + "\n")
    (out / "report.json").write_text(json.dumps(summary, indent=1))
    return summary


def mse_drop_ratio(log_path: Path, window: int = 100) -> float:
    """Mean logged L_mse over the last ``window`` generator steps divided by
    the mean over the first ``window``."""
    recs = [json.loads(line) for line in Path(log_path).read_text().splitlines()]
    mse = [r["mse"] for r in recs if r["kind"] == "G"]
    if len(mse) < window:
        raise ValidationError(f"only {len(mse)} generator steps logged")
    return float(np.mean(mse[-window:]) / np.mean(mse[:window]))


def desk_checks(out: Path, reports: dict) -> dict:
    checks = {}
    if "tvp" in reports and "nvp" in reports:
        a, b = reports["tvp"].aggregates(), reports["nvp"].aggregates()
        checks[f"SSIM(TVP) >= SSIM(NVP) + {SSIM_MARGIN}"] = a["ssim"] >= b["ssim"] + SSIM_MARGIN
        checks["MSE(TVP) <= MSE(NVP)"] = a["mse"] <= b["mse"]
    if "tvp" in reports:
        ratio = mse_drop_ratio(out / "runs" / "tvp" / "log.jsonl")
        checks[f"TVP L_mse last/first 100 = {ratio:.3f} <= {MSE_DROP_RATIO}"] = ratio <= MSE_DROP_RATIO
    return checks


# ------------------------------------------------------------------ argparse


def _parse_dims(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ConfigError(f"--dims expects HxW, got {text!r}") from None
    return h, w


def _overrides(args) -> dict:
    ov = {}
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        ov[key.strip()] = value.strip()
    flag_map = {
        "clips": "data.train_clips", "val_clips": "data.val_clips", "frames": "data.frames",
        "seed": "train.seed", "steps": "train.steps", "pretrain_steps": "pretrain.steps",
    }
    for attr, key in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            ov[key] = value
    if getattr(args, "cmd", None) == "make-data" and args.seed is not None:
        ov["data.seed"] = ov.pop("train.seed")
    if getattr(args, "dims", None):
        h, w = _parse_dims(args.dims)
        ov.update({"data.height": h, "data.width": w, "model.height": h, "model.width": w})
    return ov


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tvp", description=_pkg_doc)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, help="INI run configuration")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config key")
        return sp

    sp = common(sub.add_parser("make-data", help="render the synthetic moving-digit dataset"))
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--clips", type=int, help="training clips")
    sp.add_argument("--val-clips", type=int)
    sp.add_argument("--dims", help="frame size HxW")
    sp.add_argument("--frames", type=int, help="source frames per clip")
    sp.add_argument("--seed", type=int)

    sp = common(sub.add_parser("pretrain-gen", help="fit and freeze the style generator + inversion encoder"))
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--pretrain-steps", type=int)

    sp = common(sub.add_parser("train", help="train one model variant"))
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--generator", type=Path, required=True, help="pretrain-gen output dir or file")
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--variant", choices=VARIANTS)
    sp.add_argument("--steps", type=int, help="scheduler iterations (G,G,D per 3)")
    sp.add_argument("--seed", type=int)

    sp = sub.add_parser("eval", help="score a checkpoint on a split")
    sp.add_argument("checkpoint", type=Path)
    sp.add_argument("--data", type=Path)
    sp.add_argument("--generator", type=Path)
    sp.add_argument("--split", default="val")
    sp.add_argument("--include-first", action="store_true", help="score frames 1..N instead of 2..N")
    sp.add_argument("--out", type=Path, help="write the JSON report here")

    sp = sub.add_parser("generate", help="predict frames from an image and a caption")
    sp.add_argument("checkpoint", type=Path)
    sp.add_argument("--image", type=Path, required=True)
    sp.add_argument("--caption", required=True)
    sp.add_argument("--out", type=Path, required=True, help="output path stem (.gif and .png)")
    sp.add_argument("--generator", type=Path)
    sp.add_argument("--ground-truth", type=Path, help="directory of ground-truth frame PNGs")
    sp.add_argument("--noise-seed", type=int, default=0)

    sp = common(sub.add_parser("reproduce", help="run the whole desk-scale suite"))
    sp.add_argument("--suite", choices=["desk"], default="desk")
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--variants", default=",".join(VARIANTS))
    return p


def _progress(every: int = 100):
    def report(*args):
        if len(args) == 2:  # pretraining (step, loss)
            step, loss = args
            if step % every == 0:
                log.info("pretrain step %d loss %.4f", step, loss)
        else:
            rec = args[0]
            if rec["it"] % every == 0:
                tail = f"total {rec['total']:.4f} mse {rec['mse']:.5f}" if rec["kind"] == "G" else \
                    f"D_I {rec['loss_DI']:.4f} D_V {rec['loss_DV']:.4f}"
                log.info("it %d %s %s", rec["it"], rec["kind"], tail)
    return report


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    torch.set_num_threads(1)
    try:
        cfg = None
        if args.cmd in ("make-data", "pretrain-gen", "train", "reproduce"):
            cfg = load_run_config(args.config, _overrides(args))
        if args.cmd == "make-data":
            info = run_make_data(cfg, args.out)
            print(json.dumps(info))
        elif args.cmd == "pretrain-gen":
            art = run_pretrain(cfg, args.data, args.out, _progress())
            print(json.dumps({"generator": str(args.out / GENERATOR_FILE), "digest": art.digest,
                              "recon_mse": art.recon_mse, "converged": art.converged}))
        elif args.cmd == "train":
            tr = run_train(cfg, args.data, args.generator, args.out, args.variant, progress=_progress())
            print(json.dumps({"checkpoint": str(args.out / FINAL_CKPT), "iterations": tr.iteration}))
        elif args.cmd == "eval":
            rep = run_eval(args.checkpoint, args.data, args.split, args.include_first, args.generator)
            if args.out:
                args.out.write_text(rep.to_json())
            print(format_table([rep]))
        elif args.cmd == "generate":
            gif, png = run_generate(args.checkpoint, args.image, args.caption, args.out, args.generator,
                                    args.ground_truth, args.noise_seed)
            print(json.dumps({"gif": str(gif), "png": str(png)}))
        elif args.cmd == "reproduce":
            variants = [v.strip() for v in args.variants.split(",") if v.strip()]
            bad = [v for v in variants if v not in VARIANTS]
            if bad:
                raise ConfigError(f"unknown variants {bad}")
            summary = run_reproduce(cfg, args.out, variants, _progress())
            print(summary["table"])
            for name, ok in summary["checks"].items():
                print(f"{'PASS' if ok else 'FAIL'}  {name}")
    except TVPError as exc:
        print(f"tvp {args.cmd}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
