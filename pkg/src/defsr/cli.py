"""Command-line interface: enhancement, full pipeline, eval, training, ablation.

The full pipeline composes the stages in order: guided diffusion
enhancement of the low-resolution input (or plain bicubic upsampling
when disabled), frozen-extractor feature pyramids for the enhanced
input and the reference, coarsest-level patch matching, per-level
texture transfer (deformable or plain per configuration), and residual
aggregation back onto the enhanced image.

Subcommands:
    enhance     detail-generation stage only (LR -> enhanced x4)
    srun        full pipeline (LR + reference + checkpoint -> SR)
    eval        metrics over a triplet directory, CSV report + figure
    train       training harness driven by a key = value config file
    ablate      the four-configuration ablation study, CSV + figure
    gen-corpus  synthetic dataset generation to a directory

Config files are plain-text ``key = value`` lines; ``#`` starts a
comment.  All commands are deterministic for a given seed.
"""

from __future__ import annotations

import argparse
import csv
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .correspond import build_correspondence, build_extractor, extract_pyramid
from .diffusion import (
    GaussianPriorDenoiser,
    LearnedTinyDenoiser,
    OracleDenoiser,
    SamplerConfig,
    ZeroDenoiser,
    build_schedule,
    sample,
)
from .imagecore import ImageIOError, bicubic_resize, load_image, require_image, save_image
from .linop import build_downsampler
from .metrics import psnr_y, ssim_y, write_report
from .rng import derive_seed
from .tiling import plan_tiles, tiled_sample
from .training import (
    CheckpointError,
    CorpusSpec,
    LossConfig,
    TrainConfig,
    TrainingError,
    check_checkpoint_compat,
    evaluate_corpus,
    feature_cache,
    load_checkpoint,
    make_corpus,
    prepare_pairs,
    split_params,
    train,
    write_corpus,
)
from .transfer import build_level_inputs, forward_sr

__all__ = [
    "PipelineConfig",
    "ConfigError",
    "parse_config",
    "run_pipeline",
    "run_ablation",
    "ABLATION_VARIANTS",
    "main",
]


class ConfigError(ValueError):
    pass


# ---- config files ----

def parse_config(path) -> dict[str, str]:
    """Read ``key = value`` lines; '#' comments; duplicate keys rejected."""
    out: dict[str, str] = {}
    text = Path(path).read_text()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or not value:
            raise ConfigError(f"{path}:{lineno}: empty key or value in {raw!r}")
        if key in out:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _get(cfg, key, cast, default):
    if key not in cfg:
        return default
    try:
        return cast(cfg[key])
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {cfg[key]!r}") from exc


def _as_bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(low)


def _as_channels(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in text.split(","))


def corpus_spec_from_config(cfg: dict[str, str]) -> CorpusSpec:
    return CorpusSpec(
        count=_get(cfg, "count", int, 100),
        lr_size=_get(cfg, "lr_size", int, 40),
        scale=_get(cfg, "scale", int, 4),
        seed=_get(cfg, "seed", int, 0),
        matched_fraction=_get(cfg, "matched_fraction", float, 0.75),
    )


def train_config_from_config(cfg: dict[str, str]) -> TrainConfig:
    loss = LossConfig(
        lambda_per=_get(cfg, "lambda_per", float, 1e-2),
        lambda_adv=_get(cfg, "lambda_adv", float, 1e-4),
        warmup_epochs=_get(cfg, "warmup_epochs", int, 2),
        adv_enabled=_get(cfg, "adv_enabled", _as_bool, True),
    )
    return TrainConfig(
        epochs=_get(cfg, "epochs", int, 5),
        batch_size=_get(cfg, "batch_size", int, 9),
        crop=_get(cfg, "crop", int, 64),
        lr=_get(cfg, "lr", float, 1e-4),
        lr_decay=_get(cfg, "lr_decay", float, 1.0),
        adam_eps=_get(cfg, "adam_eps", float, 1e-8),
        seed=_get(cfg, "train_seed", int, 0),
        precision=_get(cfg, "precision", str, "single"),
        mode=_get(cfg, "mode", str, "deform"),
        channels=_get(cfg, "channels", _as_channels, (16, 32, 64)),
        extractor_seed=_get(cfg, "extractor_seed", int, 0),
        loss=loss,
        val_count=_get(cfg, "val_count", int, 0),
    )


# ---- pipeline ----

@dataclass(frozen=True)
class PipelineConfig:
    """Everything the full pipeline needs besides the two input images."""

    scale: int = 4
    denoiser: str = "gaussian:0.0001"
    steps: int = 50
    tile: int = 64  # 0 disables tiling (single full-canvas sample)
    extractor_seed: int = 0
    channels: tuple = (16, 32, 64)
    ckpt: str | None = None
    def_enabled: bool = True
    dcn_enabled: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.scale != 4:
            raise ValueError(f"pipeline scale is fixed at 4, got {self.scale}")

    @property
    def mode(self) -> str:
        return "deform" if self.dcn_enabled else "plain"


def _denoiser_factory(spec: str, mu: np.ndarray, pads: tuple[int, int]):
    """Return window -> Denoiser for the given denoiser spec string.

    ``mu`` is the full-canvas bicubic upsample; windows index into the
    symmetric-padded canvas, so reference images used by the oracle and
    gaussian kinds get the same padding the sampler applies to y.
    """
    kind, _, arg = spec.partition(":")
    if kind == "zero":
        return lambda win: ZeroDenoiser()
    if kind == "learned":
        if not arg:
            raise ValueError("learned denoiser needs a checkpoint: learned:PATH")
        params, _ = load_checkpoint(arg)
        den = LearnedTinyDenoiser(params)
        return lambda win: den

    if kind == "oracle":
        if not arg:
            raise ValueError("oracle denoiser needs a target image: oracle:PATH")
        base = load_image(arg)
        if base.shape != mu.shape:
            raise ValueError(
                f"oracle target shape {base.shape} does not match the x4 canvas {mu.shape}"
            )
        make = OracleDenoiser
    elif kind == "gaussian":
        base = mu
        sigma0 = float(arg) if arg else 1e-4
        make = lambda img: GaussianPriorDenoiser(img, sigma0)
    else:
        raise ValueError(f"unknown denoiser {spec!r} (zero|gaussian[:S]|oracle:P|learned:P)")

    padded = np.pad(base, ((0, pads[0]), (0, pads[1]), (0, 0)), mode="symmetric")

    def factory(win):
        if win is None:
            return make(base)
        y0, x0, y1, x1 = win.rect
        return make(padded[y0:y1, x0:x1])

    return factory


def enhance(lr: np.ndarray, cfg: PipelineConfig) -> np.ndarray:
    """Detail-generation stage: guided diffusion upsample of LR by x4."""
    lr = require_image(lr, 3, "lr")
    h, w = lr.shape[0] * cfg.scale, lr.shape[1] * cfg.scale
    mu = bicubic_resize(lr, h, w)
    sampler = SamplerConfig(
        schedule=build_schedule(), steps_used=cfg.steps, seed=derive_seed(cfg.seed, "enhance")
    )
    if cfg.tile > 0:
        plan = plan_tiles(h, w, cfg.tile)
        factory = _denoiser_factory(cfg.denoiser, mu, (plan.pad_h, plan.pad_w))
        out = tiled_sample(lr, "bicubic", cfg.scale, cfg.tile, factory, sampler)
    else:
        factory = _denoiser_factory(cfg.denoiser, mu, (0, 0))
        A = build_downsampler("bicubic", cfg.scale, (h, w))
        out = sample(lr, A, factory(None), sampler, clamp=False)
    return np.clip(out, 0.0, 1.0)


def _load_pipeline_params(cfg: PipelineConfig):
    if cfg.ckpt is None:
        raise ValueError("a checkpoint path is required to run the pipeline")
    loaded, meta = load_checkpoint(cfg.ckpt)
    check_checkpoint_compat(
        meta,
        mode=cfg.mode,
        channels=",".join(str(c) for c in cfg.channels),
        extractor_seed=cfg.extractor_seed,
        scale=cfg.scale,
    )
    tparams, aparams, _ = split_params(loaded)
    return tparams, aparams


def run_pipeline(lr, ref, cfg: PipelineConfig, params=None) -> np.ndarray:
    """Full LR + reference -> SR composition.

    ``params`` overrides the checkpoint with (transfer, aggregator)
    parameter dicts; otherwise ``cfg.ckpt`` is loaded and checked for
    compatibility with the configured mode/channels/extractor.
    """
    lr = require_image(lr, 3, "lr")
    ref = require_image(ref, 3, "ref")
    h, w = lr.shape[0] * cfg.scale, lr.shape[1] * cfg.scale
    if h % 4 or w % 4:
        raise ValueError(f"x{cfg.scale} output {h}x{w} must divide by 4 for the pyramid")
    if params is None:
        tparams, aparams = _load_pipeline_params(cfg)
    else:
        tparams, aparams = params

    if cfg.def_enabled:
        i_de = enhance(lr, cfg)
    else:
        i_de = bicubic_resize(lr, h, w)

    ext = build_extractor(cfg.extractor_seed, cfg.channels)
    de_pyr = extract_pyramid(np.clip(i_de, 0.0, 1.0), ext)
    ref_pyr = extract_pyramid(ref, ext)
    cmap = build_correspondence(de_pyr, ref_pyr)
    levels = build_level_inputs(de_pyr, ref_pyr, cmap)
    return forward_sr(tparams, aparams, cfg.mode, levels, i_de, clamp=True)


# ---- ablation harness ----

ABLATION_VARIANTS = (
    ("Base", False, False),
    ("Base+DEF", False, True),
    ("Base+DCN", True, False),
    ("Base+DCN+DEF", True, True),
)  # (name, dcn_enabled, def_enabled)


def run_ablation(
    pairs,
    seeds: int = 5,
    epochs: int = 3,
    lr0: float = 2e-4,
    lr_decay: float = 0.6,
    adam_eps: float = 1e-8,
    steps: int = 8,
    sigma0: float = 1e-4,
    extractor_seed: int = 0,
    channels=(16, 32, 64),
    val_count: int = 9,
    base_seed: int = 0,
    log=None,
):
    """Train and score the four pipeline configurations.

    The corpus, its bicubic enhancements, and its diffusion enhancements
    are shared across all seeds and variants, so the only moving pieces
    are the transfer mode and which enhanced input feeds the features.
    Adversarial loss stays off: the score is mean corpus Y-PSNR, which
    an adversarial term does not target.  Returns one result dict per
    variant, in table order.
    """
    say = log or (lambda msg: None)
    ext = build_extractor(extractor_seed, channels)
    h, w = pairs[0].hr.shape[:2]
    op = build_downsampler("bicubic", 4, (h, w))
    schedule = build_schedule()
    bic, de = [], []
    for i, pair in enumerate(pairs):
        mu = bicubic_resize(pair.lr, h, w)
        bic.append(mu)
        sampler = SamplerConfig(
            schedule=schedule, steps_used=steps, seed=derive_seed(base_seed, "de", i)
        )
        out = sample(pair.lr, op, GaussianPriorDenoiser(mu, sigma0), sampler, clamp=False)
        de.append(np.clip(out, 0.0, 1.0))
    say(f"enhanced {len(pairs)} inputs (gaussian prior, {steps} steps)")
    prep_bic = prepare_pairs(pairs, ext, de_images=bic)
    prep_def = prepare_pairs(pairs, ext, de_images=de)
    say("correspondence fields cached for both enhancement routes")

    import torch

    from ._torchutil import param_tensors

    ext_t = param_tensors(ext.params, torch.float32)
    ref_cache = feature_cache([p.ref for p in pairs], ext_t, torch.float32)
    de_caches = {
        False: feature_cache([pp.de for pp in prep_bic], ext_t, torch.float32),
        True: feature_cache([pp.de for pp in prep_def], ext_t, torch.float32),
    }
    say("feature pyramids cached for both enhancement routes")

    results = []
    with tempfile.TemporaryDirectory() as tmp:
        for name, dcn, deff in ABLATION_VARIANTS:
            prep = prep_def if deff else prep_bic
            cache = (de_caches[deff], ref_cache)
            scores = []
            for seed in range(seeds):
                tcfg = TrainConfig(
                    epochs=epochs,
                    seed=seed,
                    lr=lr0,
                    lr_decay=lr_decay,
                    adam_eps=adam_eps,
                    precision="single",
                    mode="deform" if dcn else "plain",
                    channels=channels,
                    extractor_seed=extractor_seed,
                    loss=LossConfig(adv_enabled=False),
                    val_count=val_count,
                )
                ckpt = Path(tmp) / f"{name.replace('+', '_')}_{seed}.def1"
                params, _ = train(pairs, tcfg, ckpt, prepared=prep, cache=cache)
                tparams, aparams, _ = split_params(params)
                scores.append(evaluate_corpus(pairs, prep, tparams, aparams, tcfg, cache=cache))
                say(f"{name} seed {seed}: {scores[-1]:.3f} dB")
            results.append(
                {"variant": name, "psnr": list(scores), "mean": float(np.mean(scores))}
            )
    return results


def write_ablation_report(results, path) -> None:
    """CSV with one row per variant: per-seed PSNRs and their mean."""
    n_seeds = len(results[0]["psnr"])
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["variant"] + [f"psnr_seed{i}" for i in range(n_seeds)] + ["mean_psnr"])
        for row in results:
            out.writerow(
                [row["variant"]]
                + [f"{v:.6f}" for v in row["psnr"]]
                + [f"{row['mean']:.6f}"]
            )


# ---- subcommands ----

def _pipeline_config_from_args(args) -> PipelineConfig:
    return PipelineConfig(
        denoiser=args.denoiser,
        steps=args.steps,
        tile=args.tile,
        ckpt=getattr(args, "ckpt", None),
        def_enabled=not getattr(args, "no_def", False),
        dcn_enabled=not getattr(args, "no_dcn", False),
        seed=args.seed,
    )


def cmd_enhance(args) -> int:
    lr = load_image(args.inp)
    cfg = PipelineConfig(denoiser=args.denoiser, steps=args.steps, tile=args.tile, seed=args.seed)
    save_image(args.out, enhance(lr, cfg))
    print(f"wrote {args.out}")
    return 0


def cmd_srun(args) -> int:
    lr = load_image(args.lr)
    ref = load_image(args.ref)
    sr = run_pipeline(lr, ref, _pipeline_config_from_args(args))
    save_image(args.out, sr)
    print(f"wrote {args.out}")
    return 0


def _discover_triplets(pairs_dir: Path):
    ids = sorted(p.name[: -len("_lr.png")] for p in pairs_dir.glob("*_lr.png"))
    if not ids:
        raise FileNotFoundError(f"no *_lr.png files under {pairs_dir}")
    triplets = []
    for image_id in ids:
        paths = {s: pairs_dir / f"{image_id}_{s}.png" for s in ("lr", "ref", "hr")}
        missing = [str(p) for p in paths.values() if not p.exists()]
        if missing:
            raise FileNotFoundError(f"incomplete triplet {image_id!r}: missing {missing}")
        triplets.append((image_id, paths))
    return triplets


def cmd_eval(args) -> int:
    from .figures import save_metric_distribution

    cfg = _pipeline_config_from_args(args)
    rows = []
    for image_id, paths in _discover_triplets(Path(args.pairs)):
        sr = run_pipeline(load_image(paths["lr"]), load_image(paths["ref"]), cfg)
        hr = load_image(paths["hr"])
        rows.append((image_id, psnr_y(sr, hr), ssim_y(sr, hr)))
        print(f"{image_id}: psnr {rows[-1][1]:.3f} dB, ssim {rows[-1][2]:.4f}")
    write_report(rows, args.report)
    fig_path = Path(args.report).with_suffix(".png")
    save_metric_distribution(rows, fig_path)
    print(f"wrote {args.report} and {fig_path}")
    return 0


def cmd_train(args) -> int:
    from .figures import save_training_curves

    cfg = parse_config(args.corpus)
    pairs = make_corpus(corpus_spec_from_config(cfg))
    tcfg = train_config_from_config(cfg)
    out = Path(args.out)
    log_path = out.with_suffix(".log.csv")
    _, rows = train(pairs, tcfg, out, log_path=log_path)
    for row in rows:
        print(
            f"epoch {row['epoch']}: total {row['total']:.5f}, "
            f"val psnr {row['psnr']:.3f} dB"
        )
    if rows:
        fig_path = out.with_suffix(".curves.png")
        save_training_curves(rows, fig_path)
        print(f"wrote {out}, {log_path}, and {fig_path}")
    else:
        print(f"wrote {out} (no epochs trained)")
    return 0


def cmd_ablate(args) -> int:
    from .figures import save_ablation_chart

    cfg = parse_config(args.corpus)
    pairs = make_corpus(corpus_spec_from_config(cfg))
    results = run_ablation(
        pairs,
        seeds=_get(cfg, "ablate_seeds", int, 5),
        epochs=_get(cfg, "ablate_epochs", int, 3),
        lr0=_get(cfg, "ablate_lr", float, 2e-4),
        lr_decay=_get(cfg, "ablate_lr_decay", float, 0.6),
        adam_eps=_get(cfg, "ablate_adam_eps", float, 1e-8),
        steps=_get(cfg, "ablate_steps", int, 8),
        sigma0=_get(cfg, "ablate_sigma0", float, 1e-4),
        extractor_seed=_get(cfg, "extractor_seed", int, 0),
        channels=_get(cfg, "channels", _as_channels, (16, 32, 64)),
        val_count=_get(cfg, "val_count", int, 9),
        base_seed=_get(cfg, "seed", int, 0),
        log=print,
    )
    write_ablation_report(results, args.report)
    fig_path = Path(args.report).with_suffix(".png")
    save_ablation_chart([(r["variant"], r["mean"]) for r in results], fig_path)
    print(f"wrote {args.report} and {fig_path}")
    return 0


def cmd_gen_corpus(args) -> int:
    spec = corpus_spec_from_config(parse_config(args.spec))
    pairs = make_corpus(spec)
    write_corpus(pairs, args.out)
    print(f"wrote {len(pairs)} triplets to {args.out}")
    return 0


def _add_pipeline_flags(sub, with_ckpt: bool):
    sub.add_argument("--denoiser", default="gaussian:0.0001",
                     help="zero | gaussian[:SIGMA] | oracle:PATH | learned:PATH")
    sub.add_argument("--steps", type=int, default=50, help="sampler steps")
    sub.add_argument("--tile", type=int, default=64, help="tile size on the x4 canvas; 0 = no tiling")
    sub.add_argument("--seed", type=int, default=0)
    if with_ckpt:
        sub.add_argument("--ckpt", required=True, help="DEF1 checkpoint path")
        sub.add_argument("--no-def", action="store_true",
                         help="replace diffusion enhancement with bicubic upsampling")
        sub.add_argument("--no-dcn", action="store_true",
                         help="replace deformable transfer with plain convolution transfer")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="defsr",
        description="Reference-based x4 super-resolution with guided diffusion enhancement.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("enhance", help="run only the detail-generation stage")
    p.add_argument("--in", dest="inp", required=True, help="low-resolution input image")
    p.add_argument("--out", required=True, help="enhanced x4 output image")
    _add_pipeline_flags(p, with_ckpt=False)
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("srun", help="full pipeline: LR + reference -> SR")
    p.add_argument("--lr", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out", required=True)
    _add_pipeline_flags(p, with_ckpt=True)
    p.set_defaults(func=cmd_srun)

    p = sub.add_parser("eval", help="metrics over a triplet directory")
    p.add_argument("--pairs", required=True, help="directory of <id>_lr/_ref/_hr.png triplets")
    p.add_argument("--report", required=True, help="output CSV; figure lands next to it")
    _add_pipeline_flags(p, with_ckpt=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("train", help="training harness")
    p.add_argument("--corpus", required=True, help="key = value corpus/training config file")
    p.add_argument("--out", required=True, help="output DEF1 checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="four-configuration ablation study")
    p.add_argument("--corpus", required=True, help="key = value corpus/ablation config file")
    p.add_argument("--report", required=True, help="output CSV; figure lands next to it")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gen-corpus", help="write a synthetic corpus to a directory")
    p.add_argument("--spec", required=True, help="key = value corpus config file")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_corpus)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, ImageIOError, CheckpointError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
