"""Command-line entry point.

Subcommands: ``preprocess``, ``train``, ``sample``, ``evaluate``,
``mask-view``, ``ablate-guidance``. Every command resolves its
configuration up front, takes a lockfile on its output directory, and
serializes the resolved config + version stamp next to its outputs; a
directory containing ``INCOMPLETE`` marks a failed or interrupted run.

Exit codes: 0 ok, 2 usage/config, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import __version__
from .config import RunConfig
from .denoiser import SemanticUNet
from .diffusion import Diffusion
from .errors import ConfigError, DataError, HistodiffError, NumericError
from .manifest import build_manifest, read_manifest, write_manifest, write_patches
from .masks import encode, render_channels
from .metrics import FeatureExtractor, evaluate_sets
from .patching import extract_patches, split_region
from .regions import RegionStore
from .stain import estimate_stain_profile, normalize_to_target, write_profiles
from .training import PatchDataset, build_from_checkpoint, load_checkpoint, run_phase

logger = logging.getLogger("histodiff")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


@contextmanager
def output_dir(path: Path, config_text: str):
    """Claim an output directory: lockfile, INCOMPLETE marker, config stamp."""
    path.mkdir(parents=True, exist_ok=True)
    lock = path / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise DataError(
            f"output directory {path} is locked by another run (remove {lock} if stale)"
        ) from None
    os.write(fd, f"pid={os.getpid()}\n".encode())
    os.close(fd)
    marker = path / "INCOMPLETE"
    marker.write_text("run in progress or failed\n")
    (path / "run_config.txt").write_text(config_text)
    (path / "VERSION").write_text(f"histodiff {__version__}\n")
    try:
        yield path
        marker.unlink()
    finally:
        lock.unlink(missing_ok=True)


def _args_text(args: argparse.Namespace, keys: list[str]) -> str:
    lines = [f"# histodiff {__version__}", f"command = {args.command}"]
    for k in keys:
        lines.append(f"{k} = {getattr(args, k)}")
    return "\n".join(lines) + "\n"


def _load_mask_files(masks_dir: Path) -> list[tuple[str, np.ndarray, np.ndarray]]:
    """Load (id, class_map, inst_map) from a directory of *_labels.npz files."""
    files = sorted(masks_dir.rglob("*_labels.npz"))
    if not files:
        raise DataError(f"no *_labels.npz mask files under {masks_dir}")
    out = []
    for f in files:
        with np.load(f) as z:
            out.append((f.name[: -len("_labels.npz")], z["class_map"], z["inst_map"]))
    return out


def _load_png_images(directory: Path, size: int | None = None) -> np.ndarray:
    files = sorted(directory.rglob("*.png"))
    if not files:
        raise DataError(f"no .png images under {directory}")
    images = []
    for f in files:
        img = Image.open(f).convert("RGB")
        if size is not None and img.size != (size, size):
            img = img.resize((size, size), Image.BILINEAR)
        images.append(np.asarray(img))
    return np.stack(images)


def _image_grid(images: np.ndarray, columns: int = 4, pad: int = 2) -> np.ndarray:
    n, h, w, _ = images.shape
    rows = (n + columns - 1) // columns
    canvas = np.full((rows * (h + pad) - pad, columns * (w + pad) - pad, 3), 255, dtype=np.uint8)
    for i, img in enumerate(images):
        r, c = divmod(i, columns)
        canvas[r * (h + pad) : r * (h + pad) + h, c * (w + pad) : c * (w + pad) + w] = img
    return canvas


def _make_extractor(spec: str, device: str = "cpu") -> FeatureExtractor:
    return FeatureExtractor(weights=spec, device=device)


# ---------------------------------------------------------------- preprocess


def cmd_preprocess(args: argparse.Namespace) -> int:
    run_config = RunConfig.resolve(
        preset=args.preset, config_file=args.config, overrides={"seed": args.seed}
    )
    store = RegionStore.open(args.regions)  # validate inputs before any output
    magnifications = ["20x", "10x"] if args.magnification == "both" else [args.magnification]
    target_id = args.stain_target or store.source_ids[0]
    if target_id not in store.source_ids:
        raise DataError(f"stain target {target_id!r} not among regions {store.source_ids}")

    out = Path(args.out)
    extra = _args_text(args, ["regions", "test_fraction", "magnification", "overlap", "stain_target"])
    with output_dir(out, run_config.serialize() + extra):
        logger.info("estimating stain profiles for %d regions (target %s)", len(store.source_ids), target_id)
        profiles = {}
        for sid in store.source_ids:
            region = store.load(sid)
            profiles[sid] = estimate_stain_profile(region.image)
            logger.info("profile %s: scale=%s", sid, np.round(profiles[sid].concentration_scale, 3))
        write_profiles(profiles, out / "stain_profiles.txt")

        all_patches = []
        for sid in store.source_ids:
            region = store.load(sid)
            region.image = normalize_to_target(region.image, profiles[sid], profiles[target_id])
            train_zone, test_zone = split_region(region, args.test_fraction, rng_seed=run_config.seed)
            for mag in magnifications:
                for zone, split in ((train_zone, "train"), (test_zone, "test")):
                    all_patches.extend(
                        extract_patches(region, zone, mag, overlap=args.overlap, split=split)
                    )
            logger.info("region %s: %d patches so far", sid, len(all_patches))

        manifest = build_manifest(
            all_patches,
            header={
                "stain_target": target_id,
                "test_fraction": str(args.test_fraction),
                "overlap": str(args.overlap),
                "seed": str(run_config.seed),
                "normalization": "region-level, before patching",
            },
        )
        write_patches(all_patches, out)
        write_manifest(manifest, out / "manifest.tsv")
        for (split, mag), n in sorted(manifest.counts.items()):
            logger.info("wrote %d %s/%s patches", n, split, mag)
    return EXIT_OK


# --------------------------------------------------------------------- train


def cmd_train(args: argparse.Namespace) -> int:
    run_config = RunConfig.resolve(
        preset=args.preset, config_file=args.config, overrides=_train_overrides(args)
    )
    manifest_path = Path(args.manifest)
    manifest = read_manifest(manifest_path)
    dataset = PatchDataset.from_manifest(
        manifest,
        manifest_path.parent,
        split="train",
        magnification=args.magnification,
        image_size=run_config.image_size,
    )
    out = Path(args.out)
    extra = _args_text(args, ["manifest", "phase", "magnification", "resume", "steps"])
    with output_dir(out, run_config.serialize() + extra):
        model = SemanticUNet(run_config.denoiser_config())
        _reinit(model, run_config.seed)
        result = run_phase(
            dataset,
            model,
            run_config.denoiser_config(),
            run_config.schedule(),
            run_config.train_config(),
            phase=args.phase,
            out_dir=out,
            resume=args.resume,
            steps_override=args.steps,
        )
        logger.info("finished at step %d; checkpoint %s", result.final_step, result.checkpoint_path)
    return EXIT_OK


def _reinit(model: torch.nn.Module, seed: int) -> None:
    """Deterministic parameter init regardless of construction-time RNG use."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        for module in model.modules():
            if hasattr(module, "reset_parameters"):
                module.reset_parameters()


def _train_overrides(args: argparse.Namespace) -> dict[str, object]:
    mapping = {
        "train.batch_size": args.batch_size,
        "train.lr_main": args.lr_main,
        "train.lr_finetune": args.lr_finetune,
        "train.ema_decay": args.ema_decay,
        "train.lambda_vlb": args.lambda_vlb,
        "train.cond_drop_rate_main": args.drop_rate_main,
        "train.cond_drop_rate_finetune": args.drop_rate_finetune,
        "train.device": args.device,
        "seed": args.seed,
    }
    return {k: v for k, v in mapping.items() if v is not None}


# -------------------------------------------------------------------- sample


def cmd_sample(args: argparse.Namespace) -> int:
    payload = load_checkpoint(args.checkpoint)
    masks = _load_mask_files(Path(args.masks))
    if args.limit:
        masks = masks[: args.limit]
    model, diffusion = build_from_checkpoint(payload, use_ema=not args.raw_weights)
    out = Path(args.out)
    extra = _args_text(args, ["checkpoint", "masks", "guidance_scale", "seed", "raw_weights"])
    with output_dir(out, extra):
        rows = _sample_mask_set(model, diffusion, masks, args.guidance_scale, args.seed, out)
        meta = out / "samples.tsv"
        meta.write_text(
            "sample\tmask_id\tseed\tguidance_scale\n"
            + "".join(f"{r[0]}\t{r[1]}\t{r[2]}\t{args.guidance_scale}\n" for r in rows)
        )
        logger.info("wrote %d samples to %s", len(rows), out)
    return EXIT_OK


def _sample_mask_set(
    model: SemanticUNet,
    diffusion: Diffusion,
    masks: list[tuple[str, np.ndarray, np.ndarray]],
    scale: float,
    seed: int,
    out: Path,
) -> list[tuple[str, str, int]]:
    """One sample per mask on a fixed seed ladder (seed + mask index), so
    results do not depend on how masks are grouped into batches."""
    rows = []
    for i, (mask_id, class_map, inst_map) in enumerate(masks):
        layout = torch.from_numpy(encode(class_map, inst_map).layout)[None]
        img = diffusion.sample(model, layout, s_guidance=scale, rng_seed=seed + i)
        name = f"sample_{i:05d}_{mask_id}.png"
        Image.fromarray(img[0]).save(out / name, format="PNG")
        rows.append((name, mask_id, seed + i))
        if (i + 1) % 8 == 0 or i + 1 == len(masks):
            logger.info("sampled %d/%d masks", i + 1, len(masks))
    return rows


# ------------------------------------------------------------------ evaluate


def cmd_evaluate(args: argparse.Namespace) -> int:
    extractor = _make_extractor(args.features)
    real = _load_png_images(Path(args.real))
    fake = _load_png_images(Path(args.fake))
    real_set = extractor(real, source="real")
    fake_set = extractor(fake, source="synthetic")
    report = evaluate_sets(real_set, fake_set, splits=args.splits, config_hash=extractor.config_hash)
    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    text = (
        f"FID {report.fid:.4f} | IS {report.is_mean:.4f} +/- {report.is_std:.4f} "
        f"(n_real={report.n_real}, n_synthetic={report.n_synthetic}, config={report.config_hash})"
    )
    print(text)
    logger.info("%s -> %s", text, report_path)
    return EXIT_OK


# ----------------------------------------------------------------- mask-view


def cmd_mask_view(args: argparse.Namespace) -> int:
    store = Path(args.store)
    matches = sorted(store.rglob(f"{args.patch}_labels.npz"))
    if not matches:
        raise DataError(f"no labels file for patch {args.patch!r} under {store}")
    with np.load(matches[0]) as z:
        tensor = encode(z["class_map"], z["inst_map"])
    strip = render_channels(tensor)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(strip).save(out, format="PNG")
    print(f"wrote {out} (channels 0-6 one-hot, channel 7 instance edges)")
    return EXIT_OK


# ----------------------------------------------------------- ablate-guidance


def cmd_ablate_guidance(args: argparse.Namespace) -> int:
    scales = [float(s) for s in args.scales.split(",") if s.strip() != ""]
    if not scales:
        raise ConfigError("--scales must list at least one value")
    payload = load_checkpoint(args.checkpoint)
    masks = _load_mask_files(Path(args.masks))
    if args.limit:
        masks = masks[: args.limit]
    if not masks:
        raise DataError("empty mask set")
    model, diffusion = build_from_checkpoint(payload)
    extractor = _make_extractor(args.features)
    real = _load_png_images(Path(args.real))
    real_set = extractor(real, source="real")

    out = Path(args.out)
    extra = _args_text(args, ["checkpoint", "masks", "real", "scales", "seed", "features"])
    with output_dir(out, extra):
        table = []
        for scale in scales:
            scale_dir = out / f"scale_{scale:g}"
            scale_dir.mkdir(parents=True, exist_ok=True)
            _sample_mask_set(model, diffusion, masks, scale, args.seed, scale_dir)
            images = _load_png_images(scale_dir)
            grid = _image_grid(images[: args.grid_size])
            Image.fromarray(grid).save(out / f"grid_scale_{scale:g}.png", format="PNG")
            fake_set = extractor(images, source=f"synthetic@s={scale:g}")
            report = evaluate_sets(
                real_set, fake_set, splits=args.splits, config_hash=extractor.config_hash
            )
            table.append((scale, report))
            logger.info("scale %.2f: FID %.4f IS %.4f", scale, report.fid, report.is_mean)
        lines = ["guidance_scale\tfid\tis_mean\tis_std\tn_real\tn_synthetic\tconfig"]
        for scale, rep in table:
            lines.append(
                f"{scale:g}\t{rep.fid:.6f}\t{rep.is_mean:.6f}\t{rep.is_std:.6f}"
                f"\t{rep.n_real}\t{rep.n_synthetic}\t{rep.config_hash}"
            )
        (out / "ablation.tsv").write_text("\n".join(lines) + "\n")
        (out / "ablation.json").write_text(
            json.dumps([{"guidance_scale": s, **r.to_dict()} for s, r in table], indent=2) + "\n"
        )
        print((out / "ablation.tsv").read_text(), end="")
    return EXIT_OK


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="histodiff",
        description="nuclei-aware semantic diffusion toolkit",
    )
    parser.add_argument("--version", action="version", version=f"histodiff {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="split regions, normalize stain, extract patches")
    p.add_argument("--regions", required=True, help="directory of region .npz files")
    p.add_argument("--out", required=True)
    p.add_argument("--test-fraction", type=float, default=0.075)
    p.add_argument("--magnification", choices=["20x", "10x", "both"], default="20x")
    p.add_argument("--overlap", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--stain-target", default=None, help="source_id of the stain target region")
    p.add_argument("--preset", choices=["paper", "tiny"], default=None)
    p.add_argument("--config", default=None, help="key = value config file")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train the denoiser (main or finetune phase)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--phase", choices=["main", "finetune"], default="main")
    p.add_argument("--resume", default=None, help="checkpoint to resume / finetune from")
    p.add_argument("--magnification", choices=["20x", "10x"], default="20x")
    p.add_argument("--preset", choices=["paper", "tiny"], default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--steps", type=int, default=None, help="override phase step count")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr-main", type=float, default=None)
    p.add_argument("--lr-finetune", type=float, default=None)
    p.add_argument("--ema-decay", type=float, default=None)
    p.add_argument("--lambda-vlb", type=float, default=None)
    p.add_argument("--drop-rate-main", type=float, default=None)
    p.add_argument("--drop-rate-finetune", type=float, default=None)
    p.add_argument("--device", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="sample images from semantic masks")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--masks", required=True, help="directory of *_labels.npz mask files")
    p.add_argument("--guidance-scale", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--limit", type=int, default=None, help="sample only the first N masks")
    p.add_argument("--raw-weights", action="store_true", help="use raw instead of EMA weights")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("evaluate", help="FID / inception score between two image sets")
    p.add_argument("--real", required=True)
    p.add_argument("--fake", required=True)
    p.add_argument("--report", required=True, help="path for the JSON report")
    p.add_argument("--splits", type=int, default=10)
    p.add_argument(
        "--features",
        default="torchvision",
        help="'torchvision', a weights path, or 'random' (plumbing tests only)",
    )
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("mask-view", help="render a patch's conditioning channels to a PNG")
    p.add_argument("--store", required=True, help="patch store root (manifest directory)")
    p.add_argument("--patch", required=True, help="patch id")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mask_view)

    p = sub.add_parser("ablate-guidance", help="sweep guidance scales; table + grids + FID/IS")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--masks", required=True)
    p.add_argument("--real", required=True, help="directory of real images for FID")
    p.add_argument("--scales", required=True, help="comma-separated guidance scales")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--splits", type=int, default=2)
    p.add_argument("--grid-size", type=int, default=8)
    p.add_argument("--features", default="torchvision")
    p.set_defaults(func=cmd_ablate_guidance)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"histodiff: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"histodiff: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"histodiff: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except HistodiffError as exc:
        print(f"histodiff: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    raise SystemExit(main())
