"""Command-line surface: train, generate, interpolate, evaluate, count-params, inspect.

Every command is non-interactive and exits 0 on success. Failures are
reported on stderr with a category prefix and a nonzero exit code: 2 for
usage problems (also used by argparse itself), 1 for runtime failures.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from . import artifacts, data, metrics
from .config import TrainConfig, parse_config, render_config
from .errors import CheckpointError, ConfigError, TrainingDiverged
from .networks import (
    Discriminator,
    Generator,
    LATENT_DIM,
    count_parameters,
    interpolate_latents,
)
from .training import Trainer, config_from_meta, run_training

SAMPLE_PANEL_SIZE = 16


class UsageError(Exception):
    pass


def sample_latents(seed: int, n: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((n, LATENT_DIM)).astype(np.float32)


def load_generator(checkpoint_path):
    tensors, meta = artifacts.load_checkpoint(checkpoint_path)
    config = config_from_meta(meta)
    trainer = Trainer(config)
    trainer.restore(tensors, meta)
    return trainer.G, config, meta


def _resolve_extractor(spec_text: str):
    if spec_text == "toy":
        return metrics.PatchStatsExtractor()
    if spec_text.startswith("plugin:"):
        plugin_path = Path(spec_text[len("plugin:"):])
        if not plugin_path.exists():
            raise UsageError(f"extractor plugin not found: {plugin_path}")
        namespace = {}
        exec(compile(plugin_path.read_text(), str(plugin_path), "exec"), namespace)
        factory = namespace.get("build_extractor")
        if factory is None:
            raise UsageError(
                f"plugin {plugin_path} must define build_extractor() returning a FeatureExtractor"
            )
        return factory()
    raise UsageError(f"unknown extractor {spec_text!r} (use 'toy' or 'plugin:<file.py>')")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.batch_size is not None:
        overrides["batch_size"] = args.batch_size
    if args.no_spectral_norm:
        overrides["sn_enabled"] = False
    if args.generator_mode is not None:
        overrides["generator_mode"] = args.generator_mode
    if args.data_fraction is not None:
        overrides["data_fraction"] = args.data_fraction
    if args.val_noise_count is not None:
        overrides["val_noise_count"] = args.val_noise_count
    if args.config:
        base = parse_config(Path(args.config).read_text())
        config = TrainConfig(**{**base.__dict__, **overrides})
    else:
        config = TrainConfig(**overrides)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(render_config(config))

    split = data.load_dataset(args.data_dir, args.val_dir)
    split = data.subset_fraction(split, config.data_fraction, config.seed)
    print(f"training on {len(split.train)} images "
          f"({config.data_fraction}% fraction), {len(split.val)} validation images")
    train_tensor = data.prepare_training_tensor(split.train, size=64)

    panel = sample_latents(np.random.default_rng([config.seed, 3]).integers(2**31), SAMPLE_PANEL_SIZE)
    csv_writer = artifacts.LossCsvWriter(out_dir / "loss.csv")

    def on_epoch(epoch, trainer, val_loss):
        csv_writer.flush()
        images = trainer.G.forward(panel, training=False)
        cols = int(math.ceil(math.sqrt(SAMPLE_PANEL_SIZE)))
        artifacts.write_sample_grid(images, cols, out_dir / f"samples_epoch{epoch:03d}.png")
        if trainer.best_epoch == epoch:
            artifacts.save_checkpoint(
                trainer.state_tensors(),
                {**trainer.state_meta(), "val_loss": repr(val_loss)},
                out_dir / "best.ckpt",
            )
        print(f"epoch {epoch}: validation generator loss {val_loss:.6f}"
              + (" (new best)" if trainer.best_epoch == epoch else ""))

    try:
        result = run_training(
            config, train_tensor,
            step_callback=csv_writer.append,
            epoch_callback=on_epoch,
        )
    except TrainingDiverged as exc:
        partial = getattr(exc, "partial", None)
        if partial is not None:
            artifacts.save_checkpoint(
                partial.trainer.state_tensors(), partial.trainer.state_meta(),
                out_dir / "final.ckpt",
            )
        csv_writer.close()
        raise
    finally:
        csv_writer.close()

    artifacts.save_checkpoint(
        result.trainer.state_tensors(), result.trainer.state_meta(),
        out_dir / "final.ckpt",
    )
    print(f"done: best validation loss {result.best_val:.6f} at epoch {result.best_epoch}; "
          f"artifacts in {out_dir}")
    return 0


def cmd_generate(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    G, _, _ = load_generator(args.checkpoint)
    z = sample_latents(args.seed, args.n)
    images = G.forward(z, training=False)
    cols = args.cols or int(math.ceil(math.sqrt(args.n)))
    artifacts.write_sample_grid(images, cols, args.out)
    print(f"wrote {args.n} samples to {args.out}")
    return 0


def cmd_interpolate(args) -> int:
    if args.steps < 2:
        raise UsageError("--steps must be >= 2")
    G, _, _ = load_generator(args.checkpoint)
    z1 = sample_latents(args.seed_a, 1)[0]
    z2 = sample_latents(args.seed_b, 1)[0]
    path = interpolate_latents(z1, z2, args.steps)
    images = G.forward(path, training=False)
    artifacts.write_sample_grid(images, args.steps, args.out)
    print(f"wrote {args.steps} interpolation frames to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    if (args.fake_dir is None) == (args.checkpoint is None):
        raise UsageError("provide exactly one of --fake-dir or --checkpoint")
    extractor = _resolve_extractor(args.extractor)
    requested = [m.strip().replace("-", "_") for m in args.metrics.split(",") if m.strip()]
    unknown = set(requested) - {"fid", "clean_fid", "kid"}
    if unknown:
        raise UsageError(f"unknown metrics: {sorted(unknown)}")

    if args.fake_dir is not None:
        fake_source = args.fake_dir
        n_fake_label = None
    else:
        G, _, _ = load_generator(args.checkpoint)
        if args.n_samples < 2:
            raise UsageError("--n-samples must be >= 2")
        z = sample_latents(args.seed, args.n_samples)
        fake_source = list(data.denormalize_to_uint8(G.forward(z, training=False)))
        n_fake_label = args.n_samples

    naive_metrics = tuple(m for m in requested if m == "fid")
    clean_metrics = tuple(m for m in requested if m in ("clean_fid", "kid"))
    report = metrics.MetricReport(
        extractor_name=extractor.name, resize_mode="", n_real=0, n_fake=0)
    modes = []
    if naive_metrics:
        r = metrics.evaluate(args.real_dir, fake_source, extractor,
                             resize_mode="naive_bilinear", metrics=naive_metrics)
        report.fid, report.n_real, report.n_fake = r.fid, r.n_real, r.n_fake
        modes.append("fid=naive_bilinear")
    if clean_metrics:
        r = metrics.evaluate(args.real_dir, fake_source, extractor,
                             resize_mode="clean_antialiased", metrics=clean_metrics)
        report.clean_fid, report.kid = r.clean_fid, r.kid
        report.n_real, report.n_fake = r.n_real, r.n_fake
        modes.append(",".join(clean_metrics) + "=clean_antialiased")
    if n_fake_label is not None:
        report.n_fake = n_fake_label
    report.resize_mode = ";".join(modes)

    line = report.as_record()
    print(line)
    if args.out:
        Path(args.out).write_text(line + "\n")
    if args.append_csv:
        path = Path(args.append_csv)
        new = not path.exists()
        with open(path, "a") as fh:
            if new:
                fh.write("extractor,resize_mode,n_real,n_fake,fid,clean_fid,kid\n")
            fh.write(",".join([
                report.extractor_name, report.resize_mode.replace(",", "+"),
                str(report.n_real), str(report.n_fake),
                *(("" if getattr(report, k) is None else f"{getattr(report, k):.10g}")
                  for k in ("fid", "clean_fid", "kid")),
            ]) + "\n")
    return 0


def cmd_count_params(args) -> int:
    if args.arch == "ours":
        gen = Generator("adain")
        disc = Discriminator(sn_enabled=True)
    else:  # dcgan-control: mapping, style injection and SN all disabled
        gen = Generator("none")
        disc = Discriminator(sn_enabled=False)
    g = count_parameters(gen)
    d = count_parameters(disc)
    if gen.mapping is not None:
        print(f"mapping-network: {count_parameters(gen.mapping):,}")
    print(f"generator: {g:,}")
    print(f"discriminator: {d:,}")
    print(f"total: {g + d:,} ({(g + d) / 1e6:.3f} M)")
    return 0


def cmd_inspect(args) -> int:
    tensors, meta = artifacts.load_checkpoint(args.checkpoint)
    print(f"checkpoint: {args.checkpoint}")
    for key in sorted(meta):
        if key != "rng_state":
            print(f"  {key} = {meta[key]}")
    total = sum(t.size for t in tensors.values())
    print(f"  tensors: {len(tensors)} ({total:,} float32 values)")
    if args.verbose:
        for name in sorted(tensors):
            print(f"    {name} {tensors[name].shape}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ssdgan",
        description="Train and evaluate the spectral style-DCGAN toolkit.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run adversarial training")
    p.add_argument("--config", help="key=value config file; flags override it")
    p.add_argument("--data-dir", required=True, help="training image directory")
    p.add_argument("--val-dir", required=True, help="validation image directory")
    p.add_argument("--out-dir", required=True, help="artifact output directory")
    p.add_argument("--seed", type=int, help="run seed (default 0)")
    p.add_argument("--epochs", type=int, help="training epochs (default 20)")
    p.add_argument("--batch-size", type=int, help="batch size (default 32)")
    p.add_argument("--no-spectral-norm", action="store_true",
                   help="disable discriminator spectral normalization (ablation)")
    p.add_argument("--generator-mode", choices=["adain", "mapping_only"],
                   help="style injection mode (default adain)")
    p.add_argument("--data-fraction", type=int, choices=[25, 50, 75, 100],
                   help="train on a seeded K%% subset (default 100)")
    p.add_argument("--val-noise-count", type=int,
                   help="size of the fixed validation noise panel (default 500)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="sample images from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cols", type=int, help="grid columns (default ceil(sqrt(n)))")
    p.add_argument("--out", required=True, help="output PNG path")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("interpolate", help="latent-space linear interpolation strip")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seed-a", type=int, required=True)
    p.add_argument("--seed-b", type=int, required=True)
    p.add_argument("--steps", type=int, default=4)
    p.add_argument("--out", required=True, help="output PNG path")
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("evaluate", help="compute FID / clean-FID / KID")
    p.add_argument("--real-dir", required=True)
    p.add_argument("--fake-dir")
    p.add_argument("--checkpoint")
    p.add_argument("--n-samples", type=int, default=64,
                   help="samples to draw when scoring a checkpoint")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--extractor", default="toy", help="'toy' or 'plugin:<file.py>'")
    p.add_argument("--metrics", default="fid,clean-fid,kid",
                   help="comma list from fid, clean-fid, kid")
    p.add_argument("--out", help="write the report record to this file")
    p.add_argument("--append-csv", help="append the report to a results CSV")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("count-params", help="print learnable parameter counts")
    p.add_argument("--arch", choices=["ours", "dcgan-control"], default="ours")
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("inspect", help="print checkpoint metadata")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--verbose", action="store_true", help="list every tensor")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return 1
    except TrainingDiverged as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
