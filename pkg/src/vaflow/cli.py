"""Command line: dataset generation, training, sampling, analysis, self-checks.

Every command takes ``--config <ini>`` plus ``--set section.key=value``
overrides (and mirrored ``--section.key value`` flags); all randomness comes
from ``run.seed``; each run writes a JSON manifest (effective config plus
content hashes of its inputs) next to its outputs.  Errors exit nonzero with
a single parsable line on stderr.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys

import numpy as np

from . import __version__, data, diagnostics
from .config import SCHEMA, ConfigError, RunConfig, write_manifest
from .estimators import LatentFlow, VaeTokenizer


def _add_config_flags(parser):
    parser.add_argument("--config", help="INI config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="SECTION.KEY=VALUE", help="override one config value")
    for section, fields in SCHEMA.items():
        for key in fields:
            parser.add_argument(f"--{section}.{key}", dest=f"flag::{section}.{key}",
                                metavar="V", help=argparse.SUPPRESS)


def _build_config(args):
    overrides = {}
    for item in args.overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        overrides[dotted.strip()] = raw.strip()
    for name, raw in vars(args).items():
        if name.startswith("flag::") and raw is not None:
            overrides[name[len("flag::"):]] = raw
    if args.config:
        return RunConfig.from_file(args.config, overrides)
    cfg = RunConfig()
    for dotted, raw in overrides.items():
        cfg.set(dotted, raw)
    return cfg.validate()


@contextlib.contextmanager
def _thread_limit(n):
    if n <= 0:
        yield
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        yield
        return
    with threadpool_limits(limits=n):
        yield


def _out_dir(cfg):
    root = cfg.out_root
    os.makedirs(root, exist_ok=True)
    return root


# -- commands -----------------------------------------------------------------


def cmd_gen_data(args):
    cfg = _build_config(args)
    n = args.n if args.n is not None else cfg["sampler.n_samples"]
    if n < 1:
        raise ConfigError("need n >= 1 images")
    out = args.out or cfg["paths.dataset"]
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    images, labels = data.generate_images(n, size=args.size, seed=cfg["run.seed"])
    data.save_dataset(out, images.astype(np.float32), labels,
                      tag=f"synthetic(seed={cfg['run.seed']},n={n},size={args.size})")
    write_manifest(out + ".manifest.json", "gen-data", cfg, inputs=[],
                   outputs=[out, data.labels_path(out)])
    print(f"wrote {n} images to {out}")
    return 0


def cmd_train_vae(args):
    cfg = _build_config(args)
    root = _out_dir(cfg)
    images, _ = data.load_dataset(cfg["paths.dataset"])
    tok = cfg.section("tokenizer")
    est = VaeTokenizer(
        f=tok["f"], d_z=tok["d_z"], vf=tok["vf"], foundation=tok["foundation"],
        foundation_seed=tok["foundation_seed"], d_f=tok["d_f"],
        feature_path=tok["feature_path"] or None, m1=tok["m1"], m2=tok["m2"],
        w_hyper=tok["w_hyper"], w_kl=tok["w_kl"], ablation=tok["ablation"],
        mdms_on_projected=tok["mdms_on_projected"], lr=tok["lr"], beta2=tok["beta2"],
        batch_size=tok["batch_size"], epochs=tok["epochs"], seed=cfg["run.seed"],
    )
    with _thread_limit(cfg["run.threads"]):
        est.fit(images)
    ckpt = os.path.join(root, "tokenizer.vavk")
    est.save(ckpt)
    report_prefix = os.path.join(root, "train_vae")
    files = diagnostics.emit_report(report_prefix, history=est.history_)
    write_manifest(ckpt + ".manifest.json", "train-vae", cfg,
                   inputs=[cfg["paths.dataset"]], outputs=[ckpt, *files])
    final = est.history_[-1]
    print(f"tokenizer -> {ckpt}  (final l_rec={final.l_rec:.2f}, l_vf={final.l_vf:.4f})")
    return 0


def cmd_train_dit(args):
    cfg = _build_config(args)
    root = _out_dir(cfg)
    vae_ckpt = args.vae or os.path.join(root, "tokenizer.vavk")
    images, labels = data.load_dataset(cfg["paths.dataset"])
    tokenizer = VaeTokenizer.from_checkpoint(vae_ckpt)
    dit = cfg.section("dit")
    with _thread_limit(cfg["run.threads"]):
        if dit["latents_from"] == "sample":
            latents = tokenizer.sample_posterior(images, seed=cfg["run.seed"])
        else:
            latents = tokenizer.transform(images)
        est = LatentFlow(
            depth=dit["depth"], heads=dit["heads"], width=dit["width"], patch=dit["patch"],
            num_classes=dit["num_classes"], lambda_dir=dit["lambda_dir"],
            label_dropout=dit["label_dropout"], lognorm=dit["lognorm"],
            lognorm_until_step=dit["lognorm_until_step"] or None, lr=dit["lr"],
            beta2=dit["beta2"], batch_size=dit["batch_size"], steps=dit["steps"],
            seed=cfg["run.seed"],
        )
        est.fit(latents, labels)
    ckpt = os.path.join(root, "dit.vavk")
    est.save(ckpt)
    csv_path = os.path.join(root, "train_dit.csv")
    diagnostics.write_csv(csv_path, [(step, "velocity_loss", val) for step, val in est.loss_log_])
    write_manifest(ckpt + ".manifest.json", "train-dit", cfg,
                   inputs=[cfg["paths.dataset"], vae_ckpt], outputs=[ckpt, csv_path])
    print(f"dit -> {ckpt}  (loss {est.loss_log_[0][1]:.3f} -> {est.loss_log_[-1][1]:.3f})")
    return 0


def _write_ppm_grid(path, images, cols=4):
    """Preview file: tile (n, 3, H, W) images in [-1, 1] into one binary PPM."""
    n, _, h, w = images.shape
    cols = min(cols, n)
    rows = (n + cols - 1) // cols
    canvas = np.zeros((rows * h, cols * w, 3), np.float64)
    for i, img in enumerate(images):
        r, c = divmod(i, cols)
        canvas[r * h : (r + 1) * h, c * w : (c + 1) * w] = np.transpose(img, (1, 2, 0))
    bytes_img = ((np.clip(canvas, -1, 1) + 1) * 127.5).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6 {cols * w} {rows * h} 255\n".encode())
        fh.write(bytes_img.tobytes())


def cmd_sample(args):
    cfg = _build_config(args)
    root = _out_dir(cfg)
    vae_ckpt = args.vae or os.path.join(root, "tokenizer.vavk")
    dit_ckpt = args.dit or os.path.join(root, "dit.vavk")
    tokenizer = VaeTokenizer.from_checkpoint(vae_ckpt)
    flow = LatentFlow.from_checkpoint(dit_ckpt)
    smp = cfg.section("sampler")
    if args.labels:
        labels = np.array([int(v) for v in args.labels.split(",")], dtype=np.int64)
    else:
        rng = np.random.default_rng(cfg["run.seed"])
        labels = rng.integers(0, flow.num_classes, size=smp["n_samples"])
    with _thread_limit(cfg["run.threads"]):
        latents = flow.sample(
            labels, steps=smp["steps"], cfg_scale=smp["cfg_scale"],
            cfg_interval=(smp["cfg_lo"], smp["cfg_hi"]), shift_s=smp["shift_s"],
            seed=cfg["run.seed"],
        )
        images = tokenizer.inverse_transform(latents)
    out = args.out or os.path.join(root, "samples.vimg")
    data.save_dataset(out, np.clip(images, -1, 1).astype(np.float32), labels,
                      tag=f"samples(seed={cfg['run.seed']})")
    ppm = out + ".ppm"
    _write_ppm_grid(ppm, np.clip(images, -1, 1))
    write_manifest(out + ".manifest.json", "sample", cfg,
                   inputs=[vae_ckpt, dit_ckpt], outputs=[out, ppm])
    print(f"wrote {len(labels)} samples to {out} (+ preview {ppm})")
    return 0


def cmd_analyze(args):
    cfg = _build_config(args)
    root = _out_dir(cfg)
    vae_ckpt = args.vae or os.path.join(root, "tokenizer.vavk")
    images, _ = data.load_dataset(cfg["paths.dataset"])
    tokenizer = VaeTokenizer.from_checkpoint(vae_ckpt)
    with _thread_limit(cfg["run.threads"]):
        if args.embedding:
            pts = np.loadtxt(args.embedding)
            if pts.ndim != 2 or pts.shape[1] != 2:
                raise ConfigError(f"embedding file must hold 'x y' pairs, got shape {pts.shape}")
            densities, bandwidth = diagnostics.kde_density(pts)
            report = diagnostics.uniformity_metrics(densities, bandwidth=bandwidth)
        else:
            report = tokenizer.uniformity(images, seed=cfg["run.seed"])
        quality = tokenizer.reconstruction_metrics(images)
    prefix = os.path.join(root, "analysis")
    files = diagnostics.emit_report(prefix, report=report)
    extra_rows = [(0, "psnr_db", quality["psnr"]), (0, "ssim", quality["ssim"])]
    rows = diagnostics.read_csv(files[0]) + extra_rows
    diagnostics.write_csv(files[0], rows)
    write_manifest(prefix + ".manifest.json", "analyze", cfg,
                   inputs=[cfg["paths.dataset"], vae_ckpt], outputs=files)
    print(
        f"uniformity: cv={report.density_cv:.4f} gini={report.gini:.4f} "
        f"entropy={report.normalized_entropy:.4f} | psnr={quality['psnr']:.2f}dB "
        f"ssim={quality['ssim']:.4f} -> {files[0]}"
    )
    return 0


def cmd_gradcheck(args):
    from .checks import run_all

    results = run_all()
    width = max(len(r.name) for r in results)
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        failed += not r.passed
        print(f"{r.name:<{width}}  max_rel_err={r.max_error:.3e}  tol={r.tolerance:.0e}  {status}")
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 1 if failed else 0


def build_parser():
    parser = argparse.ArgumentParser(prog="vaflow", description=__doc__)
    parser.add_argument("--version", action="version", version=f"vaflow {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the procedural image dataset")
    p.add_argument("--n", type=int, default=None, help="image count (default sampler.n_samples)")
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--out", default=None)
    _add_config_flags(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train-vae", help="train the tokenizer (recon + KL + alignment)")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_train_vae)

    p = sub.add_parser("train-dit", help="train the latent flow transformer")
    p.add_argument("--vae", default=None, help="tokenizer checkpoint path")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_train_dit)

    p = sub.add_parser("sample", help="generate images from the trained pair")
    p.add_argument("--vae", default=None)
    p.add_argument("--dit", default=None)
    p.add_argument("--labels", default=None, help="comma-separated class labels")
    p.add_argument("--out", default=None)
    _add_config_flags(p)
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("analyze", help="uniformity + reconstruction report for a checkpoint")
    p.add_argument("--vae", default=None)
    p.add_argument("--embedding", default=None, help="optional 2D embedding file ('x y' per line)")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("gradcheck", help="finite-difference check every differentiable op")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError, ValueError, RuntimeError) as exc:
        print(f"vaflow-error command={args.command} type={type(exc).__name__} "
              f"msg={json.dumps(str(exc))}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
