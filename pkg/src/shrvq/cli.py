"""Command-line surface: training, prediction, evaluation, figure export.

Every command takes ``--config PATH`` plus optional ``--seed`` (overrides
the config seed) and ``--out DIR``. Commands write their artifacts under
the output directory together with a ``manifest.txt`` listing each file
with its sha256; on failure partial outputs are removed. Exit codes:
0 success, 1 runtime failure, 2 configuration error.
"""

import argparse
import dataclasses
import logging
import math
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import checkpoint as ckpt_io
from . import metrics as metrics_mod
from . import pipeline
from .autoencoder import layer_reconstructions
from .config import ConfigError, load_config
from .data import CorruptionSpec, SceneSpec, corrupt, generate_scene, load_sequences

logger = logging.getLogger("shrvq")

COMMANDS = (
    "train-hrvqvae", "train-astpm", "train-joint", "predict",
    "evaluate", "corrupt-eval", "export-heatmaps",
)


class ArtifactWriter:
    """Tracks files written under the output dir; finalizes a manifest."""

    def __init__(self, out_dir):
        self.out = Path(out_dir)
        self.files = []

    def path(self, name):
        self.out.mkdir(parents=True, exist_ok=True)
        p = self.out / name
        self.files.append(p)
        return p

    def finalize(self):
        lines = []
        for p in sorted(self.files):
            lines.append(f"{ckpt_io.file_sha256(p)}  {p.relative_to(self.out)}")
        with open(self.out / "manifest.txt", "w") as f:
            f.write("\n".join(lines) + "\n")

    def cleanup(self):
        for p in self.files:
            try:
                p.unlink()
            except OSError:
                pass


def synthetic_split(data_cfg, train_seed_base=None):
    """Deterministic synthetic train/holdout sequence lists."""
    base = data_cfg.scene_seed if train_seed_base is None else train_seed_base
    spec = dict(
        height=data_cfg.height, width=data_cfg.width, channels=data_cfg.channels,
        num_shapes=data_cfg.num_shapes, kind=data_cfg.shape_kind,
        radius_range=(data_cfg.radius_min, data_cfg.radius_max),
        velocity_range=(data_cfg.velocity_min, data_cfg.velocity_max),
        length=data_cfg.length,
    )
    train = [generate_scene(SceneSpec(seed=base + i, **spec))
             for i in range(data_cfg.synth_sequences)]
    holdout = [generate_scene(SceneSpec(seed=base + 10000 + i, **spec))
               for i in range(data_cfg.synth_holdout)]
    return train, holdout


def resolve_dataset(cfg):
    """(train_sequences, eval_sequences) from directory or synthetic data."""
    d = cfg.data
    if d.root:
        seqs = load_sequences(
            d.root, size=(cfg.model.frame_h, cfg.model.frame_w),
            channels=cfg.model.in_channels, min_length=d.context + d.horizon,
        )
        if not seqs:
            raise ValueError(f"no usable sequences under {d.root}")
        return seqs, seqs
    return synthetic_split(d)


def _require_checkpoint(cfg):
    if not cfg.data.checkpoint:
        raise ConfigError("data.checkpoint is required for this command")
    return ckpt_io.load_checkpoint(cfg.data.checkpoint)


def _save_frame_png(frame, path):
    a = np.asarray(frame)
    a = np.clip(a, 0.0, 1.0)
    a = (a * 255.0).round().astype(np.uint8)
    if a.ndim == 3 and a.shape[-1] == 1:
        img = Image.fromarray(a[..., 0], mode="L")
    elif a.ndim == 3 and a.shape[-1] == 3:
        img = Image.fromarray(a, mode="RGB")
    else:
        img = Image.fromarray(a.mean(axis=-1).astype(np.uint8), mode="L")
    img.save(path)


def _save_gif(frames, path, ms=200):
    imgs = []
    for frame in frames:
        a = (np.clip(np.asarray(frame), 0, 1) * 255.0).round().astype(np.uint8)
        if a.shape[-1] == 1:
            imgs.append(Image.fromarray(a[..., 0], mode="L"))
        else:
            imgs.append(Image.fromarray(a[..., :3], mode="RGB"))
    imgs[0].save(path, save_all=True, append_images=imgs[1:], duration=ms, loop=0)


def _strip(rows):
    """Stack labeled frame rows into one image: one row per list of frames."""
    row_imgs = []
    for frames in rows:
        row = np.concatenate([np.clip(np.asarray(f), 0, 1) for f in frames], axis=1)
        row_imgs.append(row)
    width = max(r.shape[1] for r in row_imgs)
    padded = [
        np.pad(r, ((0, 0), (0, width - r.shape[1]), (0, 0))) for r in row_imgs
    ]
    return np.concatenate(padded, axis=0)


def _write_train_log(writer, ckpt):
    lines = []
    history = ckpt.metadata.get("loss_history", {})
    for epoch, (total, recon) in enumerate(
        zip(history.get("codec", {}).get("total", []),
            history.get("codec", {}).get("recon", [])), start=1,
    ):
        lines.append(f"codec epoch {epoch} total {total:.6f} recon {recon:.6f}")
    for layer, hist in enumerate(history.get("predictor", []), start=1):
        for epoch, v in enumerate(hist, start=1):
            lines.append(f"predictor layer {layer} epoch {epoch} loss {v:.6f}")
    for epoch, v in enumerate(history.get("joint", []), start=1):
        lines.append(f"joint epoch {epoch} loss {v:.6f}")
    with open(writer.path("train_log.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")


def cmd_train_hrvqvae(cfg, writer):
    train_set, _ = resolve_dataset(cfg)
    ckpt = pipeline.train_hrvqvae(train_set, cfg.model, cfg.train)
    ckpt_io.save_checkpoint(ckpt, writer.path("checkpoint.shrvq"))
    _write_train_log(writer, ckpt)


def cmd_train_astpm(cfg, writer):
    ckpt = _require_checkpoint(cfg)
    train_set, _ = resolve_dataset(cfg)
    ckpt = pipeline.train_astpm(ckpt, train_set, cfg.train)
    ckpt_io.save_checkpoint(ckpt, writer.path("checkpoint.shrvq"))
    _write_train_log(writer, ckpt)


def cmd_train_joint(cfg, writer):
    ckpt = _require_checkpoint(cfg)
    train_set, _ = resolve_dataset(cfg)
    ckpt = pipeline.train_joint(train_set, cfg.train, ckpt,
                                cfg.data.context, cfg.data.horizon)
    ckpt_io.save_checkpoint(ckpt, writer.path("checkpoint.shrvq"))
    _write_train_log(writer, ckpt)


def cmd_predict(cfg, writer):
    ckpt = _require_checkpoint(cfg)
    _, eval_set = resolve_dataset(cfg)
    d = cfg.data
    seq = np.asarray(eval_set[d.sequence_index])
    context = list(seq[: d.context])
    request = pipeline.PredictionRequest(
        context_frames=context, horizon=d.horizon, mode=d.decode_mode,
        temperature=d.temperature, seed=cfg.train.seed,
    )
    preds = pipeline.predict_frames(ckpt, request)
    for s, frame in enumerate(preds, start=1):
        _save_frame_png(frame, writer.path(f"pred_{s:03d}.png"))
    _save_gif(context + preds, writer.path("prediction.gif"))
    has_gt = seq.shape[0] >= d.context + d.horizon
    if has_gt:
        gt = seq[d.context : d.context + d.horizon]
        entries = [[metrics_mod.compute_metrics(p, g) for p, g in zip(preds, gt)]]
        report = metrics_mod.aggregate_report(entries)
        metrics_mod.write_report_kv(report, writer.path("metrics.txt"))
        strip = _strip([context, list(gt), preds])
    else:
        strip = _strip([context, preds])
    _save_frame_png(strip, writer.path("strip.png"))


def cmd_evaluate(cfg, writer):
    ckpt = _require_checkpoint(cfg)
    _, eval_set = resolve_dataset(cfg)
    report = metrics_mod.evaluate_model(
        ckpt, eval_set, cfg.data.context, cfg.data.horizon, mode=cfg.data.decode_mode
    )
    metrics_mod.write_report_kv(report, writer.path("report.txt"))
    metrics_mod.write_report_csv(report, writer.path("report.csv"))


def _corruption_spec(d):
    return CorruptionSpec(
        kind=d.corruption, sigma=d.corruption_sigma,
        fragments=d.corruption_fragments, fragment_size=d.corruption_fragment_size,
        snr_db=d.corruption_snr_db, quality=d.corruption_quality,
    )


def cmd_corrupt_eval(cfg, writer):
    ckpt = _require_checkpoint(cfg)
    _, eval_set = resolve_dataset(cfg)
    d = cfg.data
    clean = metrics_mod.evaluate_model(ckpt, eval_set, d.context, d.horizon,
                                       mode=d.decode_mode)
    spec = _corruption_spec(d)
    corrupted = metrics_mod.evaluate_model(
        ckpt, eval_set, d.context, d.horizon, mode=d.decode_mode,
        corruption=spec, corruption_seed=cfg.train.seed,
    )
    metrics_mod.write_report_kv(clean, writer.path("report_clean.txt"))
    metrics_mod.write_report_csv(clean, writer.path("report_clean.csv"))
    metrics_mod.write_report_kv(corrupted, writer.path("report_corrupted.txt"))
    metrics_mod.write_report_csv(corrupted, writer.path("report_corrupted.csv"))
    delta = clean.mean.psnr - corrupted.mean.psnr
    with open(writer.path("report_delta.txt"), "w") as f:
        f.write(f"corruption = {spec.kind}\n")
        f.write(f"clean.psnr = {clean.mean.psnr:.6f}\n")
        f.write(f"corrupted.psnr = {corrupted.mean.psnr:.6f}\n")
        f.write(f"delta.psnr = {delta:.6f}\n")


def cmd_export_heatmaps(cfg, writer):
    ckpt = _require_checkpoint(cfg)
    _, eval_set = resolve_dataset(cfg)
    d = cfg.data
    seq = np.asarray(eval_set[d.sequence_index])[: d.context]
    with torch.no_grad():
        z = ckpt.autoencoder.encode(torch.from_numpy(seq))
        quant = ckpt.tree.quantize(z)
    pairs = layer_reconstructions(ckpt.autoencoder, quant)
    for layer, (frames, heat) in enumerate(pairs, start=1):
        for t in range(seq.shape[0]):
            _save_frame_png(heat[t].numpy()[..., None],
                            writer.path(f"heatmap_f{t:03d}_layer{layer}.png"))
            _save_frame_png(frames[t].numpy(),
                            writer.path(f"recon_f{t:03d}_layer{layer}.png"))


_HANDLERS = {
    "train-hrvqvae": cmd_train_hrvqvae,
    "train-astpm": cmd_train_astpm,
    "train-joint": cmd_train_joint,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "corrupt-eval": cmd_corrupt_eval,
    "export-heatmaps": cmd_export_heatmaps,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="shrvq",
        description="Hierarchical residual VQ video prediction pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="flat key-value config file")
        p.add_argument("--seed", type=int, default=None, help="override train.seed")
        p.add_argument("--out", default="out", help="output directory")
    return parser


def run(argv=None):
    args = build_parser().parse_args(argv)
    torch.set_num_threads(1)
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.train = dataclasses.replace(cfg.train, seed=args.seed)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    writer = ArtifactWriter(args.out)
    try:
        _HANDLERS[args.command](cfg, writer)
        writer.finalize()
    except ConfigError as e:
        writer.cleanup()
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        writer.cleanup()
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
