"""Image and sequence quality metrics: PSNR, SSIM, MSE, MAE.

All metrics operate on frames in [0, 1] (channels-last) and are computed
in float64. PSNR uses MAX = 1.0 and is +inf when the frames are identical
(rendered as the string "inf" in reports). SSIM follows the standard
windowed formula: 11x11 Gaussian window with sigma 1.5, K1 = 0.01,
K2 = 0.03, statistics over the valid window region, mean over channels.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import convolve2d


def _as_frame(a, name):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 2:
        a = a[..., None]
    if a.ndim != 3:
        raise ValueError(f"{name} must be (H, W) or (H, W, C)")
    return a


def mse(pred, gt):
    return float(np.mean((_as_frame(pred, "pred") - _as_frame(gt, "gt")) ** 2))


def mae(pred, gt):
    return float(np.mean(np.abs(_as_frame(pred, "pred") - _as_frame(gt, "gt"))))


def psnr_from_mse(m):
    if m == 0:
        return math.inf
    return 10.0 * math.log10(1.0 / m)


def psnr(pred, gt):
    return psnr_from_mse(mse(pred, gt))


def _gaussian_window(size=11, sigma=1.5):
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


_SSIM_WINDOW = _gaussian_window()


def _ssim_channel(a, b):
    w = _SSIM_WINDOW
    c1 = 0.01**2
    c2 = 0.03**2
    mu_a = convolve2d(a, w, mode="valid")
    mu_b = convolve2d(b, w, mode="valid")
    saa = convolve2d(a * a, w, mode="valid") - mu_a**2
    sbb = convolve2d(b * b, w, mode="valid") - mu_b**2
    sab = convolve2d(a * b, w, mode="valid") - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


def ssim(pred, gt):
    pred = _as_frame(pred, "pred")
    gt = _as_frame(gt, "gt")
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if pred.shape[0] < 11 or pred.shape[1] < 11:
        raise ValueError("frames must be at least 11x11 for the SSIM window")
    return float(
        np.mean([_ssim_channel(pred[..., c], gt[..., c]) for c in range(pred.shape[2])])
    )


@dataclass
class MetricEntry:
    psnr: float
    ssim: float
    mse: float
    mae: float


def compute_metrics(pred, gt):
    """All four metrics for one predicted/reference frame pair."""
    p = _as_frame(pred, "pred")
    g = _as_frame(gt, "gt")
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    m = mse(p, g)
    return MetricEntry(psnr=psnr_from_mse(m), ssim=ssim(p, g), mse=m, mae=mae(p, g))


@dataclass
class MetricReport:
    """Aggregated evaluation over sequences and prediction steps.

    ``per_step[s]`` averages metrics over sequences at horizon step s+1;
    ``per_frame`` keeps every (sequence, step) entry in order; ``mean``
    averages over all predicted frames.
    """

    per_step: list = field(default_factory=list)
    per_frame: list = field(default_factory=list)
    mean: MetricEntry | None = None
    num_sequences: int = 0


def _mean_entry(entries):
    return MetricEntry(
        psnr=float(np.mean([e.psnr for e in entries])),
        ssim=float(np.mean([e.ssim for e in entries])),
        mse=float(np.mean([e.mse for e in entries])),
        mae=float(np.mean([e.mae for e in entries])),
    )


def aggregate_report(entries_by_sequence):
    """Build a :class:`MetricReport` from per-sequence lists of entries."""
    if not entries_by_sequence:
        raise ValueError("no sequences to aggregate")
    S = len(entries_by_sequence[0])
    per_step = [
        _mean_entry([seq[s] for seq in entries_by_sequence]) for s in range(S)
    ]
    per_frame = [e for seq in entries_by_sequence for e in seq]
    return MetricReport(
        per_step=per_step,
        per_frame=per_frame,
        mean=_mean_entry(per_frame),
        num_sequences=len(entries_by_sequence),
    )


def evaluate_model(ckpt, dataset, T, S, mode="greedy", oracle_codes=False,
                   corruption=None, corruption_seed=0):
    """Predict S frames from T context frames for every sequence and score.

    ``oracle_codes=True`` bypasses generation with the codes of the true
    future frames (the model upper bound). ``corruption`` optionally
    corrupts the context frames before prediction (ground truth stays
    clean). Deterministic for greedy mode.
    """
    from . import data as data_mod
    from . import pipeline

    if not dataset:
        raise ValueError("dataset is empty")
    entries = []
    for i, seq in enumerate(dataset):
        seq = np.asarray(seq)
        if seq.shape[0] < T + S:
            raise ValueError(f"sequence of length {seq.shape[0]} shorter than T+S={T + S}")
        context = seq[:T]
        if corruption is not None:
            context = data_mod.corrupt(context, corruption, seed=corruption_seed + i)
        gt = seq[T : T + S]
        if oracle_codes:
            preds = pipeline.reconstruct_frames(ckpt, gt)
        else:
            request = pipeline.PredictionRequest(
                context_frames=list(context), horizon=S, mode=mode
            )
            preds = pipeline.predict_frames(ckpt, request)
        entries.append([compute_metrics(p, g) for p, g in zip(preds, gt)])
    return aggregate_report(entries)


def _fmt(x):
    if math.isinf(x):
        return "inf"
    return f"{x:.6f}"


def write_report_kv(report, path):
    """Flat key-value text report, including the scaled convenience values."""
    lines = []
    m = report.mean
    lines.append(f"sequences = {report.num_sequences}")
    lines.append(f"mean.psnr = {_fmt(m.psnr)}")
    lines.append(f"mean.ssim = {_fmt(m.ssim)}")
    lines.append(f"mean.mse = {_fmt(m.mse)}")
    lines.append(f"mean.mae = {_fmt(m.mae)}")
    lines.append(f"mean.mse_x100 = {_fmt(m.mse * 100)}")
    lines.append(f"mean.mse_div10 = {_fmt(m.mse / 10)}")
    lines.append(f"mean.mae_div100 = {_fmt(m.mae / 100)}")
    for s, e in enumerate(report.per_step, start=1):
        lines.append(f"step{s}.psnr = {_fmt(e.psnr)}")
        lines.append(f"step{s}.ssim = {_fmt(e.ssim)}")
        lines.append(f"step{s}.mse = {_fmt(e.mse)}")
        lines.append(f"step{s}.mae = {_fmt(e.mae)}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def write_report_csv(report, path):
    """Per-step table: step, psnr, ssim, mse, mae."""
    rows = ["step,psnr,ssim,mse,mae"]
    for s, e in enumerate(report.per_step, start=1):
        rows.append(f"{s},{_fmt(e.psnr)},{_fmt(e.ssim)},{_fmt(e.mse)},{_fmt(e.mae)}")
    with open(path, "w") as f:
        f.write("\n".join(rows) + "\n")
