"""Checkpoint evaluation: spectral distances for dry estimates, decay
metrics for impulse-response estimates, audio reconstruction, CSV reports.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import corpus, dsp, models, trainer
from .autodiff import no_grad
from .errors import EmptySplit, InsufficientDecay, ShapeMismatch, ZeroEnergy

DB_CLAMP = -120.0
_LN_TO_DB = 20.0 / math.log(10.0)


def log_spectral_distance(est_logmag: np.ndarray, ref_logmag: np.ndarray) -> float:
    """Frame-averaged RMS difference of natural-log spectra, in dB."""
    if est_logmag.shape != ref_logmag.shape:
        raise ShapeMismatch(f"{est_logmag.shape} vs {ref_logmag.shape}")
    per_frame = np.sqrt(np.mean((_LN_TO_DB * (est_logmag - ref_logmag)) ** 2, axis=1))
    return float(per_frame.mean())


def energy_decay_curve(rir_mag: np.ndarray) -> np.ndarray:
    """Backward-integrated frame energy relative to the total, in dB.

    Starts at 0 dB, non-increasing, clamped at -120 dB once the remaining
    energy is zero.
    """
    energy = (np.asarray(rir_mag, dtype=np.float64) ** 2).sum(axis=1)
    remaining = np.cumsum(energy[::-1])[::-1]
    if remaining[0] <= 0.0:
        raise ZeroEnergy("impulse response magnitude is all zero")
    ratio = remaining / remaining[0]
    floor = 10.0 ** (DB_CLAMP / 10.0)
    return 10.0 * np.log10(np.maximum(ratio, floor))


def t60_estimate(edc_curve: np.ndarray, hop_s: float = 0.016) -> float:
    """Reverberation time from a line fit over the -5 dB to -25 dB stretch."""
    curve = np.asarray(edc_curve, dtype=np.float64)
    if curve.min() > -25.0:
        raise InsufficientDecay("curve never reaches -25 dB")
    mask = (curve <= -5.0) & (curve >= -25.0)
    if mask.sum() < 2:
        raise InsufficientDecay("fewer than two frames between -5 and -25 dB")
    frames = np.flatnonzero(mask)
    slope = np.polyfit(frames, curve[mask], 1)[0]  # dB per frame
    if slope >= 0.0:
        raise InsufficientDecay("fitted slope is not decaying")
    return float(-60.0 / slope * hop_s)


def reconstruct_audio(est_logmag: np.ndarray, reverberant_spec: dsp.ComplexSpectrogram,
                      scale: float, length: int | None = None) -> dsp.AudioClip:
    """Audition an estimate: exp the log-magnitude, restore its recorded
    scale, borrow the reverberant phase, and invert the STFT."""
    if est_logmag.shape != reverberant_spec.shape:
        raise ShapeMismatch(
            f"estimate {est_logmag.shape} vs phase source {reverberant_spec.shape}")
    mag = np.exp(est_logmag) * (scale if scale > 0 else 1.0)
    ref = np.hypot(reverberant_spec.re, reverberant_spec.im)
    safe = np.where(ref > 0, ref, 1.0)
    re = mag * np.where(ref > 0, reverberant_spec.re / safe, 1.0)
    im = mag * np.where(ref > 0, reverberant_spec.im / safe, 0.0)
    spec = dsp.ComplexSpectrogram(re, im, reverberant_spec.frame_len,
                                  reverberant_spec.hop)
    return dsp.istft(spec, length=length)


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)  # (example_id, metric, value)

    def add(self, example_id: str, metric: str, value: float):
        self.rows.append((example_id, metric, float(value)))

    def metrics(self):
        return sorted({m for _, m, _ in self.rows})

    def aggregates(self):
        out = {}
        for metric in self.metrics():
            values = np.array([v for _, m, v in self.rows if m == metric])
            out[metric] = (float(values.mean()), float(values.std()))
        return out

    def to_csv(self, path):
        lines = ["example_id,metric,value"]
        for example_id, metric, value in self.rows:
            lines.append(f"{example_id},{metric},{value:.12g}")
        for metric, (mean, std) in self.aggregates().items():
            lines.append(f"__mean__,{metric},{mean:.12g}")
            lines.append(f"__std__,{metric},{std:.12g}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _dry_metrics(report, example_id, est_logmag, example):
    report.add(example_id, "lsd_db",
               log_spectral_distance(est_logmag, example.dry_target_logmag))
    report.add(example_id, "dry_mag_mse", float(np.mean(
        (np.exp(est_logmag) - np.exp(example.dry_target_logmag)) ** 2)))


def _rir_metrics(report, example_id, rir_est, example):
    report.add(example_id, "rir_mag_mse", float(np.mean(
        (rir_est - example.rir_target_mag) ** 2)))
    try:
        edc_est = energy_decay_curve(rir_est)
        edc_ref = energy_decay_curve(example.rir_target_mag)
        report.add(example_id, "edc_mse_db", float(np.mean((edc_est - edc_ref) ** 2)))
        report.add(example_id, "t60_abs_err_s",
                   abs(t60_estimate(edc_est) - t60_estimate(edc_ref)))
    except (ZeroEnergy, InsufficientDecay):
        pass  # decay undefined for this estimate; row omitted


def evaluate_model(model, examples, example_ids) -> MetricsReport:
    """Forward every example and score it according to the model kind."""
    if not examples:
        raise EmptySplit("no examples to evaluate")
    report = MetricsReport()
    with no_grad():
        for example_id, example in zip(example_ids, examples):
            if model.kind == "joint":
                dry_est, rir_est = model.forward(example.input_logmag)
                _dry_metrics(report, example_id, dry_est.data, example)
                _rir_metrics(report, example_id, rir_est.data, example)
                recon = models.reconstruct_reverb(
                    rir_est.data, np.exp(example.dry_target_logmag))
                report.add(example_id, "reconstruction_mse", float(np.mean(
                    (recon.data - example.reverb_target_mag) ** 2)))
            elif model.kind == "rir":
                rir_est = model.forward(example.input_logmag)
                _rir_metrics(report, example_id, rir_est.data, example)
            else:
                dry_est = model.forward(example.input_logmag)
                _dry_metrics(report, example_id, dry_est.data, example)
    return report


def evaluate(checkpoint: trainer.Checkpoint, manifest, split: str,
             examples_dir) -> MetricsReport:
    """Score a checkpoint on every cached example of one split."""
    model = trainer.restore_model(checkpoint)
    paths = trainer.split_cache_paths(manifest, examples_dir, split)
    if not paths:
        raise EmptySplit(f"split {split!r} has no cached examples")
    examples = [corpus.load_example(p) for p in paths]
    return evaluate_model(model, examples, [p.stem for p in paths])
