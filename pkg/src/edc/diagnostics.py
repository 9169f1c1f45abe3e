"""Calibration (ECE, residual curves), representation spectra (effective rank),
linear CKA task alignment, and throughput measurement."""

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

DEFAULT_BINS = 15
SPARSITY_THRESHOLD = 1e-3


@dataclass
class CalibrationBins:
    num_bins: int
    counts: np.ndarray      # n_b per bin
    confidence: np.ndarray  # mean max-softmax confidence per bin (nan if empty)
    accuracy: np.ndarray    # fraction correct per bin (nan if empty)

    @property
    def residual(self):
        return self.accuracy - self.confidence

    def to_records(self):
        recs = []
        for b in range(self.num_bins):
            recs.append({
                "bin": b,
                "lo": b / self.num_bins,
                "hi": (b + 1) / self.num_bins,
                "count": int(self.counts[b]),
                "confidence": None if self.counts[b] == 0 else float(self.confidence[b]),
                "accuracy": None if self.counts[b] == 0 else float(self.accuracy[b]),
            })
        return recs


def ece(probs, gt, num_bins=DEFAULT_BINS, subset_mask=None):
    """Expected calibration error over max-softmax confidences.

    `probs` is (..., K) softmax output, `gt` integer labels of matching
    leading shape. Bins partition [0,1] uniformly; a confidence equal to an
    edge falls in the upper bin. Returns (scalar, CalibrationBins); the
    scalar is NaN (with a warning) on an empty subset.
    """
    probs = np.asarray(probs, dtype=np.float64)
    gt = np.asarray(gt)
    k = probs.shape[-1]
    flat = probs.reshape(-1, k)
    labels = gt.reshape(-1)
    if num_bins < 1:
        raise ValueError("num_bins must be >= 1")
    if not np.allclose(flat.sum(axis=1), 1.0, atol=1e-5):
        raise ValueError("probabilities must sum to 1 per pixel")
    sel = np.ones(labels.shape[0], dtype=bool)
    if subset_mask is not None:
        sel &= np.asarray(subset_mask).reshape(-1).astype(bool)
    sel &= labels != 255
    flat, labels = flat[sel], labels[sel]

    counts = np.zeros(num_bins, dtype=np.int64)
    conf_sum = np.zeros(num_bins)
    acc_sum = np.zeros(num_bins)
    if flat.shape[0] == 0:
        warnings.warn("ECE undefined: empty subset")
        bins = CalibrationBins(num_bins, counts, np.full(num_bins, np.nan),
                               np.full(num_bins, np.nan))
        return float("nan"), bins

    conf = flat.max(axis=1)
    pred = flat.argmax(axis=1)
    correct = (pred == labels).astype(np.float64)
    idx = np.minimum((conf * num_bins).astype(np.int64), num_bins - 1)
    np.add.at(counts, idx, 1)
    np.add.at(conf_sum, idx, conf)
    np.add.at(acc_sum, idx, correct)

    with np.errstate(invalid="ignore"):
        mean_conf = np.where(counts > 0, conf_sum / np.maximum(counts, 1), np.nan)
        mean_acc = np.where(counts > 0, acc_sum / np.maximum(counts, 1), np.nan)
    n = counts.sum()
    occupied = counts > 0
    value = float(np.sum(counts[occupied] / n
                         * np.abs(mean_acc[occupied] - mean_conf[occupied])))
    return value, CalibrationBins(num_bins, counts, mean_conf, mean_acc)


def residual_curve(bins):
    """(bin_center, accuracy - confidence) for every occupied bin."""
    out = []
    for b in range(bins.num_bins):
        if bins.counts[b] > 0:
            center = (b + 0.5) / bins.num_bins
            out.append((center, float(bins.accuracy[b] - bins.confidence[b])))
    return out


@dataclass
class SpectrumStats:
    eigenvalues: np.ndarray
    spectrum: np.ndarray  # normalized eigenvalues p_i
    entropy: float
    erank: float
    nerank: float
    sparsity: float


def erank(features):
    """Effective rank of an N x C feature matrix.

    Covariance is taken over channels on the raw (uncentered) features;
    eigenvalues are clipped at zero before normalization. All-zero features
    degenerate to erank 1.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("expected an N x C matrix")
    n, c = x.shape
    sparsity = float(np.mean(np.abs(x) < SPARSITY_THRESHOLD))
    cov = x.T @ x / n
    lam = np.clip(np.linalg.eigvalsh(cov), 0.0, None)
    total = lam.sum()
    if total == 0.0:
        p = np.zeros(c)
        return SpectrumStats(lam, p, 0.0, 1.0, 1.0 / c, sparsity)
    p = lam / total
    nz = p > 0
    h = float(-(p[nz] * np.log(p[nz])).sum())
    er = float(np.exp(h))
    return SpectrumStats(lam, p, h, er, er / c, sparsity)


def linear_cka(x, y):
    """Linear CKA between two feature matrices over the same N rows.

    Both inputs are centered column-wise before the computation; returns 0
    if either self-similarity norm vanishes.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape[0] != y.shape[0]:
        raise ValueError("row counts differ")
    x = x - x.mean(axis=0, keepdims=True)
    y = y - y.mean(axis=0, keepdims=True)
    num = np.linalg.norm(x.T @ y, "fro") ** 2
    den = np.linalg.norm(x.T @ x, "fro") * np.linalg.norm(y.T @ y, "fro")
    if den == 0.0:
        return 0.0
    return float(num / den)


@dataclass
class EfficiencyRecord:
    parameter_count: int
    throughput_img_s: float
    elapsed_s: float
    protocol: dict = field(default_factory=dict)
    interaction_counts: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "parameter_count": self.parameter_count,
            "throughput_img_s": self.throughput_img_s,
            "elapsed_s": self.elapsed_s,
            "protocol": self.protocol,
            "interaction_counts": self.interaction_counts,
            "note": "run exclusively; concurrent load invalidates timings",
        }


def throughput_bench(forward, input_size, batch, warmup_iters, timed_iters,
                     parameter_count=0, interaction_counts=None):
    """Time `forward(batch, size)` after warmup and report images/second."""
    for _ in range(warmup_iters):
        forward(batch, input_size)
    t0 = time.perf_counter()
    for _ in range(timed_iters):
        forward(batch, input_size)
    elapsed = time.perf_counter() - t0
    thrp = (timed_iters * batch) / elapsed if elapsed > 0 else float("inf")
    return EfficiencyRecord(
        parameter_count=parameter_count,
        throughput_img_s=thrp,
        elapsed_s=elapsed,
        protocol={"input_size": input_size, "batch": batch,
                  "warmup_iters": warmup_iters, "timed_iters": timed_iters},
        interaction_counts=interaction_counts or {},
    )
