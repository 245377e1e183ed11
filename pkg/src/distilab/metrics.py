"""Classification evaluation: accuracy, NLL, ECE, temperature fitting,
calibrated metrics, functional diversity, and predictive-entropy histograms.

NLL is reported both summed over the dataset and as the per-sample mean.
ECE uses L right-closed confidence bins ((l-1)/L, l/L]; a confidence of
exactly zero lands in the first bin. Temperature fitting minimizes
validation NLL over a log-spaced grid followed by golden-section refinement,
widening the bracket when the optimum hits an edge.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

PROB_FLOOR = 1e-12
GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def eval_threads() -> int:
    """Intra-run evaluation parallelism cap; 1 (fully serial) by default."""
    return max(1, int(os.environ.get("DISTILAB_THREADS", "1")))


@dataclass
class MetricsReport:
    acc: float
    nll_sum: float
    nll_mean: float
    ece: float
    tau_star: float
    cnll_mean: float
    cece: float
    n: int
    bins: int
    mean_div: float | None = None
    clamp_events: int = 0


@dataclass
class EntropyHistogram:
    edges: np.ndarray       # bins + 1 edges covering [0, ln K]
    counts: np.ndarray      # non-negative ints summing to the sample count
    tag: str                # "in" or "ood"


def softmax_np(logits: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Temperature-scaled softmax over the last axis, max-stabilized."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = logits / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_probs(probs: np.ndarray, tol: float = 1e-9) -> None:
    if probs.ndim != 2:
        raise ValueError(f"expected (N, K) probabilities, got shape {probs.shape}")
    if probs.shape[0] == 0:
        raise ValueError("empty dataset")
    if np.abs(probs.sum(axis=1) - 1.0).max() > tol:
        raise ValueError("probability rows must sum to 1")


def accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of argmax hits; ties resolve to the lowest class index."""
    _check_probs(probs)
    return float((probs.argmax(axis=1) == labels).mean())


def nll_with_stats(probs: np.ndarray, labels: np.ndarray) -> tuple[float, float, int]:
    """(summed NLL, per-sample mean, number of floor-clamped probabilities)."""
    _check_probs(probs)
    picked = probs[np.arange(len(labels)), labels]
    clamped = int((picked < PROB_FLOOR).sum())
    total = float(-np.log(np.maximum(picked, PROB_FLOOR)).sum())
    return total, total / len(labels), clamped


def nll(probs: np.ndarray, labels: np.ndarray) -> float:
    """Negative log-likelihood summed over the dataset."""
    return nll_with_stats(probs, labels)[0]


def _bin_index(conf: np.ndarray, bins: int) -> np.ndarray:
    # bin l covers ((l-1)/L, l/L]; exact zeros go to bin 1
    idx = np.ceil(conf * bins).astype(np.int64)
    return np.clip(idx, 1, bins)


def ece(probs: np.ndarray, labels: np.ndarray, bins: int = 15) -> float:
    """Expected calibration error over right-closed confidence bins."""
    _check_probs(probs)
    if bins < 1:
        raise ValueError("bins must be >= 1")
    conf = probs.max(axis=1)
    correct = (probs.argmax(axis=1) == labels).astype(np.float64)
    idx = _bin_index(conf, bins)
    n = len(labels)
    total = 0.0
    for l in range(1, bins + 1):
        mask = idx == l
        count = int(mask.sum())
        if count == 0:
            continue
        gap = abs(correct[mask].mean() - conf[mask].mean())
        total += (count / n) * gap
    return float(total)


def _mean_probs(logits: np.ndarray, tau: float) -> np.ndarray:
    """Probabilities at temperature tau; member axis (M, N, K) is averaged."""
    if logits.ndim == 3:
        return softmax_np(logits, tau).mean(axis=0)
    return softmax_np(logits, tau)


def fit_temperature(val_logits: np.ndarray, val_labels: np.ndarray,
                    lo: float = 0.05, hi: float = 10.0) -> float:
    """Temperature minimizing validation NLL.

    Coarse pass over 100 log-spaced points, then golden-section refinement to
    |delta tau| < 1e-4. If the coarse argmin lands on a bracket edge the
    bracket is widened (factor 2 on that side), at most three times.
    """
    if len(val_labels) == 0:
        raise ValueError("empty validation set")

    def objective(tau: float) -> float:
        return nll(_mean_probs(val_logits, tau), val_labels)

    for _ in range(4):
        grid = np.geomspace(lo, hi, 100)
        values = np.array([objective(t) for t in grid])
        best = int(values.argmin())
        if best == 0:
            lo = lo / 2.0
        elif best == len(grid) - 1:
            hi = hi * 2.0
        else:
            break
    a, b = grid[max(best - 1, 0)], grid[min(best + 1, len(grid) - 1)]
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = objective(c), objective(d)
    while abs(b - a) > 1e-4:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = objective(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = objective(d)
    return float((a + b) / 2.0)


def calibrated_metrics(test_logits: np.ndarray, test_labels: np.ndarray,
                       tau_star: float, bins: int = 15) -> tuple[float, float]:
    """(summed cNLL, cECE) on temperature-scaled test probabilities."""
    if tau_star <= 0:
        raise ValueError("tau_star must be positive")
    probs = _mean_probs(test_logits, tau_star)
    return nll(probs, test_labels), ece(probs, test_labels, bins)


def pairwise_divergence_values(probs: np.ndarray) -> np.ndarray:
    """Per-sample mean pairwise KL across the member axis.

    probs has shape (M, N, K); returns (N,) with
    sum_{i != j} KL(p_i || p_j) / (M (M - 1)).
    """
    m = probs.shape[0]
    if m < 2:
        raise ValueError("need at least two members for diversity")
    logs = np.log(np.maximum(probs, PROB_FLOOR))
    out = np.zeros(probs.shape[1])
    for i in range(m):
        for j in range(m):
            if i == j:
                continue
            out += (probs[i] * (logs[i] - logs[j])).sum(axis=-1)
    return out / (m * (m - 1))


def diversity_from_probs(probs: np.ndarray) -> float:
    """Mean over samples of the pairwise-KL diversity; (M, K) means one sample."""
    if probs.ndim == 2:
        probs = probs[:, None, :]
    return float(pairwise_divergence_values(probs).mean())


def diversity(models: list, x: np.ndarray, tau: float = 1.0) -> float:
    """Functional diversity of a model list at inputs x (callable .predict_logits)."""
    probs = np.stack([softmax_np(m.predict_logits(x), tau) for m in models])
    return diversity_from_probs(probs)


def entropy_values(probs: np.ndarray) -> np.ndarray:
    p = np.maximum(probs, PROB_FLOOR)
    return -(probs * np.log(p)).sum(axis=-1)


def entropy_histogram(probs: np.ndarray, bins: int = 30, tag: str = "in") -> EntropyHistogram:
    """Shannon entropies binned uniformly over [0, ln K]."""
    _check_probs(probs)
    k = probs.shape[1]
    edges = np.linspace(0.0, math.log(k), bins + 1)
    ent = np.clip(entropy_values(probs), 0.0, math.log(k))
    counts, _ = np.histogram(ent, bins=edges)
    return EntropyHistogram(edges, counts, tag)


def batched_logits(model, x: np.ndarray, chunk: int = 1024) -> np.ndarray:
    """Evaluate logits in fixed-size chunks, optionally across threads.

    Chunks are reduced in input order, so results do not depend on the
    DISTILAB_THREADS setting.
    """
    starts = list(range(0, len(x), chunk))
    pieces = [x[s:s + chunk] for s in starts]
    threads = eval_threads()
    if threads == 1 or len(pieces) == 1:
        outs = [model.predict_logits(p) for p in pieces]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outs = list(pool.map(model.predict_logits, pieces))
    return np.concatenate(outs, axis=0)


def _model_eval_logits(model, x: np.ndarray) -> np.ndarray:
    """(N, K) or (M, N, K) logits with any dirichlet head already folded in."""
    if hasattr(model, "predict_all_member_logits"):
        logits = np.stack([batched_logits(_MemberView(model, m), x)
                           for m in range(model.members)])
    else:
        logits = batched_logits(model, x)
    if getattr(model, "head", "softmax") == "dirichlet":
        # predictive probabilities are normalized shifted concentrations;
        # log(exp(z) + 1) turns that into an ordinary softmax readout
        logits = np.log1p(np.exp(logits))
    return logits


class _MemberView:
    def __init__(self, model, m: int):
        self._model = model
        self._m = m

    def predict_logits(self, x: np.ndarray) -> np.ndarray:
        return self._model.predict_member_logits(self._m, x)


def evaluate_model(model, test, val, bins: int = 15) -> MetricsReport:
    """Full metric set for one model on one (test, val) dataset pair.

    Factored students are evaluated as the mean of member probabilities and
    additionally report the member diversity averaged over the test split.
    """
    test_logits = _model_eval_logits(model, test.x)
    val_logits = _model_eval_logits(model, val.x)
    probs = _mean_probs(test_logits, 1.0)
    acc = accuracy(probs, test.y)
    nll_sum, nll_mean, clamped = nll_with_stats(probs, test.y)
    raw_ece = ece(probs, test.y, bins)
    tau_star = fit_temperature(val_logits, val.y)
    cnll_sum, cece = calibrated_metrics(test_logits, test.y, tau_star, bins)
    mean_div = None
    if test_logits.ndim == 3:
        mean_div = diversity_from_probs(softmax_np(test_logits, 1.0))
    return MetricsReport(acc=acc, nll_sum=nll_sum, nll_mean=nll_mean, ece=raw_ece,
                         tau_star=tau_star, cnll_mean=cnll_sum / len(test.y),
                         cece=cece, n=len(test.y), bins=bins,
                         mean_div=mean_div, clamp_events=clamped)
