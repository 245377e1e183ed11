"""Loss-landscape analysis along the line through two subnetwork parameters.

For a two-member factored student the line is
theta_t = (1-t) (shared ∘ r1 s1^T) + t (shared ∘ r2 s2^T), biases likewise.
The scan reports train/test error and test NLL over a t grid and the train
loss barrier: the worst excess of the interpolated train cross-entropy over
the endpoint losses, floored at zero. Cross-entropy to labels stands in for
the (unavailable post hoc) distillation objective when quantifying barriers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .data import Dataset
from .metrics import (accuracy, batched_logits, nll_with_stats,
                      pairwise_divergence_values, softmax_np)
from .nets import BEDenseLayer, BEMLP, DenseLayer, MLP, ModelSpec, average_rank_one


def default_grid() -> np.ndarray:
    """41 nominal points over [-0.25, 1.25] with 0, 0.5 and 1 forced exact.

    Nominal linspace points landing within 1e-9 of a forced value are
    replaced by it; the others are inserted, so the grid stays strictly
    increasing and contains the three anchors bit-exactly.
    """
    base = list(np.linspace(-0.25, 1.25, 41))
    for anchor in (0.0, 0.5, 1.0):
        base = [t for t in base if abs(t - anchor) > 1e-9]
        base.append(anchor)
    return np.array(sorted(base))


@dataclass
class LineScan:
    ts: np.ndarray
    train_err: np.ndarray
    test_err: np.ndarray
    test_nll: np.ndarray     # per-sample mean
    train_loss: np.ndarray   # mean cross-entropy, used for the barrier
    barrier: float


def _require_two_members(model: BEMLP) -> None:
    if not isinstance(model, BEMLP) or model.members != 2:
        raise ValueError("line analysis requires a factored student with M=2")


def interpolate(model: BEMLP, t: float) -> MLP:
    """Plain network at position t on the member-1 / member-2 line."""
    _require_two_members(model)
    layers = []
    for l in model.layers:
        w0 = l.shared.data * np.outer(l.r[0].data, l.s[0].data)
        w1 = l.shared.data * np.outer(l.r[1].data, l.s[1].data)
        w = (1.0 - t) * w0 + t * w1
        b = (1.0 - t) * l.bias[0].data + t * l.bias[1].data
        layers.append(DenseLayer(Tensor(w, requires_grad=True),
                                 Tensor(b, requires_grad=True)))
    return MLP(model.spec.as_plain(), layers)


def _eval_point(net: MLP, train: Dataset, test: Dataset) -> tuple[float, float, float, float]:
    train_probs = softmax_np(batched_logits(net, train.x))
    test_probs = softmax_np(batched_logits(net, test.x))
    train_err = 1.0 - accuracy(train_probs, train.y)
    test_err = 1.0 - accuracy(test_probs, test.y)
    test_nll_mean = nll_with_stats(test_probs, test.y)[1]
    train_loss = nll_with_stats(train_probs, train.y)[1]
    return train_err, test_err, test_nll_mean, train_loss


def line_scan(model: BEMLP, train: Dataset, test: Dataset,
              grid: np.ndarray | None = None) -> LineScan:
    """Evaluate the member line on a t grid and quantify the train barrier."""
    _require_two_members(model)
    ts = default_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    if np.any(np.diff(ts) <= 0):
        raise ValueError("grid must be strictly increasing")
    for anchor in (0.0, 0.5, 1.0):
        if not np.any(ts == anchor):
            raise ValueError(f"grid must contain t={anchor} exactly")
    rows = [_eval_point(interpolate(model, float(t)), train, test) for t in ts]
    arr = np.array(rows)
    train_loss = arr[:, 3]
    inside = (ts >= 0.0) & (ts <= 1.0)
    end_losses = max(train_loss[ts == 0.0][0], train_loss[ts == 1.0][0])
    barrier = max(0.0, float(train_loss[inside].max() - end_losses))
    return LineScan(ts=ts, train_err=arr[:, 0], test_err=arr[:, 1],
                    test_nll=arr[:, 2], train_loss=train_loss, barrier=barrier)


def pairwise_barriers(model: BEMLP, train: Dataset, test: Dataset) -> dict:
    """Barriers of every member pair for M > 2; reports the max.

    This extends the two-member line picture to all M(M-1)/2 pairs and is
    labeled as such in the returned record.
    """
    members = model.members
    out: dict = {"pairs": {}, "note": "max over member-pair barriers (M>2 extension)"}
    worst = 0.0
    for i in range(members):
        for j in range(i + 1, members):
            pair = _member_pair_view(model, i, j)
            b = line_scan(pair, train, test).barrier
            out["pairs"][f"{i}-{j}"] = b
            worst = max(worst, b)
    out["max_barrier"] = worst
    return out


def _member_pair_view(model: BEMLP, i: int, j: int) -> BEMLP:
    spec = ModelSpec(model.spec.in_dim, model.spec.num_classes, model.spec.hidden,
                     model.spec.activation, "batch_ensemble", 2)
    layers = []
    for l in model.layers:
        layers.append(BEDenseLayer(l.shared, [l.r[i], l.r[j]], [l.s[i], l.s[j]],
                                   [l.bias[i], l.bias[j]]))
    return BEMLP(spec, layers)


@dataclass
class EndpointTrace:
    """Periodic record of member diversity and averaged-student test NLL.

    Pass ``hook`` as the step hook of a distillation loop; rows accumulate as
    (step, div_train, div_test, avg_test_nll).
    """

    train: Dataset
    test: Dataset
    every: int
    rows: list[tuple[int, float, float, float]] = field(default_factory=list)

    def hook(self, step: int, student: BEMLP) -> None:
        if step % self.every != 0:
            return
        self.record(step, student)

    def record(self, step: int, student: BEMLP) -> None:
        div_train = _member_diversity(student, self.train.x)
        div_test = _member_diversity(student, self.test.x)
        averaged = average_rank_one(student)
        probs = softmax_np(batched_logits(averaged, self.test.x))
        avg_nll = nll_with_stats(probs, self.test.y)[1]
        self.rows.append((step, div_train, div_test, avg_nll))


def _member_diversity(student: BEMLP, x: np.ndarray) -> float:
    probs = softmax_np(student.predict_all_member_logits(x))
    return float(pairwise_divergence_values(probs).mean())
