"""Mixture-of-experts layer: softmax gating, top-2 routing, weighted
combination, the load-balancing auxiliary loss, and over-capacity statistics.

Each frame is scored by a linear gate and forwarded through the two experts
with the highest gate probabilities; their outputs are summed with the raw
softmax weights (no renormalization over the selected pair). Selection
indices are constants under differentiation; the gate probabilities stay on
the graph, so routing remains trainable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ParameterError
from .tensor import Tensor


@dataclass
class RoutingDecision:
    """Per-frame top-2 selections plus the batch aggregates the losses need.

    ``top2_idx[s]`` holds the two selected expert ids in descending gate
    order; ``top2_gates`` the matching probabilities (graph tensors).
    ``counts[i]`` is how many frames selected expert i in either slot, so
    ``counts.sum() == 2 * num_frames``. ``gates`` is the full (frames x
    experts) probability matrix; its column means are the differentiable
    load signal.
    """

    top2_idx: np.ndarray
    top2_gates: Tensor
    gates: Tensor
    counts: np.ndarray
    num_frames: int

    @property
    def num_experts(self) -> int:
        return int(self.gates.shape[-1])

    @property
    def mean_gates(self) -> np.ndarray:
        return self.gates.data.mean(axis=0)

    @property
    def load_fractions(self) -> np.ndarray:
        return self.counts / max(self.num_frames, 1)


@dataclass
class CapacityStats:
    """Per-expert fraction of frames routed above the capacity threshold."""

    ratios: np.ndarray
    threshold: float
    num_frames: int


class ExpertFFN:
    """One expert: two linear maps with a swish between."""

    def __init__(self, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor):
        self.w1, self.b1, self.w2, self.b2 = w1, b1, w2, b2

    def forward(self, x: Tensor) -> Tensor:
        return T.matmul(T.swish(T.matmul(x, self.w1) + self.b1), self.w2) + self.b2

    def parameters(self):
        yield "w1", self.w1
        yield "b1", self.b1
        yield "w2", self.w2
        yield "b2", self.b2


class MoELayer:
    """Gate matrix plus identically shaped expert feed-forward networks."""

    def __init__(self, gate_w: Tensor, experts: list[ExpertFFN]):
        if len(experts) < 2:
            raise ConfigError("top-2 routing needs at least 2 experts")
        self.gate_w = gate_w
        self.experts = experts
        # frames pushed through expert FFNs since the last reset; the
        # activated-parameter contract keeps this at exactly 2 per frame
        self.evaluations = 0

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    @property
    def model_dim(self) -> int:
        return int(self.gate_w.shape[0])

    def parameters(self):
        yield "gate_w", self.gate_w
        for i, expert in enumerate(self.experts):
            for name, p in expert.parameters():
                yield f"expert{i}.{name}", p

    def reset_evaluations(self) -> None:
        self.evaluations = 0

    def gate(self, x: Tensor) -> Tensor:
        """Per-frame probability over experts: softmax of the gate projection."""
        if x.ndim != 2 or x.shape[1] != self.model_dim:
            raise ParameterError(
                f"gate: expected (frames, {self.model_dim}) input, got {x.shape}"
            )
        return T.softmax(T.matmul(x, self.gate_w), axis=1)

    def forward(self, x: Tensor) -> tuple[Tensor, RoutingDecision]:
        """Route each frame through its two selected experts only.

        Frames are gathered per expert, run through that expert's FFN in one
        batch, scaled by their gate probability, and scattered back; experts
        that no frame selected never execute (and receive no gradient).
        """
        gates = self.gate(x)
        decision = route_top2(gates)
        frames = decision.num_frames
        y: Tensor | None = None
        for i in range(self.num_experts):
            rows = np.nonzero(
                (decision.top2_idx[:, 0] == i) | (decision.top2_idx[:, 1] == i)
            )[0]
            if rows.size == 0:
                continue
            self.evaluations += int(rows.size)
            out = self.experts[i].forward(T.take_rows(x, rows))
            weight = T.reshape(T.take_entries(gates, rows, np.full(rows.size, i)), (-1, 1))
            contribution = T.scatter_rows(out * weight, rows, frames)
            y = contribution if y is None else y + contribution
        if y is None:  # zero frames
            y = T.Tensor(np.zeros_like(x.data))
        return y, decision

    def forward_dense(self, x: Tensor) -> tuple[Tensor, RoutingDecision]:
        """Dense execution: every expert runs on every frame; contributions of
        non-selected experts are zeroed. Numerically equal to ``forward`` and
        used when the layer degenerates to a dense mixture (2 experts)."""
        gates = self.gate(x)
        decision = route_top2(gates)
        selected = np.zeros((decision.num_frames, self.num_experts), dtype=x.dtype)
        np.put_along_axis(selected, decision.top2_idx, 1.0, axis=1)
        y: Tensor | None = None
        for i in range(self.num_experts):
            self.evaluations += decision.num_frames
            out = self.experts[i].forward(x)
            weight = T.slice_axis(gates, 1, i, i + 1) * Tensor(selected[:, i : i + 1])
            term = out * weight
            y = term if y is None else y + term
        assert y is not None
        return y, decision


def route_top2(gates: Tensor) -> RoutingDecision:
    """Select the two largest gates per frame; ties break to the lower index."""
    if gates.ndim != 2:
        raise ParameterError(f"route_top2: expected (frames, experts), got {gates.shape}")
    num_frames, num_experts = gates.shape
    if num_experts < 2:
        raise ConfigError("route_top2: need at least 2 experts")
    # stable argsort of the negated gates = descending order, lowest index first on ties
    idx = np.argsort(-gates.data, axis=1, kind="stable")[:, :2].astype(np.int64)
    rows = np.arange(num_frames, dtype=np.int64)
    flat_rows = np.repeat(rows, 2)
    top2_gates = T.reshape(T.take_entries(gates, flat_rows, idx.reshape(-1)), (num_frames, 2))
    counts = np.bincount(idx.reshape(-1), minlength=num_experts).astype(np.int64)
    return RoutingDecision(
        top2_idx=idx,
        top2_gates=top2_gates,
        gates=gates,
        counts=counts,
        num_frames=num_frames,
    )


def combine(decision: RoutingDecision, expert_outputs: tuple[Tensor, Tensor]) -> Tensor:
    """Weighted sum of the two selected experts' outputs with raw gate weights."""
    first, second = expert_outputs
    if first.shape != second.shape:
        raise ParameterError(
            f"combine: expert outputs disagree, {first.shape} vs {second.shape}"
        )
    if first.shape[0] != decision.num_frames:
        raise ParameterError(
            f"combine: outputs cover {first.shape[0]} frames, decision has "
            f"{decision.num_frames}"
        )
    g1 = T.slice_axis(decision.top2_gates, 1, 0, 1)
    g2 = T.slice_axis(decision.top2_gates, 1, 1, 2)
    return first * g1 + second * g2


def aux_load_balance_loss(decision: RoutingDecision) -> Tensor:
    """Load-balancing penalty: mean over experts of (selection fraction) x
    (mean gate probability).

    The selection counts are constants under differentiation; the gradient
    flows through the mean gate values, which approximate the squared load.
    Uniform routing gives the minimum 2/N^2; total collapse gives 1/N.
    """
    if decision.num_frames == 0:
        raise ParameterError("aux_load_balance_loss: decision covers zero frames")
    n = decision.num_experts
    fractions = decision.counts.astype(decision.gates.dtype) / decision.num_frames
    mean_gates = T.mean(decision.gates, axis=0)
    return T.sum_(mean_gates * Tensor(fractions)) / n


def over_capacity_ratio(decision: RoutingDecision, capacity_factor: float = 1.0) -> CapacityStats:
    """Fraction of the batch routed to each expert beyond its fair share.

    The threshold is ``capacity_factor * 2S/N`` selections (each of S frames
    makes two); the ratio is the excess over that threshold per frame.
    """
    if capacity_factor <= 0:
        raise ParameterError("capacity_factor must be positive")
    s = decision.num_frames
    n = decision.num_experts
    threshold = capacity_factor * 2.0 * s / n
    ratios = np.maximum(0.0, decision.counts - threshold) / max(s, 1)
    return CapacityStats(ratios=ratios, threshold=threshold, num_frames=s)


def moe_forward(x: Tensor, layer: MoELayer) -> tuple[Tensor, RoutingDecision]:
    """Full pipeline: gate, top-2 route, run only the selected experts, combine."""
    return layer.forward(x)


def routing_records(layer_index: int, decision: RoutingDecision,
                    capacity_factor: float = 1.0) -> list[str]:
    """Line-delimited routing statistics, one record per expert."""
    stats = over_capacity_ratio(decision, capacity_factor)
    mean_gates = decision.mean_gates
    lines = []
    for i in range(decision.num_experts):
        lines.append(
            f"layer={layer_index} expert={i} count={int(decision.counts[i])} "
            f"mean_gate={mean_gates[i]:.6f} overcap={stats.ratios[i]:.6f}"
        )
    return lines
