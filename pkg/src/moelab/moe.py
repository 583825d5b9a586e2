"""Sparse Mixture-of-Experts feed-forward layer with top-1 gating.

Each token's representation is scored against every expert by a linear gate,
the scores are softmaxed into per-expert probabilities, and the token is
dispatched to the single most probable expert. The selected expert's output
is scaled by its gate probability, so gradients reach the gate weights
through that scalar factor while the argmax choice itself is non-differentiable
and treated as constant.

The layer also reports the statistics behind the load-balancing loss: the
mean gate probability per expert, the fraction of tokens each expert served,
and their scaled dot product.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, gather_pairs, gelu, scatter_rows, softmax, take_rows


@dataclass
class FeedForward:
    """Two-layer MLP d -> hidden -> d; used for dense blocks and for each expert."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w1": self.w1, f"{prefix}.b1": self.b1,
                f"{prefix}.w2": self.w2, f"{prefix}.b2": self.b2}


def ffn_forward(x: Tensor, ffn: FeedForward, gelu_variant: str = "exact") -> Tensor:
    return gelu(x @ ffn.w1 + ffn.b1, gelu_variant) @ ffn.w2 + ffn.b2


@dataclass
class MoeLayer:
    """Gate weights (n_experts x d) plus the expert feed-forward blocks."""

    gate_weight: Tensor
    experts: list[FeedForward]

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.gate": self.gate_weight}
        for i, ex in enumerate(self.experts):
            out.update(ex.named(f"{prefix}.experts.{i}"))
        return out


@dataclass
class RoutingStats:
    """Per-layer routing snapshot for one forward pass over T tokens.

    gate_probs is T x N; selected holds each token's expert index; mask is the
    one-hot form of selected. avg_gate_prob and token_fraction are the two
    length-N vectors whose scaled dot product is balance_loss.
    """

    gate_probs: np.ndarray
    selected: np.ndarray
    mask: np.ndarray
    avg_gate_prob: np.ndarray
    token_fraction: np.ndarray
    balance_loss: float = field(default=0.0)


def gate(x: Tensor, gate_weight: Tensor) -> tuple[Tensor, Tensor]:
    """Score tokens against experts: logits = x @ W^T, probs = row softmax."""
    if x.shape[-1] != gate_weight.shape[-1]:
        raise ShapeError(
            f"token width {x.shape[-1]} does not match gate weight width {gate_weight.shape[-1]}")
    logits = x @ gate_weight.transpose()
    return logits, softmax(logits, axis=-1)

def route(gate_probs) -> tuple[np.ndarray, np.ndarray]:
    """Top-1 selection per row; ties resolve to the lowest expert index."""
    probs = gate_probs.data if isinstance(gate_probs, Tensor) else np.asarray(gate_probs)
    selected = probs.argmax(axis=-1)
    mask = np.zeros_like(probs)
    mask[np.arange(probs.shape[0]), selected] = 1.0
    return selected, mask


def load_balance_stats(gate_probs, mask) -> tuple[np.ndarray, np.ndarray]:
    """Mean gate probability and routed-token fraction per expert."""
    probs = gate_probs.data if isinstance(gate_probs, Tensor) else np.asarray(gate_probs)
    mask = np.asarray(mask)
    if probs.shape != mask.shape:
        raise ShapeError(f"gate probs {probs.shape} and mask {mask.shape} disagree")
    if probs.shape[0] == 0:
        raise ValueError("load-balance statistics need at least one token")
    return probs.mean(axis=0), mask.mean(axis=0)


def aux_loss(avg_gate_prob, token_fraction) -> float:
    """Load-balancing loss: n_experts times the dot product of the two vectors.

    Equals 1.0 when both are uniform and grows toward n_experts as routing
    concentrates on fewer experts.
    """
    p = np.asarray(avg_gate_prob, dtype=np.float64)
    f = np.asarray(token_fraction, dtype=np.float64)
    if p.shape != f.shape or p.ndim != 1:
        raise ShapeError(f"expected matching vectors, got {p.shape} and {f.shape}")
    return float(len(p) * np.dot(p, f))


def moe_forward(x: Tensor, layer: MoeLayer,
                gelu_variant: str = "exact") -> tuple[Tensor, RoutingStats, Tensor]:
    """Route each of the T tokens in x (T x d) through its top-1 expert.

    Returns the combined layer output, the routing statistics, and the
    differentiable balance-loss node. The token fraction enters that node as
    a constant: only the mean gate probability carries gradient.
    """
    n_tokens = x.shape[0]
    n = layer.n_experts
    _, probs = gate(x, layer.gate_weight)
    selected, mask = route(probs)

    out = None
    for i in range(n):
        idx = np.nonzero(selected == i)[0]
        if idx.size == 0:
            continue
        expert_out = ffn_forward(take_rows(x, idx), layer.experts[i], gelu_variant)
        gated = expert_out * gather_pairs(probs, idx, np.full(idx.shape, i))
        placed = scatter_rows(gated, idx, n_tokens)
        out = placed if out is None else out + placed

    token_fraction = mask.mean(axis=0)
    avg_gate_prob = probs.mean(axis=0)  # Tensor: keeps the gate on the loss path
    balance = (avg_gate_prob * token_fraction).sum() * float(n)
    stats = RoutingStats(
        gate_probs=probs.data.copy(),
        selected=selected,
        mask=mask,
        avg_gate_prob=avg_gate_prob.data.copy(),
        token_fraction=token_fraction.copy(),
        balance_loss=balance.item(),
    )
    return out, stats, balance
