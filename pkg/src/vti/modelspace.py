"""Model indices, context-to-mask layouts and the DAG (Lehmer, edge bits) encoding.

A model is a row of structural variables ``s`` with per-variable cardinalities.
Variable selection uses binary inclusion bits; DAGs use Lehmer codes followed by
strictly-upper-triangular edge bits.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
import torch

from .diffcore import DTYPE


class ModelSpace:
    """Mixed-radix product space; variable 0 is the least significant digit."""

    def __init__(self, cards: Sequence[int]):
        cards = [int(c) for c in cards]
        if not cards or min(cards) < 1:
            raise ValueError("cardinalities must be positive")
        self.cards = cards
        self.n_vars = len(cards)
        radix = [1]
        for c in cards[:-1]:
            radix.append(radix[-1] * c)
        self._radix = torch.tensor(radix, dtype=torch.long)
        self.size = int(np.prod(cards, dtype=object))

    def validate(self, s: torch.Tensor) -> torch.Tensor:
        s = torch.as_tensor(s, dtype=torch.long)
        if s.dim() == 1:
            s = s.unsqueeze(0)
        if s.shape[-1] != self.n_vars:
            raise ValueError(f"expected {self.n_vars} structural variables, got {s.shape[-1]}")
        cards = torch.tensor(self.cards)
        if (s < 0).any() or (s >= cards).any():
            raise ValueError("structural variable out of range")
        return s

    def to_index(self, s) -> torch.Tensor:
        s = self.validate(s)
        return (s * self._radix).sum(-1)

    def from_index(self, idx) -> torch.Tensor:
        idx = torch.as_tensor(idx, dtype=torch.long).reshape(-1)
        if (idx < 0).any() or (idx >= self.size).any():
            raise ValueError("model index out of range")
        cards = torch.tensor(self.cards)
        return (idx.unsqueeze(-1) // self._radix) % cards

    def enumerate(self) -> torch.Tensor:
        if self.size > 2 ** 22:
            raise ValueError(f"model space of size {self.size} is too large to enumerate")
        return self.from_index(torch.arange(self.size))


# ---------------------------------------------------------------------------
# left-align permutation


def left_align(mask: torch.Tensor) -> torch.Tensor:
    """Stable partition order placing active coordinates first (0-based indices)."""
    mask = torch.as_tensor(mask).bool()
    d = mask.shape[-1]
    key = (~mask).long() * d + torch.arange(d)
    return torch.argsort(key, dim=-1)


def invert_permutation(order: torch.Tensor) -> torch.Tensor:
    return torch.argsort(order, dim=-1)


def broadcast_mask(chi: torch.Tensor, block_sizes: Sequence[int]) -> torch.Tensor:
    """Expand per-coordinate bits to per-parameter bits C(m)."""
    chi = torch.as_tensor(chi)
    if chi.shape[-1] != len(block_sizes):
        raise ValueError("mask length does not match number of blocks")
    reps = torch.as_tensor(list(block_sizes))
    return torch.repeat_interleave(chi, reps, dim=-1)


# ---------------------------------------------------------------------------
# Lehmer codes and DAG assembly


def lehmer_decode(codes, n_nodes: int | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Decode Lehmer codes to permutation matrices.

    Column i picks the (c_i+1)-th still unused row; the last column is forced.
    Codes have N-1 entries, or N entries with a trailing zero when n_nodes=N.
    Returns (P, order) with order[b, i] the row chosen at column i.
    """
    codes = torch.as_tensor(codes, dtype=torch.long)
    if codes.dim() == 1:
        codes = codes.unsqueeze(0)
    if n_nodes is not None and codes.shape[1] == n_nodes:
        if (codes[:, -1] != 0).any():
            raise ValueError("last Lehmer code must be 0")
        codes = codes[:, :-1]
    B, k = codes.shape
    N = k + 1
    if n_nodes is not None and N != n_nodes:
        raise ValueError(f"expected {n_nodes - 1} codes, got {k}")
    limits = torch.arange(N - 1, 0, -1)
    if (codes < 0).any() or (codes > limits).any():
        raise ValueError("Lehmer code out of range")
    unused = torch.ones(B, N, dtype=torch.bool)
    order = torch.empty(B, N, dtype=torch.long)
    rows = torch.arange(B)
    for i in range(N):
        c = codes[:, i] if i < N - 1 else torch.zeros(B, dtype=torch.long)
        rank = torch.cumsum(unused.long(), dim=-1) - 1
        r = (unused & (rank == c.unsqueeze(-1))).long().argmax(-1)
        order[:, i] = r
        unused[rows, r] = False
    P = torch.zeros(B, N, N, dtype=DTYPE)
    P[rows.unsqueeze(-1), order, torch.arange(N)] = 1.0
    return P, order


def lehmer_encode(order) -> torch.Tensor:
    """Inverse of lehmer_decode on the order representation; returns N-1 codes."""
    order = torch.as_tensor(order, dtype=torch.long)
    if order.dim() == 1:
        order = order.unsqueeze(0)
    B, N = order.shape
    unused = torch.ones(B, N, dtype=torch.bool)
    rows = torch.arange(B)
    codes = torch.empty(B, N - 1, dtype=torch.long)
    for i in range(N):
        r = order[:, i]
        if i < N - 1:
            codes[:, i] = (unused & (torch.arange(N) < r.unsqueeze(-1))).sum(-1)
        unused[rows, r] = False
    return codes


def edge_bits_to_upper(bits, N: int) -> torch.Tensor:
    """Fill a strictly upper-triangular matrix row-major from N(N-1)/2 bits."""
    bits = torch.as_tensor(bits)
    if bits.dim() == 1:
        bits = bits.unsqueeze(0)
    iu = torch.triu_indices(N, N, offset=1)
    if bits.shape[-1] != iu.shape[1]:
        raise ValueError("wrong number of edge bits")
    U = torch.zeros(bits.shape[0], N, N, dtype=DTYPE)
    U[:, iu[0], iu[1]] = bits.to(DTYPE)
    return U


def assemble_dag(P: torch.Tensor, U: torch.Tensor) -> torch.Tensor:
    """A = P^T U P (batched)."""
    return P.transpose(-1, -2) @ U @ P


def sorted_nodes(order: torch.Tensor) -> torch.Tensor:
    """Canonical node sitting at each sorted position.

    With A = P^T U P, node a has sorted position order[a], so the node at sorted
    position k is the inverse permutation evaluated at k.
    """
    return invert_permutation(order)


def is_acyclic(A) -> bool:
    """Kahn's algorithm on a dense 0/1 adjacency."""
    A = np.asarray(A) > 0.5
    N = A.shape[0]
    indeg = A.sum(0).astype(int)
    stack = [i for i in range(N) if indeg[i] == 0]
    seen = 0
    while stack:
        i = stack.pop()
        seen += 1
        for j in np.nonzero(A[i])[0]:
            indeg[j] -= 1
            if indeg[j] == 0:
                stack.append(j)
    return seen == N


# ---------------------------------------------------------------------------
# layouts: structural variables -> active flow coordinates


class VariableSelectionLayout:
    """theta = (intercept?, beta_1..beta_p); models are p inclusion bits."""

    def __init__(self, p: int, intercept: bool = True):
        self.p = int(p)
        self.intercept = bool(intercept)
        self.space = ModelSpace([2] * self.p)
        self.d_max = self.p + int(self.intercept)
        self.context_dim = self.p

    def mask(self, models) -> torch.Tensor:
        s = self.space.validate(models).bool()
        if self.intercept:
            s = torch.cat([torch.ones(s.shape[0], 1, dtype=torch.bool), s], dim=-1)
        return s

    def context(self, models) -> torch.Tensor:
        return self.space.validate(models).to(DTYPE)

    def dim(self, models) -> torch.Tensor:
        return self.mask(models).sum(-1)

    def format(self, s) -> str:
        idx = int(self.space.to_index(s)[0])
        width = max(1, math.ceil(self.p / 4))
        return format(idx, f"0{width}x")

    def parse(self, text: str) -> torch.Tensor:
        return self.space.from_index(torch.tensor([int(text, 16)]))[0]


class DagLayout:
    """Per-node MLP blocks (W1, b1*k, W2, b2*k) for sorted positions 2..N."""

    def __init__(self, N: int, hidden: int, bias: bool = False):
        if N < 2:
            raise ValueError("need at least two nodes")
        self.N = int(N)
        self.h = int(hidden)
        self.bias = bool(bias)
        self.n_edges = self.N * (self.N - 1) // 2
        self.space = ModelSpace(list(range(self.N, 1, -1)) + [2] * self.n_edges)
        self.context_dim = self.N * self.N
        # block offsets per sorted position j (0-based, j parents slots)
        self.blocks = []
        off = 0
        h = self.h
        for j in range(1, self.N):
            blk = {"j": j, "W1": off}
            off += h * j
            if self.bias:
                blk["b1"] = off
                off += h
            blk["W2"] = off
            off += h
            if self.bias:
                blk["b2"] = off
                off += 1
            blk["end"] = off
            self.blocks.append(blk)
        self.d_max = off
        iu = torch.triu_indices(self.N, self.N, offset=1)
        self._iu = iu

    def split(self, models):
        s = self.space.validate(models)
        codes = s[:, : self.N - 1]
        bits = s[:, self.N - 1:]
        return codes, bits

    def structure(self, models):
        codes, bits = self.split(models)
        P, order = lehmer_decode(codes)
        U = edge_bits_to_upper(bits, self.N)
        return P, U, order

    def adjacency(self, models) -> torch.Tensor:
        P, U, _ = self.structure(models)
        return assemble_dag(P, U)

    def mask(self, models) -> torch.Tensor:
        _, U, _ = self.structure(models)
        B = U.shape[0]
        h = self.h
        chi = torch.zeros(B, self.d_max, dtype=torch.bool)
        for blk in self.blocks:
            j = blk["j"]
            pa = U[:, :j, j] > 0.5  # (B, j)
            has = pa.any(-1)
            w1 = pa.unsqueeze(1).expand(B, h, j).reshape(B, h * j)
            chi[:, blk["W1"]: blk["W1"] + h * j] = w1
            chi[:, blk["W2"]: blk["W2"] + h] = has.unsqueeze(-1)
            if self.bias:
                chi[:, blk["b1"]: blk["b1"] + h] = has.unsqueeze(-1)
                chi[:, blk["b2"]] = has
        return chi

    def context(self, models) -> torch.Tensor:
        return self.adjacency(models).reshape(-1, self.N * self.N)

    def dim(self, models) -> torch.Tensor:
        return self.mask(models).sum(-1)

    def format(self, s) -> str:
        s = self.space.validate(s)[0]
        c = ",".join(str(int(v)) for v in s[: self.N - 1])
        u = "".join(str(int(v)) for v in s[self.N - 1:])
        return f"c:{c}|u:{u}"

    def parse(self, text: str) -> torch.Tensor:
        try:
            cpart, upart = text.split("|")
            codes = [int(v) for v in cpart.removeprefix("c:").split(",") if v != ""]
            bits = [int(v) for v in upart.removeprefix("u:")]
        except ValueError as exc:
            raise ValueError(f"malformed DAG model string {text!r}") from exc
        return self.space.validate(torch.tensor(codes + bits))[0]

    def models_from_structure(self, order, U) -> torch.Tensor:
        """Inverse map from (order, U) to structural variables."""
        codes = lehmer_encode(order)
        U = torch.as_tensor(U)
        if U.dim() == 2:
            U = U.unsqueeze(0)
        bits = (U[:, self._iu[0], self._iu[1]] > 0.5).long()
        return torch.cat([codes, bits], dim=-1)
