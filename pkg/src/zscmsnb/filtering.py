"""Sampling the latent presence field: single-site updates and blocked FFBS."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .model import Model, NumericalError, StateField, ValidationError

SAMPLERS = ("binary", "iffbs", "bffbs2")


@dataclass
class BlockPlan:
    """Partition of areas into state-sampling blocks.

    ``boundaries[c]`` lists the areas outside block ``c`` with a neighbor
    inside it; only their next-step transitions depend on the block.
    """

    blocks: list
    boundaries: list

    def __post_init__(self):
        self.blk_ptr = np.zeros(len(self.blocks) + 1, dtype=np.int64)
        self.blk_ptr[1:] = np.cumsum([len(b) for b in self.blocks])
        self.blk_mem = np.array([i for b in self.blocks for i in b], dtype=np.int64)
        self.bnd_ptr = np.zeros(len(self.boundaries) + 1, dtype=np.int64)
        self.bnd_ptr[1:] = np.cumsum([len(b) for b in self.boundaries])
        self.bnd_mem = np.array([i for b in self.boundaries for i in b], dtype=np.int64)
        self.max_size = max((len(b) for b in self.blocks), default=1)

    def __len__(self):
        return len(self.blocks)

    @staticmethod
    def enumeration(n):
        """All ``2**n`` state vectors in lexicographic order."""
        codes = np.arange(1 << n)
        return ((codes[:, None] >> (n - 1 - np.arange(n))) & 1).astype(np.int8)


def _boundary(graph, block):
    inside = set(block)
    out = set()
    for i in block:
        out.update(j for j in graph.adjacency[i] if j not in inside)
    return sorted(out)


def build_blocks(model: Model, block_size: int = 2, strategy: str = "greedy", include_all: bool = False) -> BlockPlan:
    """Greedy ascending-index grouping of neighboring areas into blocks.

    Areas whose states are all fixed are left out unless ``include_all``.
    """
    if strategy != "greedy":
        raise ValidationError(f"unknown blocking strategy {strategy!r}")
    if block_size < 1:
        raise ValidationError("block_size must be >= 1")
    if block_size > 2:
        warnings.warn(f"block size {block_size}: filter cost grows as 4**{block_size}", stacklevel=2)
    graph = model.graph
    fixed = model.fixed_mask()
    needs = [include_all or not fixed[i].all() for i in range(model.N)]
    assigned = [False] * model.N
    blocks = []
    for i in range(model.N):
        if not needs[i] or assigned[i]:
            continue
        block = [i]
        assigned[i] = True
        frontier = [i]
        while len(block) < block_size and frontier:
            a = frontier.pop(0)
            for j in graph.adjacency[a]:
                if len(block) >= block_size:
                    break
                if needs[j] and not assigned[j]:
                    block.append(j)
                    assigned[j] = True
                    frontier.append(j)
        blocks.append(sorted(block))
    return BlockPlan(blocks, [_boundary(graph, b) for b in blocks])


def initialize_states(model: Model, rng=None) -> StateField:
    """Presence fixed at 1 where counts are positive, 0 elsewhere.

    Initial-time states with a degenerate initial distribution are set to
    that value and fixed.
    """
    fixed = model.fixed_mask()
    S = np.zeros((model.N, model.T + 1), dtype=np.int8)
    if not model.spec.zero_inflation:
        S[:] = 1
        return StateField(S, fixed)
    S[:, 1:] = model.ypos
    S[:, 0] = (model.init.prob == 1.0)
    return StateField(S, fixed)


def padded_inputs(model: Model, v) -> dict:
    """Emission and transition arrays padded to ``T + 1`` columns."""
    N, T, E = model.N, model.T, model.graph.n_edges
    pad = lambda a, rows: np.concatenate([np.zeros((rows, 1)), np.asarray(a, float).reshape(rows, T)], axis=1)
    LE = pad(model.emission_present(v), N)
    B01, B11, P01, P11 = model.transition_inputs(v)
    return dict(
        LE=np.ascontiguousarray(LE),
        B01=np.ascontiguousarray(pad(B01, N)),
        B11=np.ascontiguousarray(pad(B11, N)),
        PHI01=np.ascontiguousarray(pad(P01, E)),
        PHI11=np.ascontiguousarray(pad(P11, E)),
        logpi0=np.ascontiguousarray(model.logpi0),
        logpi1=np.ascontiguousarray(model.logpi1),
        ypos=np.ascontiguousarray(np.concatenate([np.zeros((N, 1), bool), model.ypos], axis=1)),
    )


def _states_array(states):
    S = states.s if isinstance(states, StateField) else states
    return np.ascontiguousarray(S, dtype=np.int8)


def binary_full_conditional(model: Model, v, states, i: int, t: int, inputs=None) -> float:
    """``P(S_it = 1 | everything else)`` for a cell with ``y_it = 0``."""
    if t >= 1 and model.ypos[i, t - 1]:
        raise ValidationError(f"cell ({i}, {t}) has a positive count; its state is fixed")
    inp = inputs or padded_inputs(model, v)
    S = _states_array(states).copy()
    g = model.graph
    lw = np.empty(2)
    K.binary_logweights(i, t, S, inp["LE"], inp["logpi0"], inp["logpi1"], inp["B01"], inp["B11"],
                        inp["PHI01"], inp["PHI11"], g.indptr, g.indices, lw)
    if lw[1] == -np.inf:
        return 0.0
    if lw[0] == -np.inf:
        return 1.0
    return float(1.0 / (1.0 + np.exp(lw[0] - lw[1])))


@dataclass
class FilterResult:
    block: list
    log_filtered: np.ndarray
    log_predictive: np.ndarray
    log_transition: np.ndarray
    log_normalizer: float

    def filtered(self):
        return np.exp(self.log_filtered)

    def predictive_presence(self):
        """``(T + 1, n_c)`` one-step predictive presence probability of each member.

        Row 0 is undefined (NaN).
        """
        codes = BlockPlan.enumeration(len(self.block))
        pred = np.exp(self.log_predictive[1:])
        out = np.full((self.log_predictive.shape[0], len(self.block)), np.nan)
        out[1:] = pred @ codes
        return out


def block_forward_filter(model: Model, v, states, block, exact=False, inputs=None) -> FilterResult:
    """Forward pass for one block with the states outside it held fixed.

    With ``exact`` the emissions of forced-present cells and all times are
    evaluated in full, so the summed log normalizer equals
    ``log sum_{block paths} exp(joint_loglik)`` minus terms that do not involve
    the block.
    """
    inp = inputs or padded_inputs(model, v)
    S = _states_array(states)
    block = sorted(int(i) for i in block)
    members = np.array(block, dtype=np.int64)
    bnd = np.array(_boundary(model.graph, block), dtype=np.int64)
    ns = 1 << len(block)
    T = model.T
    F = np.empty((T + 1, ns))
    P = np.empty((T + 1, ns))
    G = np.zeros((T + 1, ns, ns))
    bpos = -np.ones(model.N, dtype=np.int64)
    bpos[members] = np.arange(len(block))
    g = model.graph
    ln = K.forward_filter(members, bnd, S, inp["ypos"], inp["LE"], inp["logpi0"], inp["logpi1"],
                          inp["B01"], inp["B11"], inp["PHI01"], inp["PHI11"], g.indptr, g.indices,
                          bpos, bool(exact), F, P, G)
    if np.isnan(ln):
        raise NumericalError(f"forward filter underflow in block {block}")
    return FilterResult(block, F, P, G, float(ln))


def block_backward_sample(states, result: FilterResult, rng) -> np.ndarray:
    """Draw the block's trajectories; writes them into ``states`` and returns them."""
    S = states.s if isinstance(states, StateField) else states
    members = np.array(result.block, dtype=np.int64)
    u = rng.random(S.shape[1])
    work = _states_array(S).copy()
    K.backward_sample(members, work, result.log_filtered, result.log_transition, u)
    S[members] = work[members]
    return S[members].copy()


def block_path_logprob(result: FilterResult, path) -> float:
    """Log-probability that backward sampling returns ``path`` (``(n_c, T + 1)``)."""
    path = np.asarray(path)
    n = len(result.block)
    weights = 1 << (n - 1 - np.arange(n))
    codes = weights @ path
    T = path.shape[1] - 1
    lp = result.log_filtered[T, codes[T]]
    for t in range(T - 1, -1, -1):
        w = result.log_transition[t + 1, :, codes[t + 1]] + result.log_filtered[t]
        m = np.max(w)
        lp += w[codes[t]] - (m + np.log(np.sum(np.exp(w - m))))
    return float(lp)


class StateSampler:
    """One state sweep per call using the configured sampler."""

    def __init__(self, model: Model, method: str = "iffbs"):
        if method not in SAMPLERS:
            raise ValidationError(f"unknown state sampler {method!r}; expected one of {SAMPLERS}")
        self.model = model
        self.method = method
        fixed = model.fixed_mask()
        self.cells = np.ascontiguousarray(np.argwhere(~fixed).astype(np.int64))
        if method != "binary":
            self.plan = build_blocks(model, 1 if method == "iffbs" else 2)
        else:
            self.plan = None

    @property
    def idle(self) -> bool:
        return self.cells.shape[0] == 0

    def sweep(self, S: np.ndarray, inputs: dict, rng) -> None:
        if self.idle:
            return
        g = self.model.graph
        inp = inputs
        if self.method == "binary":
            U = rng.random(self.cells.shape[0])
            status = K.binary_sweep(S, self.cells, inp["LE"], inp["logpi0"], inp["logpi1"], inp["B01"],
                                    inp["B11"], inp["PHI01"], inp["PHI11"], g.indptr, g.indices, U)
            if status:
                i, t = self.cells[status - 1]
                raise NumericalError(f"zero full-conditional mass at cell ({i}, {t})")
            return
        p = self.plan
        U = rng.random((len(p), S.shape[1]))
        status = K.bffbs_sweep(S, inp["ypos"], inp["LE"], inp["logpi0"], inp["logpi1"], inp["B01"], inp["B11"],
                               inp["PHI01"], inp["PHI11"], g.indptr, g.indices, p.blk_ptr, p.blk_mem,
                               p.bnd_ptr, p.bnd_mem, U, p.max_size)
        if status:
            raise NumericalError(f"forward filter underflow in block {p.blocks[status - 1]}")
