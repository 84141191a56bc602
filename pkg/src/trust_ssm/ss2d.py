"""Four-directional 2D scan over a patch grid.

Directions:

* ``a`` row-major, left to right then top to bottom
* ``b`` column-major, top to bottom then left to right
* ``c`` reverse of ``a``
* ``d`` reverse of ``b``

A :class:`Permutation` routes direction sequences to the four branch
parameter slots: slot ``k`` scans the sequence of direction ``ordering[k]``.
The merged grid is always summed in direction order ``a, b, c, d`` so that
results do not depend on which slot produced which direction.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .autodiff import Tensor, stack
from .ssm import SELECTIVE, SSMCore, scan_recurrence

DIRECTIONS = ("a", "b", "c", "d")
CORE_FIELDS = ("A_log", "B_proj", "C_proj", "dt_proj.weight", "dt_proj.bias", "D_skip")


@dataclass(frozen=True, order=True)
class Permutation:
    ordering: tuple[str, ...]

    def __post_init__(self):
        ordering = tuple(self.ordering)
        if sorted(ordering) != list(DIRECTIONS):
            raise ValueError(f"malformed permutation {self.ordering!r}: need each of a,b,c,d once")
        object.__setattr__(self, "ordering", ordering)

    @classmethod
    def parse(cls, text: str) -> "Permutation":
        return cls(tuple(text.strip().lower()))

    @property
    def name(self) -> str:
        return "".join(self.ordering)

    @property
    def indices(self) -> np.ndarray:
        """Direction index scanned by each slot."""
        return np.array([DIRECTIONS.index(s) for s in self.ordering])

    @property
    def slot_of_direction(self) -> np.ndarray:
        return np.argsort(self.indices)

    def compose(self, other: "Permutation") -> "Permutation":
        """Routing obtained by applying ``other`` then ``self`` to slot order."""
        return Permutation(tuple(other.ordering[DIRECTIONS.index(s)] for s in self.ordering))

    @property
    def is_identity(self) -> bool:
        return self.ordering == DIRECTIONS

    def __str__(self):
        return self.name


IDENTITY = Permutation(DIRECTIONS)


def all_permutations() -> list[Permutation]:
    """All 24 routings in lexicographic order (identity first)."""
    return [Permutation(p) for p in itertools.permutations(DIRECTIONS)]


@lru_cache(maxsize=None)
def scan_orders(h: int, w: int) -> np.ndarray:
    """``orders[j, t]`` = row-major grid index visited at step ``t`` in direction ``j``."""
    grid = np.arange(h * w).reshape(h, w)
    a = grid.reshape(-1)
    b = grid.T.reshape(-1)
    orders = np.stack([a, b, a[::-1], b[::-1]])
    orders.setflags(write=False)
    return orders


@lru_cache(maxsize=None)
def index_maps(h: int, w: int) -> np.ndarray:
    """``maps[j, p]`` = time step at which direction ``j`` visits grid index ``p``."""
    maps = np.argsort(scan_orders(h, w), axis=1)
    maps.setflags(write=False)
    return maps


def cross_scan(grid) -> tuple[dict[str, Tensor], dict[str, np.ndarray]]:
    """Split an ``[H, W, d]`` grid (optionally batched) into the four sequences.

    Returns ``(sequences, index_maps)`` keyed by direction.
    """
    grid = grid if isinstance(grid, Tensor) else Tensor(grid)
    h, w, d = grid.shape[-3:]
    flat = grid.reshape(grid.shape[:-3] + (h * w, d))
    orders, maps = scan_orders(h, w), index_maps(h, w)
    seqs = {s: flat.take(orders[j], axis=-2) for j, s in enumerate(DIRECTIONS)}
    return seqs, {s: maps[j] for j, s in enumerate(DIRECTIONS)}


def uncross(seq: Tensor, direction: str, h: int, w: int) -> Tensor:
    """Inverse of :func:`cross_scan` for one direction; returns ``[..., H, W, d]``."""
    j = DIRECTIONS.index(direction)
    flat = seq.take(index_maps(h, w)[j], axis=-2)
    return flat.reshape(seq.shape[:-2] + (h, w, seq.shape[-1]))


def route(perm: Permutation, seqs: dict) -> list:
    """Slot ``k`` receives ``seqs[perm.ordering[k]]``."""
    if not isinstance(perm, Permutation):
        perm = Permutation(tuple(perm))
    missing = set(DIRECTIONS) - set(seqs)
    if missing:
        raise ValueError(f"missing direction sequences: {sorted(missing)}")
    return [seqs[s] for s in perm.ordering]


def stack_cores(cores: list[dict[str, Tensor]], lead: int = 1) -> SSMCore:
    """Stack four branch parameter dicts into one core broadcastable over ``[4, *lead, T, d]``."""
    def st(name, extra):
        s = stack([c[name] for c in cores])
        return s.reshape((s.shape[0],) + (1,) * extra + s.shape[1:])

    return SSMCore(
        A_log=st("A_log", lead + 1),
        B_proj=st("B_proj", lead),
        C_proj=st("C_proj", lead),
        dt_weight=st("dt_proj.weight", lead),
        dt_bias=st("dt_proj.bias", lead + 1),
        D_skip=st("D_skip", lead + 1),
        mode=SELECTIVE,
    )


def selective_scan_grid(u: Tensor, cores: list[dict[str, Tensor]], perm: Permutation,
                        return_states: bool = False):
    """Cross-scan ``u[B, H, W, d]``, scan each slot with its core, cross-merge.

    Returns the merged ``[B, H, W, d]`` grid (and the ``[4, B, T, d, N]``
    hidden states in slot order when ``return_states``).
    """
    bsz, h, w, d = u.shape
    T = h * w
    flat = u.reshape(bsz, T, d)
    orders = scan_orders(h, w)[perm.indices]  # [4, T] in slot order
    seqs = flat.take(orders, axis=1).transpose(1, 0, 2, 3)  # [4, B, T, d]
    core = stack_cores(cores, lead=1)
    ys, traj = scan_recurrence(core, seqs)  # [4, B, T, d]
    maps = index_maps(h, w)
    merged = None
    for j in range(4):
        slot = int(perm.slot_of_direction[j])
        grid = ys[slot].take(maps[j], axis=1)  # back to row-major [B, T, d]
        merged = grid if merged is None else merged + grid
    merged = merged.reshape(bsz, h, w, d)
    if return_states:
        return merged, traj.states
    return merged


def ss2d_forward(x: Tensor, params: dict[str, Tensor], perm: Permutation = IDENTITY,
                 prefix: str = "", return_states: bool = False):
    """Gated SS2D mixer on ``x[B, H, W, d]`` (a lone ``[H, W, d]`` grid is also accepted).

    ``params`` holds ``in_proj`` (``[d, 2*di]``), ``out_proj`` (``[di, d]``) and
    ``cores.{k}.*`` for slots 0..3, all under ``prefix``.
    """
    single = x.ndim == 3
    if single:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 4:
        raise ValueError(f"expected [B, H, W, d] input, got {x.shape}")
    w_in = params[prefix + "in_proj"]
    if x.shape[-1] != w_in.shape[0]:
        raise ValueError(f"input channels {x.shape[-1]} != in_proj rows {w_in.shape[0]}")
    di = w_in.shape[1] // 2
    xz = x @ w_in
    xs = xz[..., :di].silu()
    z = xz[..., di:]
    cores = [{f: params[f"{prefix}cores.{k}.{f}"] for f in CORE_FIELDS} for k in range(4)]
    res = selective_scan_grid(xs, cores, perm, return_states=return_states)
    y, states = res if return_states else (res, None)
    out = (y * z.silu()) @ params[prefix + "out_proj"]
    if single:
        out = out[0]
    return (out, states) if return_states else out


def init_ss2d_params(d: int, d_inner: int, n: int, rng: np.random.Generator,
                     prefix: str = "") -> dict[str, Tensor]:
    params = {
        prefix + "in_proj": Tensor(rng.normal(0, d ** -0.5, size=(d, 2 * d_inner)), requires_grad=True),
    }
    for k in range(4):
        core = SSMCore.random(d_inner, n, rng)
        for f, t in core.parameters().items():
            params[f"{prefix}cores.{k}.{f}"] = t
    params[prefix + "out_proj"] = Tensor(rng.normal(0, d_inner ** -0.5, size=(d_inner, d)), requires_grad=True)
    return params
