"""One-dimensional state-space primitive.

A core carries a diagonal transition stored as ``A_log`` (``A = -exp(A_log)``),
input/output maps ``B``/``C``, a step-size map producing ``dt > 0`` through
softplus, and a per-channel skip gain ``D``.

Two modes are supported:

``selective``
    ``dt``, ``B`` and ``C`` are functions of the current token
    (``B_proj``/``C_proj`` are ``[d, N]`` matrices, ``dt_proj`` an affine
    ``d -> d`` map).
``lti``
    time-invariant: ``B_proj``/``C_proj`` are fixed ``[N]`` vectors and
    ``dt_proj.bias`` (``[d]``) alone sets the step size. Only this mode has a
    convolution kernel.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, _sum_to, linear_recurrence, no_grad

SELECTIVE = "selective"
LTI = "lti"

DIVERGENCE_TOL = 1e-12


class ModeError(ValueError):
    pass


@dataclass
class SSMCore:
    A_log: Tensor
    B_proj: Tensor
    C_proj: Tensor
    dt_weight: Tensor | None
    dt_bias: Tensor
    D_skip: Tensor
    mode: str = SELECTIVE

    @property
    def state_dim(self) -> int:
        return self.A_log.shape[-1]

    @property
    def channels(self) -> int:
        return self.A_log.shape[-2]

    def parameters(self) -> dict[str, Tensor]:
        out = {"A_log": self.A_log, "B_proj": self.B_proj, "C_proj": self.C_proj}
        if self.dt_weight is not None:
            out["dt_proj.weight"] = self.dt_weight
        out["dt_proj.bias"] = self.dt_bias
        out["D_skip"] = self.D_skip
        return out

    @classmethod
    def random(cls, d: int, n: int, rng: np.random.Generator, mode: str = SELECTIVE,
               dt_min: float = 1e-3, dt_max: float = 1e-1, requires_grad: bool = True) -> "SSMCore":
        """Mamba-style initialisation: ``A = -(1..N)``, log-uniform step sizes."""
        a_log = np.log(np.tile(np.arange(1, n + 1, dtype=np.float64), (d, 1)))
        dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=d))
        dt_bias = dt + np.log(-np.expm1(-dt))  # inverse softplus
        if mode == SELECTIVE:
            bp = rng.normal(0, d ** -0.5, size=(d, n))
            cp = rng.normal(0, d ** -0.5, size=(d, n))
            dtw = rng.normal(0, d ** -0.5, size=(d, d)) * 0.1
        elif mode == LTI:
            bp = rng.normal(0, 1.0, size=n)
            cp = rng.normal(0, 1.0, size=n)
            dtw = None
        else:
            raise ModeError(f"unknown mode {mode!r}")
        t = lambda a: Tensor(a, requires_grad=requires_grad)  # noqa: E731
        return cls(t(a_log), t(bp), t(cp), None if dtw is None else t(dtw), t(dt_bias),
                   t(np.ones(d)), mode)


@dataclass
class HiddenTrajectory:
    states: np.ndarray  # [T, d, N]

    def __len__(self):
        return self.states.shape[0]


def discretize(A, B, delta):
    """Zero-order hold: ``A_bar = exp(delta * A)``, ``B_bar = delta * B``.

    Works on numpy arrays or tensors; ``delta`` must be strictly positive.
    """
    d = delta.data if isinstance(delta, Tensor) else np.asarray(delta, dtype=np.float64)
    if np.any(d <= 0):
        raise ValueError("step size must be positive")
    if isinstance(A, Tensor) or isinstance(delta, Tensor) or isinstance(B, Tensor):
        A_t = A if isinstance(A, Tensor) else Tensor(A)
        return (A_t * delta).exp(), B * delta
    A = np.asarray(A, dtype=np.float64)
    return np.exp(d * A), d * np.asarray(B, dtype=np.float64)


def selective_scan(x: Tensor, delta: Tensor, A: Tensor, Bt: Tensor, Ct: Tensor, D: Tensor):
    """Fused discretize-and-scan.

    ``x``/``delta`` are ``[..., T, d]``, ``Bt``/``Ct`` ``[..., T, N]``, ``A``
    broadcasts against ``[..., T, d, N]`` and ``D`` against ``x``. Returns the
    output tensor ``[..., T, d]`` and the hidden states ``[..., T, d, N]``.
    """
    xs, dl, a_, b_, c_, d_ = (t.data for t in (x, delta, A, Bt, Ct, D))
    if dl.shape != xs.shape:
        raise ValueError(f"step sizes {dl.shape} do not match inputs {xs.shape}")
    if b_.shape[:-1] != xs.shape[:-1] or b_.shape != c_.shape:
        raise ValueError(f"B/C steps {b_.shape}, {c_.shape} do not match inputs {xs.shape}")
    nd = xs.ndim
    T = xs.shape[-2]
    # internal layout [T, N, *lead, d]: per-step slices and the channel axis stay contiguous
    a_pad = a_.reshape((1,) * (nd + 1 - a_.ndim) + a_.shape)
    A_tm = np.ascontiguousarray(np.moveaxis(a_pad, (-3, -1), (0, 1)))
    d_pad = d_.reshape((1,) * (nd - d_.ndim) + d_.shape)
    D_tm = np.moveaxis(d_pad, -2, 0)[:, None]
    X = np.ascontiguousarray(np.moveaxis(xs, -2, 0))[:, None]
    DL = np.ascontiguousarray(np.moveaxis(dl, -2, 0))[:, None]
    Bm = np.ascontiguousarray(np.moveaxis(b_, (-2, -1), (0, 1)))[..., None]
    Cm = np.ascontiguousarray(np.moveaxis(c_, (-2, -1), (0, 1)))[..., None]
    a_bar = np.exp(DL * A_tm)
    DX = DL * X
    bx = DX * Bm
    a_bar = np.broadcast_to(a_bar, bx.shape)
    H = np.empty(bx.shape)
    h = np.zeros(bx.shape[1:])
    for t in range(T):
        h = a_bar[t] * h + bx[t]
        H[t] = h
    y_tm = (H * Cm).sum(axis=1) + (D_tm * X)[:, 0]
    y = np.moveaxis(y_tm, 0, -2)

    def fn(g):
        G = np.ascontiguousarray(np.moveaxis(g, -2, 0))[:, None]
        gC = (H * G).sum(axis=-1)
        gH = G * Cm
        dbx = np.empty(H.shape)
        carry = gH[T - 1]
        dbx[T - 1] = carry
        for t in range(T - 2, -1, -1):
            carry = gH[t] + a_bar[t + 1] * carry
            dbx[t] = carry
        g_dA = np.empty(H.shape)
        g_dA[0] = 0.0
        np.multiply(dbx[1:], H[:-1], out=g_dA[1:])
        g_dA *= a_bar
        gA_tm = _sum_to(g_dA * DL, A_tm.shape)
        g_dx = (dbx * Bm).sum(axis=1, keepdims=True)
        gB = (dbx * DX).sum(axis=-1)
        gdelta = (g_dA * A_tm).sum(axis=1, keepdims=True) + g_dx * X
        gx = g_dx * DL + G * D_tm
        gD_tm = _sum_to(G * X, D_tm.shape)
        back = lambda arr: np.moveaxis(arr[:, 0], 0, -2)  # noqa: E731
        gA = np.moveaxis(gA_tm, (0, 1), (-3, -1)).reshape(a_.shape)
        gD = np.moveaxis(gD_tm[:, 0], 0, -2).reshape(d_.shape)
        return (back(gx), back(gdelta), gA,
                np.moveaxis(gB, (0, 1), (-2, -1)), np.moveaxis(gC, (0, 1), (-2, -1)), gD)

    return Tensor._result(y, (x, delta, A, Bt, Ct, D), fn), np.moveaxis(H, (0, 1), (-3, -1))


def _projections(core: SSMCore, x: Tensor):
    A = -(core.A_log.exp())
    if core.mode == SELECTIVE:
        delta = (x @ core.dt_weight + core.dt_bias).softplus()
        Bt = x @ core.B_proj
        Ct = x @ core.C_proj
    elif core.mode == LTI:
        ones_d = Tensor(np.ones(x.shape))
        ones_n = Tensor(np.ones(x.shape[:-1] + (core.state_dim,)))
        delta = core.dt_bias.softplus() * ones_d
        Bt, Ct = core.B_proj * ones_n, core.C_proj * ones_n
    else:
        raise ModeError(f"unknown mode {core.mode!r}")
    return A, delta, Bt, Ct


def _check_input(core: SSMCore, x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim < 2 or x.shape[-1] != core.channels:
        raise ValueError(f"expected [..., T, {core.channels}] input, got {x.shape}")
    if x.shape[-2] < 1:
        raise ValueError("sequence must be non-empty")
    return x


def scan_recurrence(core: SSMCore, x) -> tuple[Tensor, HiddenTrajectory]:
    """Run ``h[t] = A_bar h[t-1] + B_bar x[t]``, ``y[t] = C h[t] + D x[t]``.

    ``x`` is ``[T, d]`` (leading batch axes are allowed); ``h[0] = 0``.
    """
    x = _check_input(core, x)
    A, delta, Bt, Ct = _projections(core, x)
    y, H = selective_scan(x, delta, A, Bt, Ct, core.D_skip)
    return y, HiddenTrajectory(H)


def scan_recurrence_reference(core: SSMCore, x) -> tuple[Tensor, HiddenTrajectory]:
    """Same map as :func:`scan_recurrence`, built from elementary tape ops."""
    x = _check_input(core, x)
    A, delta, Bt, Ct = _projections(core, x)
    dcol = delta.reshape(delta.shape + (1,))
    a_bar = (dcol * A).exp()
    bx = dcol * Bt.reshape(Bt.shape[:-1] + (1, Bt.shape[-1])) * x.reshape(x.shape + (1,))
    h = linear_recurrence(a_bar * Tensor(np.ones(bx.shape)), bx, axis=-3)
    y = (h * Ct.reshape(Ct.shape[:-1] + (1, Ct.shape[-1]))).sum(axis=-1) + core.D_skip * x
    return y, HiddenTrajectory(h.data)


def conv_kernel(core: SSMCore, length: int) -> np.ndarray:
    """Kernel ``K[c, l] = C A_bar^l B_bar`` per channel, shape ``[d, L]``."""
    if core.mode != LTI:
        raise ModeError("convolution kernel exists only for time-invariant cores")
    if length < 1:
        raise ValueError("kernel length must be >= 1")
    A = -np.exp(core.A_log.data)
    delta = _softplus_np(core.dt_bias.data)[:, None]
    a_bar, b_bar = np.exp(delta * A), delta * core.B_proj.data
    powers = a_bar[:, None, :] ** np.arange(length)[None, :, None]  # [d, L, N]
    return np.einsum("n,dln,dn->dl", core.C_proj.data, powers, b_bar)


def causal_conv(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """``y[t, c] = sum_{s<=t} K[c, t-s] x[s, c]`` for ``x[T, d]``."""
    T = x.shape[0]
    y = np.zeros_like(x)
    for t in range(T):
        y[t] = np.einsum("sd,ds->d", x[: t + 1][::-1], kernel[:, : t + 1])
    return y


def _softplus_np(a):
    return np.where(a > 20.0, a, np.log1p(np.exp(np.minimum(a, 20.0))))


def first_divergence(clean: np.ndarray, perturbed: np.ndarray, tol: float = DIVERGENCE_TOL) -> int | None:
    """First time index where two trajectories ``[T, ...]`` differ by more than ``tol``."""
    diff = np.abs(perturbed - clean).reshape(clean.shape[0], -1)
    norms = np.sqrt((diff ** 2).sum(axis=1))
    hits = np.flatnonzero(norms > tol)
    return int(hits[0]) if hits.size else None


def artifact_divergence(core: SSMCore, x, t_eps: int, eps) -> int | None:
    """Index where injecting ``eps`` at step ``t_eps`` first moves the hidden state.

    Indices are zero-based. Returns ``None`` if the perturbation never registers.
    """
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if not 0 <= t_eps < x.shape[0]:
        raise IndexError(f"t_eps={t_eps} outside [0, {x.shape[0]})")
    eps = np.asarray(eps, dtype=np.float64)
    if not np.any(eps):
        raise ValueError("perturbation must be non-zero")
    xp = x.copy()
    xp[t_eps] += eps
    with no_grad():
        _, clean = scan_recurrence(core, Tensor(x))
        _, pert = scan_recurrence(core, Tensor(xp))
    return first_divergence(clean.states, pert.states)
