"""Deterministic and Stratonovich stochastic flows with their Jacobians.

The state is integrated jointly with the variational equation
``dLambda = DV0 Lambda dt + sum_i DVi Lambda o dW^i``, so every sample carries
the derivative of its flow map with respect to the initial point.

Random increments come from counter-based Philox streams keyed by
``(master_seed, sample_index)``; ensembles are processed in fixed-size chunks
and reassembled in sample order, so results do not depend on how many worker
threads were used.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .geometry import Array, VectorField, constant_field, fd_derivative

log = logging.getLogger(__name__)

#: samples per work unit; fixed so chunking never depends on the worker count
CHUNK_SIZE = 500
#: environment variable overriding the worker count
WORKERS_ENV = "STOCHFLOW_WORKERS"
#: tolerated fraction of discarded samples in an ensemble
BLOWUP_BUDGET = 0.01


class BlowUpError(RuntimeError):
    """Raised when integration produces non-finite states beyond the budget."""


@dataclass(frozen=True)
class DiffusionSpec:
    """Stratonovich SDE ``dx = V0 dt + sum_i Vi o dW^i``."""

    drift: VectorField
    diffusions: tuple = ()
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "diffusions", tuple(self.diffusions))
        for v in self.diffusions:
            if v.dim != self.drift.dim:
                raise ValueError("all fields of a diffusion must share the dimension")

    @property
    def dim(self) -> int:
        return self.drift.dim

    @property
    def k(self) -> int:
        return len(self.diffusions)

    @property
    def additive(self) -> bool:
        return all(v.constant for v in self.diffusions)

    def noise_matrix(self, x: Array, t: float) -> Array:
        """Columns ``V_1..V_k`` stacked into shape ``(..., n, k)``."""
        return np.stack([v.value(x, t) for v in self.diffusions], axis=-1)

    @classmethod
    def from_ito(cls, drift: VectorField, diffusions: Sequence[VectorField],
                 name: str = "") -> "DiffusionSpec":
        """Convert an Ito drift to Stratonovich form, ``V0 - 1/2 sum_j DVj Vj``."""
        diffusions = tuple(diffusions)

        def value(x, t):
            out = drift.value(x, t)
            for v in diffusions:
                if v.constant:
                    continue
                val, dv = v.value_and_jac(x, t)
                out = out - 0.5 * np.einsum("...ij,...j->...i", dv, val)
            return out

        if all(v.constant for v in diffusions):
            v0 = drift
        else:
            v0 = VectorField(drift.dim, value, name=f"strat({drift.name})")
        return cls(v0, diffusions, name)


def additive_noise(dim: int, scale: float, components: Optional[Sequence[int]] = None) -> tuple:
    """Fields ``scale * e_i``, one per noise component."""
    comps = range(dim) if components is None else components
    out = []
    for i in comps:
        e = np.zeros(dim)
        e[i] = scale
        out.append(constant_field(e, name=f"{scale:g}e{i}"))
    return tuple(out)


@dataclass(frozen=True)
class NoiseStream:
    """Standard normal increments for one sample, keyed by ``(master_seed, sample_index)``."""

    master_seed: int
    sample_index: int

    def generator(self) -> np.random.Generator:
        key = np.array([self.master_seed % 2**64, self.sample_index], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def normals(self, n_steps: int, k: int) -> Array:
        """Array ``(n_steps, k)``; entry ``[j, c]`` belongs to step ``j``, component ``c``."""
        return self.generator().standard_normal((n_steps, k))


@dataclass(frozen=True)
class BrownianPath:
    """Brownian increments on a uniform grid."""

    increments: Array
    h: float

    @classmethod
    def from_stream(cls, stream: NoiseStream, n_steps: int, k: int, h: float) -> "BrownianPath":
        return cls(np.sqrt(h) * stream.normals(n_steps, k), h)

    def path(self) -> Array:
        z = np.zeros((1,) + self.increments.shape[1:])
        return np.concatenate([z, np.cumsum(self.increments, axis=0)], axis=0)


def brownian_increments(master_seed: int, indices: Sequence[int], n_steps: int, k: int,
                        h: float) -> Array:
    """Increments of shape ``(n_steps, len(indices), k)`` for a block of samples."""
    out = np.empty((n_steps, len(indices), k))
    sq = np.sqrt(h)
    for col, idx in enumerate(indices):
        out[:, col, :] = sq * NoiseStream(master_seed, int(idx)).normals(n_steps, k)
    return out


@dataclass(frozen=True)
class FlowSample:
    """One realised trajectory with its flow Jacobian at every stored time."""

    x0: Array
    times: Array
    states: Array
    jacobians: Array
    seed: Optional[tuple] = None

    def __post_init__(self):
        if not np.all(np.isfinite(self.states)):
            raise BlowUpError("non-finite state in flow sample")

    @property
    def final(self) -> Array:
        return self.states[-1]

    @property
    def final_jacobian(self) -> Array:
        return self.jacobians[-1]


def n_steps_for(t0: float, t1: float, h: float) -> int:
    if h <= 0:
        raise ValueError("step size must be positive")
    if t1 < t0:
        raise ValueError("t1 must not precede t0")
    return int(round((t1 - t0) / h))


def snap_checkpoints(checkpoints: Sequence[float], t0: float, h: float) -> Array:
    """Grid indices of the requested checkpoint times."""
    return np.array([int(round((c - t0) / h)) for c in checkpoints], dtype=int)


def _identity_like(x: Array) -> Array:
    n = x.shape[-1]
    return np.broadcast_to(np.eye(n), x.shape + (n,)).copy()


def _rk4_rhs(drift: VectorField, x: Array, lam: Array, t: float) -> tuple:
    v, dv = drift.value_and_jac(x, t)
    return v, dv @ lam


def rk4_step(drift: VectorField, x: Array, lam: Array, t: float, h: float) -> tuple:
    """Classical Runge-Kutta step for ``(x, Lambda)``."""
    k1x, k1l = _rk4_rhs(drift, x, lam, t)
    k2x, k2l = _rk4_rhs(drift, x + 0.5 * h * k1x, lam + 0.5 * h * k1l, t + 0.5 * h)
    k3x, k3l = _rk4_rhs(drift, x + 0.5 * h * k2x, lam + 0.5 * h * k2l, t + 0.5 * h)
    k4x, k4l = _rk4_rhs(drift, x + h * k3x, lam + h * k3l, t + h)
    x = x + (h / 6.0) * (k1x + 2 * k2x + 2 * k3x + k4x)
    lam = lam + (h / 6.0) * (k1l + 2 * k2l + 2 * k3l + k4l)
    return x, lam


def heun_step(spec: DiffusionSpec, x: Array, lam: Array, t: float, h: float,
              dw: Optional[Array]) -> tuple:
    """Stratonovich Heun predictor-corrector step for ``(x, Lambda)``.

    ``dw`` has shape ``batch + (k,)`` broadcastable against ``x.shape[:-1]``.
    """
    a, da = spec.drift.value_and_jac(x, t)
    if spec.k == 0:
        xp = x + h * a
        lp = lam + h * (da @ lam)
        ap, dap = spec.drift.value_and_jac(xp, t + h)
        return x + 0.5 * h * (a + ap), lam + 0.5 * h * (da @ lam + dap @ lp)

    dw = np.asarray(dw)
    if spec.additive:
        g = spec.noise_matrix(np.zeros(spec.dim), t)
        kick = np.einsum("ic,...c->...i", g, dw)
        if kick.ndim < x.ndim:
            kick = kick.reshape(kick.shape[:-1] + (1,) * (x.ndim - kick.ndim) + kick.shape[-1:])
        xp = x + h * a + kick
        lp = lam + h * (da @ lam)
        ap, dap = spec.drift.value_and_jac(xp, t + h)
        return (x + 0.5 * h * (a + ap) + kick,
                lam + 0.5 * h * (da @ lam + dap @ lp))

    dws = dw.reshape(dw.shape[:-1] + (1,) * (x.ndim - dw.ndim) + dw.shape[-1:])

    def noise_terms(xx, ll, tt):
        vals, jacs = [], []
        for v in spec.diffusions:
            val, dv = v.value_and_jac(xx, tt)
            vals.append(val)
            jacs.append(dv @ ll)
        b = np.stack(vals, axis=-1)
        bl = np.stack(jacs, axis=-1)
        return (b * dws[..., None, :]).sum(-1), (bl * dws[..., None, None, :]).sum(-1)

    nx, nl = noise_terms(x, lam, t)
    xp = x + h * a + nx
    lp = lam + h * (da @ lam) + nl
    ap, dap = spec.drift.value_and_jac(xp, t + h)
    nxp, nlp = noise_terms(xp, lp, t + h)
    return (x + 0.5 * h * (a + ap) + 0.5 * (nx + nxp),
            lam + 0.5 * h * (da @ lam + dap @ lp) + 0.5 * (nl + nlp))


def iterate_sde(spec: DiffusionSpec, x0: Array, t0: float, h: float, n_steps: int,
                increments: Optional[Array] = None,
                lam0: Optional[Array] = None) -> Iterator[tuple]:
    """Yield ``(j, t_j, x_j, Lambda_j)`` for ``j = 0..n_steps``.

    ``increments`` has shape ``(n_steps,) + batch + (k,)``.
    """
    x = np.array(x0, dtype=float)
    lam = _identity_like(x) if lam0 is None else np.array(lam0, dtype=float)
    yield 0, t0, x, lam
    with np.errstate(all="ignore"):
        for j in range(n_steps):
            t = t0 + j * h
            dw = None if increments is None else increments[j]
            x, lam = heun_step(spec, x, lam, t, h, dw)
            yield j + 1, t0 + (j + 1) * h, x, lam


def integrate_ode(spec: DiffusionSpec | VectorField, x0, t0: float, t1: float, h: float,
                  store_every: int = 1) -> FlowSample:
    """RK4 integration of ``dx/dt = V0(x, t)`` together with ``Lambda``.

    ``x0`` may be a single point or a batch ``(..., n)``.
    """
    drift = spec if isinstance(spec, VectorField) else spec.drift
    if isinstance(spec, DiffusionSpec) and spec.k:
        raise ValueError("integrate_ode needs a diffusion with no noise fields")
    n_steps = n_steps_for(t0, t1, h)
    x = np.array(x0, dtype=float)
    lam = _identity_like(x)
    times, states, jacs = [t0], [x], [lam]
    with np.errstate(all="ignore"):
        for j in range(n_steps):
            x, lam = rk4_step(drift, x, lam, t0 + j * h, h)
            if not np.all(np.isfinite(x)):
                raise BlowUpError(f"non-finite state at t={t0 + (j + 1) * h:g}")
            if (j + 1) % store_every == 0 or j + 1 == n_steps:
                times.append(t0 + (j + 1) * h)
                states.append(x)
                jacs.append(lam)
    return FlowSample(np.array(x0, dtype=float), np.array(times), np.array(states),
                      np.array(jacs))


def integrate_sde(spec: DiffusionSpec, x0, t0: float, t1: float, h: float,
                  noise: Optional[NoiseStream] = None, store_every: int = 1,
                  step_cap: Optional[float] = None) -> FlowSample:
    """Heun integration of a Stratonovich SDE from ``x0`` with one noise stream.

    A batch of initial points is transported by the same Brownian path.
    """
    n_steps = n_steps_for(t0, t1, h)
    x0 = np.array(x0, dtype=float)
    incs = None
    if spec.k:
        if noise is None:
            raise ValueError("integrate_sde needs a NoiseStream for a noisy diffusion")
        incs = np.sqrt(h) * noise.normals(n_steps, spec.k)
    times, states, jacs = [], [], []
    prev = x0
    for j, t, x, lam in iterate_sde(spec, x0, t0, h, n_steps, incs):
        if not np.all(np.isfinite(x)):
            raise BlowUpError(f"non-finite state at t={t:g}")
        if step_cap is not None and np.max(np.abs(x - prev)) > step_cap:
            raise BlowUpError(f"step exceeded cap {step_cap} at t={t:g}")
        prev = x
        if j % store_every == 0 or j == n_steps:
            times.append(t)
            states.append(x)
            jacs.append(lam)
    seed = None if noise is None else (noise.master_seed, noise.sample_index)
    return FlowSample(x0, np.array(times), np.array(states), np.array(jacs), seed)


def worker_count(workers: Optional[int] = None) -> int:
    if workers is not None:
        return max(1, int(workers))
    env = os.environ.get(WORKERS_ENV)
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def map_chunks(func: Callable[[Array], dict], n_samples: int, workers: Optional[int] = None,
               chunk_size: int = CHUNK_SIZE) -> dict:
    """Apply ``func`` to consecutive index blocks and concatenate in sample order.

    ``func`` returns a dict of arrays whose leading axis runs over the block.
    """
    if n_samples < 1:
        raise ValueError("need at least one sample")
    blocks = [np.arange(s, min(s + chunk_size, n_samples))
              for s in range(0, n_samples, chunk_size)]
    nw = worker_count(workers)
    if nw == 1 or len(blocks) == 1:
        parts = [func(b) for b in blocks]
    else:
        with ThreadPoolExecutor(max_workers=nw) as pool:
            parts = list(pool.map(func, blocks))
    return {key: np.concatenate([p[key] for p in parts], axis=0) for key in parts[0]}


@dataclass
class EnsembleResult:
    """Checkpoint states and Jacobians of an ensemble, indexed by sample first."""

    times: Array
    states: Array
    jacobians: Array
    discarded: Array
    master_seed: int
    h: float
    extras: dict = field(default_factory=dict)

    @property
    def n_samples(self) -> int:
        return self.states.shape[0]

    @property
    def n_discarded(self) -> int:
        return int(self.discarded.sum())

    @property
    def kept(self) -> Array:
        return ~self.discarded


def sample_is_bad(x: Array, prev: Array, batch_ndim: int, step_cap: Optional[float]) -> Array:
    """Per-sample flag for non-finite states or oversized steps."""
    axes = tuple(range(batch_ndim, x.ndim))
    bad = ~np.all(np.isfinite(x), axis=axes)
    if step_cap is not None:
        with np.errstate(invalid="ignore"):
            bad |= np.max(np.abs(x - prev), axis=axes) > step_cap
    return bad


def ensemble(spec: DiffusionSpec, x0, n_samples: int, h: float, t1: float,
             checkpoints: Sequence[float], master_seed: int, t0: float = 0.0,
             workers: Optional[int] = None, step_cap: Optional[float] = None,
             budget: float = BLOWUP_BUDGET, chunk_size: int = CHUNK_SIZE) -> EnsembleResult:
    """Integrate ``n_samples`` independent copies of the flow from ``x0``.

    ``x0`` is a point ``(n,)`` or a probe set ``(m, n)``; all probes of one
    sample share that sample's Brownian path.  States and Jacobians are kept
    at the (grid-snapped) checkpoints only.
    """
    x0 = np.array(x0, dtype=float)
    n_steps = n_steps_for(t0, t1, h)
    idx = snap_checkpoints(checkpoints, t0, h)
    if np.any(idx < 0) or np.any(idx > n_steps):
        raise ValueError("checkpoint outside the integration interval")
    wanted = {int(j): c for c, j in enumerate(idx)}

    def run(block):
        b = len(block)
        xb = np.broadcast_to(x0, (b,) + x0.shape).copy()
        incs = None
        if spec.k:
            incs = brownian_increments(master_seed, block, n_steps, spec.k, h)
            if x0.ndim > 1:
                incs = incs.reshape((n_steps, b) + (1,) * (x0.ndim - 1) + (spec.k,))
        st = np.empty((b, len(idx)) + x0.shape)
        jc = np.empty((b, len(idx)) + x0.shape + (x0.shape[-1],))
        bad = np.zeros(b, dtype=bool)
        prev = xb
        for j, t, x, lam in iterate_sde(spec, xb, t0, h, n_steps, incs):
            bad |= sample_is_bad(x, prev, 1, step_cap)
            prev = x
            if j in wanted:
                for cc in np.nonzero(idx == j)[0]:
                    st[:, cc] = x
                    jc[:, cc] = lam
        return {"states": st, "jacobians": jc, "bad": bad}

    out = map_chunks(run, n_samples, workers, chunk_size)
    bad = out["bad"]
    check_budget(bad, budget)
    return EnsembleResult(t0 + idx * h, out["states"], out["jacobians"], bad, master_seed, h)


def check_budget(bad: Array, budget: float = BLOWUP_BUDGET) -> None:
    frac = float(np.mean(bad)) if bad.size else 0.0
    if frac > budget:
        raise BlowUpError(f"{int(bad.sum())} of {bad.size} samples blew up "
                          f"(budget {budget:.0%})")
    if bad.any():
        log.warning("discarded %d of %d samples", int(bad.sum()), bad.size)


def reversed_flow_spec(u, horizon: float) -> DiffusionSpec:
    """Diffusion ``dq = w(q, t) dt + sqrt(2 nu) dW`` with ``w(q, t) = -u(q, T - t)``.

    ``u`` is a :class:`stochflow.fieldlib.VelocityField`; its viscosity sets the
    noise amplitude.  Fresh noise is used, so the flow matches
    ``Q_{T-t} o Q_T^{-1}`` in distribution only.
    """
    from .fieldlib import reversed_field

    w = reversed_field(u, horizon)
    noise = additive_noise(u.dim, np.sqrt(2.0 * u.nu)) if u.nu > 0 else ()
    return DiffusionSpec(w, noise, name=f"reversed({u.name})")


def fd_flow_sensitivity(spec: DiffusionSpec, x0: Array, t1: float, h: float,
                        noise: Optional[NoiseStream], eps: float = 1e-5) -> Array:
    """Central-difference derivative of the time-``t1`` flow map, same noise path."""
    def endpoint(x, t):
        return integrate_sde(spec, x, 0.0, t1, h, noise, store_every=10**9).final
    return fd_derivative(endpoint, np.asarray(x0, dtype=float), 0.0, step=eps)
