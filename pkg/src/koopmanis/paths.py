"""Simulation of uncontrolled and controlled SDE paths.

Every path owns a deterministic noise stream derived from (master_seed,
path_index), so ensembles are reproducible bit-for-bit regardless of how
paths are partitioned into blocks or spread over worker threads.  The
Girsanov log-weight is accumulated alongside the state using the same
noise increments that drive the path.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import PathBlowupError, ShapeError, UnsupportedSchemeError

_MASK64 = (1 << 64) - 1

SCHEMES = ("euler_maruyama", "srk_additive")


def derive_path_rng(master_seed: int, path_index: int) -> np.random.Generator:
    """Return the noise stream owned by one path.

    Streams are keyed (counter-based Philox), so the stream for a given
    (seed, index) pair never depends on how many other paths exist or in
    which order they are simulated.
    """
    key = np.array(
        [master_seed & _MASK64, path_index & _MASK64], dtype=np.uint64
    )
    return np.random.Generator(np.random.Philox(key=key))


def adjust_steps(T: float, dt: float) -> tuple[int, float]:
    """Number of steps and the (possibly shrunk) step size covering [0, T].

    If T/dt is not an integer the step count is rounded up and dt reduced
    so the horizon is hit exactly.
    """
    if T <= 0 or dt <= 0:
        raise ValueError("T and dt must be positive")
    K = max(1, int(math.ceil(T / dt - 1e-9)))
    return K, T / K


def default_scheme(model) -> str:
    return "srk_additive" if model.diffusion_const is not None else "euler_maruyama"


def _check_scheme(model, scheme):
    if scheme not in SCHEMES:
        raise UnsupportedSchemeError(f"unknown scheme {scheme!r}")
    if scheme == "srk_additive" and model.diffusion_const is None:
        raise UnsupportedSchemeError(
            "srk_additive requires state-independent diffusion"
        )


def _apply_diffusion(model, x, v):
    """B(x) @ v for a batch of states x (B_, d) and vectors v (B_, r)."""
    if model.diffusion_const is not None:
        return v @ model.diffusion_const.T
    B = model.diffusion(x)  # (B_, d, r)
    return np.einsum("bdr,br->bd", B, v)


def integrate_step(model, scheme, x, u_val, dt, xi):
    """One step of the controlled system with drift A(x) + B(x) u_val.

    The control is held fixed at its left-endpoint value through the step;
    srk_additive is a two-stage scheme of weak order 2 on additive-noise
    models (Heun average of the drift, shared Brownian increment).
    """
    _check_scheme(model, scheme)
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    if x.shape != (model.dim_state,) or xi.shape != (model.dim_noise,):
        raise ShapeError(
            f"expected state ({model.dim_state},) and noise ({model.dim_noise},)"
        )
    xb = x[None, :]
    ub = None if u_val is None else np.asarray(u_val, dtype=float)[None, :]
    out = _step_block(model, scheme, xb, ub, dt, xi[None, :])
    return out[0]


def _step_block(model, scheme, x, u, dt, xi):
    a = model.drift(x)
    incr = _apply_diffusion(model, x, xi) * math.sqrt(dt)
    if u is not None:
        incr = incr + _apply_diffusion(model, x, u) * dt
    if scheme == "euler_maruyama":
        return x + a * dt + incr
    pred = x + a * dt + incr
    return x + 0.5 * dt * (a + model.drift(pred)) + incr


@dataclass
class PathResult:
    terminal_state: np.ndarray
    log_weight: float
    in_event: bool
    path_index: int
    trajectory: list | None = None


@dataclass
class PathEnsemble:
    """Raw per-path output of a simulated ensemble, in path-index order."""

    terminal: np.ndarray          # (M, d)
    log_weight: np.ndarray        # (M,)
    in_event: np.ndarray          # (M,) bool, False for blown paths
    blown: np.ndarray             # (M,) bool
    floor_count: int = 0
    trajectories: list = field(default_factory=list)
    K: int = 0
    dt: float = 0.0


def simulate_path(model, controller, obs, x0, T, dt, scheme=None,
                  rng=None, master_seed=0, path_index=0,
                  trajectory_stride=None) -> PathResult:
    """Simulate a single path; reference implementation of the block engine.

    Raises PathBlowupError (with the offending step index) if the state
    leaves the finite region.
    """
    scheme = scheme or default_scheme(model)
    _check_scheme(model, scheme)
    if controller is not None and abs(controller.horizon - T) > 1e-12:
        raise ValueError("controller horizon does not match requested T")
    if rng is None:
        rng = derive_path_rng(master_seed, path_index)
    K, dt = adjust_steps(T, dt)
    sqdt = math.sqrt(dt)
    x = np.array(x0, dtype=float)
    if x.shape != (model.dim_state,):
        raise ShapeError("x0 has wrong dimension")
    logw = 0.0
    traj = None
    if trajectory_stride is not None:
        traj = [(0.0, x.copy())]
    for k in range(K):
        t = k * dt
        xi = rng.standard_normal(model.dim_noise)
        if controller is not None:
            u = controller.bias(t, x)
            logw -= float(u @ xi) * sqdt + 0.5 * float(u @ u) * dt
        else:
            u = None
        with np.errstate(over="ignore", invalid="ignore"):
            x = integrate_step(model, scheme, x, u, dt, xi)
        if not np.all(np.isfinite(x)):
            raise PathBlowupError(k)
        if traj is not None and ((k + 1) % trajectory_stride == 0 or k == K - 1):
            traj.append(((k + 1) * dt, x.copy()))
    in_event = bool(obs.indicator(x)) if obs is not None else False
    return PathResult(x, logw, in_event, path_index, traj)


def _block_ranges(M, block_size):
    return [(s, min(s + block_size, M)) for s in range(0, M, block_size)]


def _run_block(model, controller, obs, x0, K, dt, scheme, master_seed,
               start, stop, traj_count, traj_stride):
    B = stop - start
    r = model.dim_noise
    sqdt = math.sqrt(dt)
    gens = [derive_path_rng(master_seed, i) for i in range(start, stop)]
    x = np.tile(np.asarray(x0, dtype=float), (B, 1))
    logw = np.zeros(B)
    blown = np.zeros(B, dtype=bool)
    floor_count = 0

    rows = []
    rec = None
    if traj_count > start:
        rec = min(traj_count, stop) - start  # first `rec` paths of this block
        for j in range(rec):
            rows.append((start + j, 0.0, x[j].copy()))

    # noise is pre-drawn per path in time-ordered chunks so each stream is
    # consumed identically no matter the chunking
    chunk_steps = max(1, 4_000_000 // max(1, B * r))
    k = 0
    while k < K:
        kc = min(chunk_steps, K - k)
        xi_chunk = np.stack([g.standard_normal((kc, r)) for g in gens])
        for j in range(kc):
            xi = xi_chunk[:, j, :]
            t = (k + j) * dt
            if controller is not None:
                u, nf = controller.bias_batch(t, x)
                floor_count += nf
                logw -= (u * xi).sum(axis=1) * sqdt + 0.5 * (u * u).sum(axis=1) * dt
            else:
                u = None
            with np.errstate(over="ignore", invalid="ignore"):
                x = _step_block(model, scheme, x, u, dt, xi)
            bad = ~np.isfinite(x).all(axis=1)
            newly = bad & ~blown
            if newly.any():
                blown |= newly
                x[newly] = 0.0  # frozen; excluded from every estimate
            if rec:
                kk = k + j + 1
                if kk % traj_stride == 0 or kk == K:
                    for jj in range(rec):
                        rows.append((start + jj, kk * dt, x[jj].copy()))
        k += kc
    return x, logw, blown, floor_count, rows


def run_paths(model, controller, obs, x0, T, dt, scheme=None, M=1,
              master_seed=0, block_size=8192, workers=1,
              trajectory_count=0, trajectory_stride=None) -> PathEnsemble:
    """Simulate M paths and collect terminal states and Girsanov weights.

    Paths are partitioned into blocks that may run on worker threads; the
    result arrays are always assembled in path-index order and are
    bit-identical for any block size or worker count.
    """
    scheme = scheme or default_scheme(model)
    _check_scheme(model, scheme)
    K, dt = adjust_steps(T, dt)
    if trajectory_count and not trajectory_stride:
        trajectory_stride = max(1, K // 200)
    d = model.dim_state
    terminal = np.empty((M, d))
    log_weight = np.empty(M)
    blown = np.empty(M, dtype=bool)
    floor_total = 0
    all_rows = []

    ranges = _block_ranges(M, block_size)

    def work(rng_pair):
        s, e = rng_pair
        return _run_block(model, controller, obs, x0, K, dt, scheme,
                          master_seed, s, e, trajectory_count,
                          trajectory_stride or 1)

    if workers > 1 and len(ranges) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, ranges))
    else:
        results = [work(rg) for rg in ranges]

    for (s, e), (xT, lw, bl, fc, rows) in zip(ranges, results):
        terminal[s:e] = xT
        log_weight[s:e] = lw
        blown[s:e] = bl
        floor_total += fc
        all_rows.extend(rows)

    in_event = np.zeros(M, dtype=bool)
    if obs is not None:
        ok = ~blown
        if ok.any():
            in_event[ok] = obs.indicator(terminal[ok]).astype(bool)
    all_rows.sort(key=lambda rw: (rw[0], rw[1]))
    return PathEnsemble(terminal, log_weight, in_event, blown,
                        floor_total, all_rows, K, dt)
