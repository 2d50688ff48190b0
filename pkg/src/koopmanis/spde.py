"""Spectral Galerkin simulation of the stochastic advection-diffusion equation.

The field v(t, x) on [0, 1] with Dirichlet boundaries is expanded in the
orthonormal sine basis e_k(x) = sqrt(2) sin(k pi x).  The diffusive part is
diagonal in this basis and integrated exactly; the advection term b v_x is
treated through the nonlinearity slot of an exponential Euler recurrence.
Space-time white noise enters mode-by-mode with the exact Ito-isometry
variance of the stochastically integrated linear flow.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError, NumericalError
from .paths import _block_ranges, adjust_steps, derive_path_rng


@dataclass(eq=False)
class SpectralSpde:
    """Discretized advection-diffusion operator data on N sine modes."""

    n_modes: int
    alpha: float
    b: float
    eps_noise: float
    lam: np.ndarray          # (N,) diffusive rates alpha k^2 pi^2
    coupling: np.ndarray     # (N, N) projection of b d/dx onto the sine basis
    adjoint_w1: np.ndarray   # (N,) leading adjoint eigenvector, unit norm
    mu1: float               # leading decay rate of the full operator

    @property
    def drift_matrix(self) -> np.ndarray:
        return -np.diag(self.lam) + self.coupling

    @property
    def quad_scale(self) -> float:
        """Scale making kappa*<Y, w1>^2 - 1 an exact eigenfunctional."""
        return 2.0 * self.mu1 / (self.eps_noise * float(self.adjoint_w1 @ self.adjoint_w1))


def _coupling_matrix(n_modes: int, b: float) -> np.ndarray:
    k = np.arange(1, n_modes + 1)
    j = k[:, None]
    kk = k[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        D = 4.0 * b * j * kk / (j * j - kk * kk)
    D[(j + kk) % 2 == 0] = 0.0
    np.fill_diagonal(D, 0.0)
    return D


def spectral_setup(n_modes: int, alpha: float, b: float,
                   eps_noise: float) -> SpectralSpde:
    """Assemble mode rates, the advection coupling and the adjoint data.

    The analytic coupling entries are cross-checked against high-order
    quadrature of <b e_k', e_j> at assembly time.
    """
    if n_modes < 2:
        raise InvalidParameterError("n_modes must be >= 2")
    if alpha <= 0:
        raise InvalidParameterError("diffusivity alpha must be positive")
    if eps_noise < 0:
        raise InvalidParameterError("noise intensity must be nonnegative")
    k = np.arange(1, n_modes + 1)
    lam = alpha * (k * math.pi) ** 2
    D = _coupling_matrix(n_modes, b)

    # quadrature cross-check: D[j,k] = 2 b pi k * int_0^1 sin(j pi x) cos(k pi x) dx
    nodes, wts = np.polynomial.legendre.leggauss(max(512, 8 * n_modes))
    x = 0.5 * (nodes + 1.0)
    w = 0.5 * wts
    S = np.sin(np.outer(k, math.pi * x))          # (N, q)
    C = np.cos(np.outer(k, math.pi * x)) * w      # (N, q) weighted
    D_quad = 2.0 * b * math.pi * (S @ C.T) * k[None, :]
    if not np.allclose(D, D_quad, atol=1e-8):
        raise NumericalError("advection coupling failed quadrature cross-check")

    M_t = (-np.diag(lam) + D).T
    vals, vecs = np.linalg.eig(M_t)
    lead = int(np.argmax(vals.real))
    mu1 = -float(vals[lead].real)
    w1 = vecs[:, lead]
    if np.abs(w1.imag).max() > 1e-10 * np.abs(w1).max():
        raise NumericalError("leading adjoint eigenvector is not real")
    w1 = w1.real
    w1 = w1 / np.linalg.norm(w1)
    nz = np.nonzero(np.abs(w1) > 1e-12)[0][0]
    if w1[nz] < 0:
        w1 = -w1
    resid = np.linalg.norm(M_t @ w1 + mu1 * w1)
    if resid > 1e-6:
        raise NumericalError(f"adjoint eigenpair residual {resid:.2e} too large")
    return SpectralSpde(n_modes, alpha, b, eps_noise, lam, D, w1, mu1)


def noise_std(spde: SpectralSpde, dt: float) -> np.ndarray:
    """Per-mode std of the exactly integrated noise over one step."""
    lam = spde.lam
    return np.sqrt(spde.eps_noise * (1.0 - np.exp(-2.0 * lam * dt)) / (2.0 * lam))


def qwiener_increment(spde: SpectralSpde, dt: float,
                      rng: np.random.Generator) -> np.ndarray:
    """Draw one vector of per-mode noise increments for a single step."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    return noise_std(spde, dt) * rng.standard_normal(spde.n_modes)


def exp_euler_step(spde: SpectralSpde, Y, u_val, dt, noise) -> np.ndarray:
    """Advance mode coefficients one step of the exponential Euler recurrence.

    The control (if any) enters through the same slot as the advection
    term, scaled by sqrt(eps_noise) to match the diffusion operator.
    """
    Y = np.asarray(Y, dtype=float)
    lam = spde.lam
    decay = np.exp(-lam * dt)
    fac = (1.0 - decay) / lam
    F = Y @ spde.coupling.T if Y.ndim > 1 else spde.coupling @ Y
    if u_val is not None:
        F = F + math.sqrt(spde.eps_noise) * np.asarray(u_val, dtype=float)
    out = decay * Y + fac * F + noise
    if not np.all(np.isfinite(out)):
        from .errors import PathBlowupError
        raise PathBlowupError(-1, "non-finite SPDE coefficients")
    return out


def l2_norm(Y) -> float | np.ndarray:
    """L2 norm of the reconstructed field; Parseval on the orthonormal basis."""
    Y = np.asarray(Y, dtype=float)
    return np.sqrt((Y * Y).sum(axis=-1))


def reconstruct_field(Y, grid_points: int = 256):
    """Evaluate the field on a uniform grid from its sine coefficients."""
    Y = np.asarray(Y, dtype=float)
    x = np.linspace(0.0, 1.0, grid_points)
    k = np.arange(1, Y.shape[-1] + 1)
    E = math.sqrt(2.0) * np.sin(np.outer(x, k) * math.pi)
    return x, Y @ E.T


class SpdeController:
    """Biasing built from the constant and the leading quadratic functional.

    The value surrogate is  f0 + f2 * exp(-2 mu1 (T - t)) * phi2(Y)  with
    phi2(Y) = kappa <Y, w1>^2 - 1, an exact eigenfunctional of the
    discretized generator with decay rate 2 mu1.
    """

    def __init__(self, spde: SpectralSpde, f0: float, f2: float, T: float,
                 multiplier: float = 1.0, floor: float = 1e-12):
        self.spde = spde
        self.f0 = float(f0)
        self.f2 = float(f2)
        self.horizon = float(T)
        self.multiplier = float(multiplier)
        self.floor = float(floor)
        self.floor_activations = 0

    def with_multiplier(self, c: float) -> "SpdeController":
        return SpdeController(self.spde, self.f0, self.f2, self.horizon,
                              multiplier=c, floor=self.floor)

    @property
    def n_eigenfunctions(self) -> int:
        return 2

    def phi2(self, Y):
        q = np.asarray(Y, dtype=float) @ self.spde.adjoint_w1
        return self.spde.quad_scale * q * q - 1.0

    def value_grad_batch(self, t, Y):
        if t < -1e-12 or t > self.horizon + 1e-12:
            raise ValueError("t outside [0, T]")
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        w1 = self.spde.adjoint_w1
        q = Y @ w1
        decay = math.exp(-2.0 * self.spde.mu1 * (self.horizon - t))
        val = self.f0 + self.f2 * decay * (self.spde.quad_scale * q * q - 1.0)
        coef = self.f2 * decay * 2.0 * self.spde.quad_scale * q
        return val, np.multiply.outer(coef, w1)

    def kbe_value_grad(self, t, y):
        val, grad = self.value_grad_batch(t, np.asarray(y, float)[None, :])
        return float(val[0]), grad[0]

    def bias_batch(self, t, Y):
        val, grad = self.value_grad_batch(t, Y)
        floored = val < self.floor
        nf = int(np.count_nonzero(floored))
        denom = np.maximum(val, self.floor)
        scale = self.multiplier * math.sqrt(self.spde.eps_noise)
        u = scale * grad / denom[:, None]
        return u, nf

    def bias(self, t, Y):
        u, nf = self.bias_batch(t, np.asarray(Y, dtype=float)[None, :])
        self.floor_activations += nf
        return u[0]

    def to_dict(self) -> dict:
        return {"type": "spde", "f0": self.f0, "f2": self.f2,
                "T": self.horizon, "multiplier": self.multiplier,
                "floor": self.floor,
                "spde": {"n_modes": self.spde.n_modes,
                         "alpha": self.spde.alpha, "b": self.spde.b,
                         "eps_noise": self.spde.eps_noise}}

    @classmethod
    def from_dict(cls, data: dict) -> "SpdeController":
        sp = data["spde"]
        spde = spectral_setup(sp["n_modes"], sp["alpha"], sp["b"],
                              sp["eps_noise"])
        return cls(spde, data["f0"], data["f2"], data["T"],
                   data["multiplier"], data["floor"])


def spde_bias(spde: SpectralSpde, doob_coefficients, c, t, T, Y,
              floor: float = 1e-12):
    """Biasing vector for given (constant, quadratic) coefficients."""
    f0, f2 = doob_coefficients
    ctrl = SpdeController(spde, f0, f2, T, multiplier=c, floor=floor)
    return ctrl.bias(t, Y)


def build_spde_controller(spde: SpectralSpde, snapshots, event, T,
                          multiplier: float = 1.0) -> SpdeController:
    """Fit the mollified event indicator onto {1, phi2} over mode snapshots.

    Mirrors the generic regression + positivization flow but with the
    two-functional family evaluated directly in mode coordinates.
    """
    snapshots = np.atleast_2d(np.asarray(snapshots, dtype=float))
    q = snapshots @ spde.adjoint_w1
    phi2 = spde.quad_scale * q * q - 1.0
    C = np.stack([np.ones(len(snapshots)), phi2], axis=1)
    F = event.mollified(snapshots)
    coeffs, *_ = np.linalg.lstsq(C, F, rcond=None)
    fitted = C @ coeffs
    scale = float(np.max(np.abs(fitted))) if len(fitted) else 1.0
    margin = 1e-6 * scale
    lo = float(fitted.min())
    if lo < margin:
        coeffs[0] += max(-lo, 0.0) + margin
    return SpdeController(spde, coeffs[0], coeffs[1], T,
                          multiplier=multiplier, floor=1e-8 * scale)


def _run_spde_block(spde, controller, obs, Y0, K, dt, master_seed,
                    start, stop):
    B = stop - start
    N = spde.n_modes
    sqdt = math.sqrt(dt)
    decay = np.exp(-spde.lam * dt)
    fac = (1.0 - decay) / spde.lam
    sig = noise_std(spde, dt)
    sqeps = math.sqrt(spde.eps_noise)
    gens = [derive_path_rng(master_seed, i) for i in range(start, stop)]
    Y = np.tile(np.asarray(Y0, dtype=float), (B, 1))
    logw = np.zeros(B)
    blown = np.zeros(B, dtype=bool)
    floor_count = 0
    chunk_steps = max(1, 4_000_000 // max(1, B * N))
    k = 0
    while k < K:
        kc = min(chunk_steps, K - k)
        xi_chunk = np.stack([g.standard_normal((kc, N)) for g in gens])
        for j in range(kc):
            xi = xi_chunk[:, j, :]
            F = Y @ spde.coupling.T
            if controller is not None:
                u, nf = controller.bias_batch((k + j) * dt, Y)
                floor_count += nf
                logw -= (u * xi).sum(axis=1) * sqdt + 0.5 * (u * u).sum(axis=1) * dt
                F = F + sqeps * u
            Y = decay * Y + fac * F + sig * xi
            bad = ~np.isfinite(Y).all(axis=1)
            newly = bad & ~blown
            if newly.any():
                blown |= newly
                Y[newly] = 0.0
        k += kc
    return Y, logw, blown, floor_count


def run_spde_paths(spde, controller, obs, Y0, T, dt, M, master_seed,
                   block_size=2048, workers=1):
    """Ensemble of SPDE mode paths; same determinism contract as run_paths."""
    from .paths import PathEnsemble

    K, dt = adjust_steps(T, dt)
    N = spde.n_modes
    terminal = np.empty((M, N))
    log_weight = np.empty(M)
    blown = np.empty(M, dtype=bool)
    floor_total = 0
    ranges = _block_ranges(M, block_size)

    def work(rng_pair):
        s, e = rng_pair
        return _run_spde_block(spde, controller, obs, Y0, K, dt,
                               master_seed, s, e)

    if workers > 1 and len(ranges) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, ranges))
    else:
        results = [work(rg) for rg in ranges]
    for (s, e), (YT, lw, bl, fc) in zip(ranges, results):
        terminal[s:e] = YT
        log_weight[s:e] = lw
        blown[s:e] = bl
        floor_total += fc
    in_event = np.zeros(M, dtype=bool)
    if obs is not None:
        ok = ~blown
        if ok.any():
            in_event[ok] = obs.indicator(terminal[ok]).astype(bool)
    return PathEnsemble(terminal, log_weight, in_event, blown,
                        floor_total, [], K, dt)


def generate_mode_snapshots(spde, amplitudes, T_traj, stride, seed, dt=1e-3):
    """Unbiased mode trajectories started along the adjoint direction.

    One trajectory per requested amplitude a, started at a * w1; states are
    recorded every `stride` time units including t = 0.  Used as the point
    set for fitting the terminal observable in mode space.
    """
    K, dt = adjust_steps(T_traj, dt) if T_traj > 0 else (0, dt)
    step_per = max(1, int(round(stride / dt))) if T_traj > 0 else 1
    snaps = []
    for idx, a in enumerate(np.asarray(amplitudes, dtype=float)):
        rng = derive_path_rng(seed, idx)
        Y = a * spde.adjoint_w1
        snaps.append(Y.copy())
        decay = np.exp(-spde.lam * dt)
        fac = (1.0 - decay) / spde.lam
        sig = noise_std(spde, dt)
        for k in range(K):
            xi = rng.standard_normal(spde.n_modes)
            Y = decay * Y + fac * (spde.coupling @ Y) + sig * xi
            if (k + 1) % step_per == 0:
                snaps.append(Y.copy())
    return np.array(snaps)
