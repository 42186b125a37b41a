"""Example systems: a circle, two torus orbits, and Kuramoto-Sivashinsky regimes.

The KS equation ``u_t + u u_x + u_xx + nu u_xxxx = 0`` on ``[0, 2pi)`` is solved
pseudo-spectrally: Crank-Nicolson on the linear terms, two-step Adams-Bashforth
on ``-(u^2)_x / 2``, with a single classical RK4 step to start the multistep
scheme. The nonlinear product is dealiased with the 2/3 rule (an addition of
this package; switch it off with ``KsConfig(dealias=False)``).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .dataset import Dataset

# ---------------------------------------------------------------------------
# circle and torus


def gen_circle(n: int = 40) -> Dataset:
    """``n`` counterclockwise points on the unit circle, successor wrapping around."""
    if n < 2:
        raise ValueError("need at least two points")
    theta = 2 * np.pi * np.arange(n) / n
    pts = np.column_stack([np.cos(theta), np.sin(theta)])
    return Dataset.from_series(pts, periodic=True, meta={"system": "circle", "n": n})


def torus_point(theta, phi) -> np.ndarray:
    """Torus embedding used for both torus datasets.

    ``x = (1 + cos(theta)/2) cos(phi)``, ``y = (1 + sin(theta)/2) sin(phi)``,
    ``z = sin(theta)/2``. The ``sin(theta)`` in ``y`` departs from the textbook
    torus (which has ``cos(theta)`` there); it is kept deliberately because it
    defines the dataset.
    """
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    x = (1.0 + 0.5 * np.cos(theta)) * np.cos(phi)
    y = (1.0 + 0.5 * np.sin(theta)) * np.sin(phi)
    z = 0.5 * np.sin(theta)
    return np.stack([x, y, z], axis=-1)


def gen_torus_periodic(n: int = 100) -> Dataset:
    """One period of an orbit winding three times poloidally per toroidal turn."""
    phi = 2 * np.pi * np.arange(n) / n
    pts = torus_point(3 * phi, phi)
    return Dataset.from_series(pts, periodic=True, meta={"system": "torus_periodic", "n": n})


TORUS_QP_DPHI = 3 * np.pi / 100


def gen_torus_quasiperiodic(n: int = 1000) -> Dataset:
    """Quasiperiodic orbit with poloidal/toroidal speed ratio sqrt(3)."""
    phi = TORUS_QP_DPHI * np.arange(n + 1)
    pts = torus_point(np.sqrt(3) * phi, phi)
    return Dataset.from_series(pts, meta={"system": "torus_quasiperiodic", "n": n})


def _torus_branches(P: np.ndarray, refine: int):
    """Both ``cos(theta)`` branches, each refined; arrays of shape (2, N)."""
    x, y, z = P[:, 0], P[:, 1], P[:, 2]
    s = np.clip(2 * z, -1.0, 1.0)
    out = []
    for sign in (1.0, -1.0):
        c = sign * np.sqrt(1.0 - s**2)
        th = np.arctan2(s, c)
        ph = np.arctan2(y / (1.0 + 0.5 * s), x / (1.0 + 0.5 * c))
        res = np.linalg.norm(torus_point(th, ph) - P, axis=1)
        for _ in range(refine):
            # damped Gauss-Newton, a step is kept only where it lowers the residual
            r = torus_point(th, ph) - P
            st, ct, sp, cp = np.sin(th), np.cos(th), np.sin(ph), np.cos(ph)
            j_th = np.stack([-0.5 * st * cp, 0.5 * ct * sp, 0.5 * ct], axis=1)
            j_ph = np.stack([-(1 + 0.5 * ct) * sp, (1 + 0.5 * st) * cp, np.zeros_like(th)], axis=1)
            a11 = (j_th * j_th).sum(1) + 1e-6
            a12 = (j_th * j_ph).sum(1)
            a22 = (j_ph * j_ph).sum(1) + 1e-6
            b1 = (j_th * r).sum(1)
            b2 = (j_ph * r).sum(1)
            det = a11 * a22 - a12**2
            th_new = th - (a22 * b1 - a12 * b2) / det
            ph_new = ph - (a11 * b2 - a12 * b1) / det
            res_new = np.linalg.norm(torus_point(th_new, ph_new) - P, axis=1)
            take = res_new < res
            th = np.where(take, th_new, th)
            ph = np.where(take, ph_new, ph)
            res = np.where(take, res_new, res)
        out.append((th, ph, res))
    th, ph, res = (np.stack(v) for v in zip(*out))
    return np.mod(th, 2 * np.pi), np.mod(ph, 2 * np.pi), res


def torus_angles(points, tol: float = 0.1, refine: int = 8):
    """Recover ``(theta, phi)`` from points on (or near) the torus.

    ``theta`` comes from ``atan2`` of the height and the radial offset; the
    sign of ``cos(theta)`` is the branch with the smaller residual, followed by
    a few damped Gauss-Newton iterations. Points farther than ``tol`` from the
    surface raise ``ValueError``. Where ``cos(phi) = 0`` the embedding maps
    ``theta`` and ``pi - theta`` to the same point; use ``track_torus_angles``
    for ordered trajectories.
    """
    P = np.atleast_2d(np.asarray(points, dtype=np.float64))
    th, ph, res = _torus_branches(P, refine)
    k = np.argmin(res, axis=0)
    idx = np.arange(P.shape[0])
    th, ph, res = th[k, idx], ph[k, idx], res[k, idx]
    if np.any(res > tol):
        raise ValueError(f"{int((res > tol).sum())} points lie more than {tol} from the torus surface")
    return th, ph, res


def track_torus_angles(points, tol: float = 0.1, refine: int = 8, slack: float = 0.05):
    """Angles along an ordered trajectory, resolving the fold by continuity.

    When the two branches fit within ``slack`` of each other, the one whose
    ``theta`` is closer to the previous ``theta`` advanced by the previous
    increment wins; otherwise the better fit wins.
    """
    P = np.atleast_2d(np.asarray(points, dtype=np.float64))
    TH, PH, RES = _torus_branches(P, refine)
    n = P.shape[0]
    k = np.argmin(RES, axis=0)
    ambiguous = np.abs(RES[0] - RES[1]) < slack
    th = np.empty(n)
    th[0] = TH[k[0], 0]
    step = 0.0
    for t in range(1, n):
        if ambiguous[t]:
            guess = th[t - 1] + step
            gap = np.abs(np.angle(np.exp(1j * (TH[:, t] - guess))))
            k[t] = int(np.argmin(gap))
        th[t] = TH[k[t], t]
        step = float(np.angle(np.exp(1j * (th[t] - th[t - 1]))))
    idx = np.arange(n)
    ph, res = PH[k, idx], RES[k, idx]
    if np.any(res > tol):
        raise ValueError(f"{int((res > tol).sum())} points lie more than {tol} from the torus surface")
    return th, ph, res


# ---------------------------------------------------------------------------
# Kuramoto-Sivashinsky


class KsInstability(RuntimeError):
    def __init__(self, step: int):
        self.step = step
        super().__init__(f"KS solution blew up at step {step}")


@dataclass(frozen=True)
class KsConfig:
    nu: float
    n_modes: int = 64
    dt: float = 1e-4
    dealias: bool = True
    nonlinear: bool = True  # off only for testing the linear part

    def __post_init__(self):
        if self.n_modes < 4 or self.n_modes % 2:
            raise ValueError("n_modes must be an even integer >= 4")
        if self.dt <= 0 or self.nu <= 0:
            raise ValueError("dt and nu must be positive")

    @property
    def grid(self) -> np.ndarray:
        return 2 * np.pi * np.arange(self.n_modes) / self.n_modes


BLOWUP = 1e6


class KsSolver:
    def __init__(self, config: KsConfig):
        self.config = config
        n = config.n_modes
        k = np.arange(n // 2 + 1, dtype=np.float64)
        self.k = k
        self.lin = k**2 - config.nu * k**4
        if config.dealias:
            mask = k < n / 3.0
        else:
            mask = k < n / 2  # derivative of the Nyquist mode is not real; drop it
        self.nl_factor = np.where(mask, -0.5j * k, 0.0)
        h = config.dt
        self.cn_plus = 1.0 + 0.5 * h * self.lin
        self.cn_inv = 1.0 / (1.0 - 0.5 * h * self.lin)

    def nonlinear(self, v: np.ndarray) -> np.ndarray:
        if not self.config.nonlinear:
            return np.zeros_like(v)
        u = np.fft.irfft(v, n=self.config.n_modes)
        return self.nl_factor * np.fft.rfft(u * u)

    def rhs(self, v):
        return self.lin * v + self.nonlinear(v)

    def rk4_step(self, v):
        h = self.config.dt
        k1 = self.rhs(v)
        k2 = self.rhs(v + 0.5 * h * k1)
        k3 = self.rhs(v + 0.5 * h * k2)
        k4 = self.rhs(v + h * k3)
        return v + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)

    def simulate(self, u0, n_steps: int, store_every: int = 1, raise_on_blowup: bool = True,
                 check_every: int = 1000) -> np.ndarray:
        """Fields after every ``store_every`` steps, starting with ``u0`` itself.

        ``u0`` may be one field or a batch of rows. Returns an array of shape
        ``(n_steps // store_every + 1, *u0.shape)``.
        """
        n = self.config.n_modes
        u0 = np.asarray(u0, dtype=np.float64)
        if u0.shape[-1] != n:
            raise ValueError(f"field has {u0.shape[-1]} points, solver uses {n}")
        if n_steps < 0 or store_every < 1:
            raise ValueError("n_steps >= 0 and store_every >= 1 required")
        h = self.config.dt
        n_store = n_steps // store_every + 1
        out = np.empty((n_store,) + u0.shape)
        out[0] = u0
        v = np.fft.rfft(u0)
        if n_steps == 0:
            return out
        nl_prev = self.nonlinear(v)
        v = self.rk4_step(v)
        cn_plus, cn_inv, nl = self.cn_plus, self.cn_inv, self.nonlinear
        irfft = np.fft.irfft
        with np.errstate(over="ignore", invalid="ignore"):
            for step in range(1, n_steps + 1):
                if step > 1:
                    nl_now = nl(v)
                    v = (cn_plus * v + h * (1.5 * nl_now - 0.5 * nl_prev)) * cn_inv
                    nl_prev = nl_now
                if step % store_every == 0:
                    out[step // store_every] = irfft(v, n=n)
                if raise_on_blowup and (step % check_every == 0 or step == n_steps):
                    peak = np.abs(v).max() * 2.0 / n
                    if not np.isfinite(peak) or peak > BLOWUP:
                        raise KsInstability(step)
        return out


def ks_simulate(config: KsConfig, u0, n_steps: int, store_every: int = 1, **kw) -> np.ndarray:
    return KsSolver(config).simulate(u0, n_steps, store_every, **kw)


def ks_default_initial(n_modes: int = 64) -> np.ndarray:
    """``-sin x + 2 cos 2x + 3 cos 3x - 4 sin 4x`` on the grid."""
    x = 2 * np.pi * np.arange(n_modes) / n_modes
    return -np.sin(x) + 2 * np.cos(2 * x) + 3 * np.cos(3 * x) - 4 * np.sin(4 * x)


def _steps(time: float, dt: float) -> int:
    s = time / dt
    r = int(round(s))
    if abs(s - r) > 1e-6 * max(1.0, s):
        raise ValueError(f"time {time} is not a whole number of steps of {dt}")
    return r


KS_REGIMES = {
    "ks_beating": dict(nu=16 / 337, sample_spacing=0.01, n_samples=100, transient_time=50.0),
    "ks_beating_travelling": dict(nu=4 / 87, sample_spacing=0.01, n_samples=100, transient_time=150.0),
    "ks_bursting": dict(nu=16 / 71, sample_spacing=0.05, n_samples=6565, transient_time=200.0),
}


def ks_series(nu: float, sample_spacing: float, n_samples: int, transient_time: float,
              n_modes: int = 64, dt: float = 1e-4, u0=None) -> np.ndarray:
    """``n_samples + 1`` post-transient fields, ``sample_spacing`` apart."""
    cfg = KsConfig(nu=nu, n_modes=n_modes, dt=dt)
    every = _steps(sample_spacing, dt)
    skip = _steps(transient_time, sample_spacing)
    u0 = ks_default_initial(n_modes) if u0 is None else u0
    fields = ks_simulate(cfg, u0, (skip + n_samples) * every, every)
    return fields[skip:]


def gen_ks_dataset(nu: float, sample_spacing: float, n_samples: int, transient_time: float,
                   n_modes: int = 64, dt: float = 1e-4, u0=None) -> Dataset:
    series = ks_series(nu, sample_spacing, n_samples, transient_time, n_modes, dt, u0)
    meta = {"system": "ks", "nu": nu, "n_modes": n_modes, "solver_dt": dt,
            "transient_time": transient_time}
    return Dataset.from_series(series, dt=sample_spacing, meta=meta)


BURST_AMPLITUDE = 0.05


def bursting_perturbations(n: int, n_modes: int, seed: int, amplitude: float = BURST_AMPLITUDE):
    """Random ``a1 cos 2x + a2 cos x + a3 sin x`` with ``a_i ~ U[-amplitude, amplitude]``."""
    rng = np.random.default_rng(seed)
    a = rng.uniform(-amplitude, amplitude, size=(n, 3))
    x = 2 * np.pi * np.arange(n_modes) / n_modes
    fields = a[:, :1] * np.cos(2 * x) + a[:, 1:2] * np.cos(x) + a[:, 2:3] * np.sin(x)
    return fields, a


def gen_bursting_dynamics_dataset(autoencoder_dataset: Dataset, seed: int, nu: float = 16 / 71,
                                  stride: int = 3, run_time: float = 1.5, keep_time: float = 1.0,
                                  sample_spacing: float = 0.05, dt: float = 1e-4,
                                  amplitude: float = BURST_AMPLITUDE) -> Dataset:
    """Short perturbed runs from every ``stride``-th field of the bursting data.

    Each run lasts ``run_time``; the final ``keep_time`` is sampled every
    ``sample_spacing`` and consecutive samples of the same run form the pairs.
    Runs that blow up are dropped with a warning.
    """
    starts = autoencoder_dataset.points[::stride]
    n_modes = starts.shape[1]
    pert, _ = bursting_perturbations(starts.shape[0], n_modes, seed, amplitude)
    cfg = KsConfig(nu=nu, n_modes=n_modes, dt=dt)
    every = _steps(sample_spacing, dt)
    total = _steps(run_time, sample_spacing)
    kept = _steps(keep_time, sample_spacing) + 1
    runs = KsSolver(cfg).simulate(starts + pert, total * every, every, raise_on_blowup=False)
    runs = runs[-kept:]  # (kept, n_runs, n_modes)
    ok = np.all(np.isfinite(runs), axis=(0, 2)) & (np.abs(runs).max(axis=(0, 2)) < BLOWUP)
    if not ok.all():
        warnings.warn(f"{int((~ok).sum())} perturbed runs blew up and were skipped")
    runs = runs[:, ok]
    points = runs[:-1].transpose(1, 0, 2).reshape(-1, n_modes)
    succ = runs[1:].transpose(1, 0, 2).reshape(-1, n_modes)
    meta = {"system": "ks_bursting_dynamics", "nu": nu, "seed": seed, "n_runs": int(ok.sum()),
            "n_skipped": int((~ok).sum()), "samples_per_run": kept}
    return Dataset(points, succ, sample_spacing, meta)


# ---------------------------------------------------------------------------
# shape / phase


@dataclass
class ShapePhase:
    shape: np.ndarray
    phase: np.ndarray | float


def shape_phase_split(u, eps: float = 1e-12) -> ShapePhase:
    """Factor a field into a translation phase and a phase-aligned shape.

    ``phase = arg(u_hat[1])``, so ``cos(x - a)`` has phase ``-a``. The shape is
    ``u`` rotated in Fourier space until its first mode is real and positive.
    Works row-wise on a batch; the Nyquist mode is assumed to vanish.
    """
    u = np.asarray(u, dtype=np.float64)
    n = u.shape[-1]
    uh = np.fft.rfft(u, axis=-1)
    if np.any(np.abs(uh[..., 1]) <= eps * max(1.0, float(np.abs(uh).max()))):
        raise ValueError("first Fourier mode vanishes; phase is undefined")
    phase = np.angle(uh[..., 1])
    k = np.arange(uh.shape[-1])
    shape = np.fft.irfft(uh * np.exp(-1j * k * np.asarray(phase)[..., None]), n=n, axis=-1)
    return ShapePhase(shape, phase if u.ndim > 1 else float(phase))


def shape_phase_reconstruct(shape, phase) -> np.ndarray:
    shape = np.asarray(shape, dtype=np.float64)
    n = shape.shape[-1]
    sh = np.fft.rfft(shape, axis=-1)
    k = np.arange(sh.shape[-1])
    return np.fft.irfft(sh * np.exp(1j * k * np.asarray(phase)[..., None]), n=n, axis=-1)


def shape_phase_series(fields) -> ShapePhase:
    """Split a time series, unwrapping the phase so consecutive jumps stay below pi."""
    sp = shape_phase_split(np.atleast_2d(fields))
    return ShapePhase(sp.shape, np.unwrap(np.asarray(sp.phase)))


def fourier_mode(u, k: int) -> np.ndarray:
    """Complex amplitude of mode ``k`` normalised so ``cos(kx)`` has amplitude 1."""
    u = np.asarray(u, dtype=np.float64)
    return np.fft.rfft(u, axis=-1)[..., k] * (2.0 / u.shape[-1])
