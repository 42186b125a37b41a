"""Diagnostics: reconstruction sweeps, periods, phase speeds, transition jumps, burst classes."""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.optimize import minimize_scalar

from .atlas import ArchSpec, ChartFitConfig, build_atlas
from .dataset import Dataset
from .neuralnet import TrainingDiverged, count_params, widen
from .systems import fourier_mode, track_torus_angles

# ---------------------------------------------------------------------------
# reconstruction sweep


@dataclass
class SweepRow:
    n_charts: int
    latent_dim: int
    trial: int
    policy: str
    mse: float
    n_params: int
    diverged: bool = False


@dataclass
class MseSweepResult:
    rows: list[SweepRow] = field(default_factory=list)

    def cell(self, n_charts: int, latent_dim: int, policy: str | None = None) -> np.ndarray:
        return np.array([r.mse for r in self.rows
                         if r.n_charts == n_charts and r.latent_dim == latent_dim
                         and (policy is None or r.policy == policy) and not r.diverged])

    def median(self, n_charts: int, latent_dim: int, policy: str | None = None) -> float:
        vals = self.cell(n_charts, latent_dim, policy)
        return float(np.median(vals)) if vals.size else float("nan")

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["n_charts", "latent_dim", "trial", "policy", "mse", "n_params", "diverged"])
            for r in self.rows:
                w.writerow([r.n_charts, r.latent_dim, r.trial, r.policy, repr(r.mse), r.n_params, int(r.diverged)])

    def summary(self) -> str:
        cells = sorted({(r.n_charts, r.latent_dim, r.policy) for r in self.rows})
        lines = ["n_charts latent_dim policy      median_mse   trials"]
        for c, d, p in cells:
            lines.append(f"{c:8d} {d:10d} {p:10s} {self.median(c, d, p):12.4e} {self.cell(c, d, p).size:7d}")
        return "\n".join(lines)


def _reversed_arch(arch: ArchSpec) -> ArchSpec:
    return ArchSpec(list(arch.layer_dims)[::-1], arch.activations)


def with_latent_dim(cfg: ChartFitConfig, d: int) -> ChartFitConfig:
    enc = list(cfg.encoder.layer_dims)
    dec = list(cfg.decoder.layer_dims)
    enc[-1] = d
    dec[0] = d
    return replace(cfg, latent_dim=d, encoder=ArchSpec(enc, cfg.encoder.activations),
                   decoder=ArchSpec(dec, cfg.decoder.activations))


def parameter_matched(cfg: ChartFitConfig, target_params: int) -> ChartFitConfig:
    """Widen hidden layers until encoder+decoder parameters reach ``target_params``."""
    def total(f):
        return count_params(widen(cfg.encoder.layer_dims, f)) + count_params(widen(cfg.decoder.layer_dims, f))
    lo, hi = 1.0, 1.0
    while total(hi) < target_params:
        hi *= 2
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if total(mid) < target_params else (lo, mid)
    f = hi if abs(total(hi) - target_params) <= abs(total(lo) - target_params) else lo
    return replace(cfg, encoder=ArchSpec(widen(cfg.encoder.layer_dims, f), cfg.encoder.activations),
                   decoder=ArchSpec(widen(cfg.decoder.layer_dims, f), cfg.decoder.activations))


def chart_params(cfg: ChartFitConfig) -> int:
    return count_params(cfg.encoder.layer_dims) + count_params(cfg.decoder.layer_dims)


def mse_sweep(dataset: Dataset, cells: Sequence[tuple[int, int, str]], trials: int,
              base_cfg: ChartFitConfig, K: int = 4, rounds: int = 2, reference_charts: int = 6,
              seed: int = 0, progress: Callable[[SweepRow], None] | None = None) -> MseSweepResult:
    """Reconstruction MSE of freshly trained atlases, one row per (cell, trial).

    Each cell is ``(n_charts, latent_dim, policy)``. Policy ``"same"`` keeps the
    base chart architecture; ``"matched"`` widens it so one chart has about as
    many parameters as ``reference_charts`` charts of ``base_cfg`` together.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    out = MseSweepResult()
    for n_charts, d, policy in cells:
        cfg = with_latent_dim(base_cfg, d)
        if policy == "matched":
            cfg = parameter_matched(cfg, reference_charts * chart_params(base_cfg))
        elif policy != "same":
            raise ValueError(f"unknown architecture policy {policy!r}")
        for t in range(trials):
            try:
                atlas = build_atlas(dataset, n_charts, K, rounds, cfg, seed=seed + 7919 * t)
                row = SweepRow(n_charts, d, t, policy, atlas.reconstruction_mse(), chart_params(cfg))
            except TrainingDiverged:
                row = SweepRow(n_charts, d, t, policy, float("nan"), chart_params(cfg), True)
            out.rows.append(row)
            if progress:
                progress(row)
    return out


# ---------------------------------------------------------------------------
# periods


@dataclass
class PeriodEstimate:
    periodic: bool
    period: float  # nan when aperiodic
    uncertainty: float
    units: str
    method: str
    lag: float = float("nan")
    residual: float = float("nan")
    threshold: float = float("nan")

    def __str__(self):
        if not self.periodic:
            return f"aperiodic (no recurrence below {self.threshold:.3g})"
        return f"{self.period:.6g} +/- {self.uncertainty:.2g} {self.units} ({self.method})"


def lagged_msd(X: np.ndarray, max_lag: int) -> np.ndarray:
    """``D[L] = mean_t |x_{t+L} - x_t|^2`` for ``L = 0..max_lag`` via FFT correlation."""
    n = X.shape[0]
    size = 1 << int(math.ceil(math.log2(2 * n)))
    F = np.fft.rfft(X, n=size, axis=0)
    corr = np.fft.irfft((F * F.conj()), n=size, axis=0).sum(axis=1)[: max_lag + 1]
    sq = (X**2).sum(axis=1)
    cs = np.concatenate([[0.0], np.cumsum(sq)])
    L = np.arange(max_lag + 1)
    head = cs[n - L]          # sum_{t < n-L} |x_t|^2
    tail = cs[n] - cs[L]      # sum_{t >= L} |x_t|^2
    return np.maximum(head + tail - 2 * corr, 0.0) / (n - L)


def estimate_period(series, dt: float = 1.0, units: str = "steps", discard: int = 0,
                    min_lag: int = 2, max_lag: int | None = None,
                    rel_threshold: float = 0.02, min_cycles: int = 4) -> PeriodEstimate:
    """Recurrence period of a sampled trajectory.

    Candidate lags are local minima of the lagged mean-square distance,
    refined by a parabola through the neighbouring lags and then by
    minimising the distance between the series and a cubic-spline shift of
    itself. The series must hold ``min_cycles`` repetitions, and a candidate
    ``tau`` is accepted when the RMS distance at every multiple ``k tau``,
    ``k < min_cycles``, stays below ``rel_threshold`` times the RMS
    amplitude. Checking the multiples rejects near-returns of quasiperiodic
    orbits, whose mismatch grows linearly with ``k``. The smallest accepted
    lag is the period; none means aperiodic.
    """
    X = np.asarray(series, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    X = X[discard:]
    n = X.shape[0]
    if n < 9:
        raise ValueError("series too short")
    if min_cycles < 2:
        raise ValueError("min_cycles must be >= 2")
    max_lag = min(max_lag or n // min_cycles, (n - 3) // min_cycles)
    amp = math.sqrt(float(((X - X.mean(axis=0)) ** 2).sum(axis=1).mean()))
    thr = rel_threshold * amp
    fail = PeriodEstimate(False, float("nan"), float("nan"), units, "recurrence", threshold=thr)
    if amp == 0:
        return fail
    D = lagged_msd(X, max_lag + 1)
    spline = CubicSpline(np.arange(n), X, axis=0)
    t_all = np.arange(n, dtype=np.float64)
    ref = np.median(D[min_lag:max_lag + 1])

    def shifted_msd(tau):
        m = n - int(math.ceil(tau))
        diff = spline(t_all[:m] + tau) - X[:m]
        return float((diff**2).sum(axis=1).mean())

    for L in range(max(min_lag, 1), max_lag + 1):
        if not (D[L] <= D[L - 1] and D[L] <= D[L + 1]):
            continue
        if D[L] > 0.25 * ref:
            continue
        denom = D[L - 1] - 2 * D[L] + D[L + 1]
        shift = 0.5 * (D[L - 1] - D[L + 1]) / denom if denom > 0 else 0.0
        tau0 = L + float(np.clip(shift, -0.5, 0.5))
        if D[L] == 0:
            tau = float(L)
        else:
            res = minimize_scalar(shifted_msd, bounds=(max(tau0 - 0.75, L - 1), min(tau0 + 0.75, L + 1)),
                                  method="bounded", options={"xatol": 1e-6})
            tau = float(res.x) if res.fun <= shifted_msd(tau0) else tau0
        resid = math.sqrt(shifted_msd(tau))
        if resid < thr and all(math.sqrt(shifted_msd(k * tau)) < thr for k in range(2, min_cycles)):
            return PeriodEstimate(True, tau * dt, 0.5 * dt, units, "recurrence", tau, resid, thr)
    return fail


@dataclass
class TravelEstimate:
    period: float
    uncertainty: float
    speed: float  # phase change per unit time


def travelling_period(phases, dt: float) -> TravelEstimate:
    """Time for the accumulated phase to advance one full turn, from a linear fit."""
    ph = np.unwrap(np.asarray(phases, dtype=np.float64))
    t = np.arange(ph.size) * dt
    coef, cov = np.polyfit(t, ph, 1, cov=True)
    speed = float(coef[0])
    period = 2 * np.pi / abs(speed)
    err = period * math.sqrt(max(cov[0, 0], 0.0)) / abs(speed)
    return TravelEstimate(period, err, speed)


# ---------------------------------------------------------------------------
# torus phase speeds


def angle_rates(points, tol: float = 0.5) -> tuple[float, float]:
    """Mean per-sample poloidal and toroidal angle increments of a torus trajectory.

    Angles are those of the nearest surface point, defined anywhere inside
    the tube, hence the default tolerance of one tube radius.
    """
    th, ph, _ = track_torus_angles(points, tol=tol)
    th, ph = np.unwrap(th), np.unwrap(ph)
    s = np.arange(th.size)
    return float(np.polyfit(s, th, 1)[0]), float(np.polyfit(s, ph, 1)[0])


def phase_speed_error(rollout, reference, tol: float = 0.5) -> tuple[float, float]:
    """Signed relative errors ``(poloidal, toroidal)`` of the mean angular speeds."""
    r_th, r_ph = angle_rates(rollout, tol)
    t_th, t_ph = angle_rates(reference, tol)
    return r_th / t_th - 1.0, r_ph / t_ph - 1.0


# ---------------------------------------------------------------------------
# transition smoothness


@dataclass
class TransitionJump:
    step: int
    from_chart: int
    to_chart: int
    first_diff: float
    second_diff: float
    first_ratio: float
    second_ratio: float


@dataclass
class TransitionReport:
    jumps: list[TransitionJump]
    median_first: float
    median_second: float

    def max_first_ratio(self) -> float:
        return max((j.first_ratio for j in self.jumps), default=0.0)

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "from_chart", "to_chart", "first_diff", "second_diff",
                        "first_ratio", "second_ratio"])
            for j in self.jumps:
                w.writerow([j.step, j.from_chart, j.to_chart, repr(j.first_diff), repr(j.second_diff),
                            repr(j.first_ratio), repr(j.second_ratio)])


def transition_smoothness(states, chart_ids) -> TransitionReport:
    """First and second differences of the decoded path at chart switches.

    A switch at step ``t`` means ``chart_ids[t] != chart_ids[t-1]``. Ratios are
    taken against the median over steps that stay inside one chart.
    """
    X = np.asarray(states, dtype=np.float64)
    c = np.asarray(chart_ids)
    if X.shape[0] < 3:
        raise ValueError("need at least three states")
    d1 = np.linalg.norm(np.diff(X, axis=0), axis=1)            # d1[t-1] = |x_t - x_{t-1}|
    d2 = np.linalg.norm(X[2:] - 2 * X[1:-1] + X[:-2], axis=1)  # d2[t-1] centred on t
    switch = c[1:] != c[:-1]                                    # switch[t-1]: change entering t
    stay1 = ~switch
    stay2 = stay1[:-1] & stay1[1:]
    med1 = float(np.median(d1[stay1])) if stay1.any() else float("nan")
    med2 = float(np.median(d2[stay2])) if stay2.any() else float("nan")
    jumps = []
    for t in np.flatnonzero(switch) + 1:
        first = float(d1[t - 1])
        second = float(d2[t - 1]) if t < X.shape[0] - 1 else float("nan")
        jumps.append(TransitionJump(int(t), int(c[t - 1]), int(c[t]), first, second,
                                    first / med1 if med1 > 0 else float("inf"),
                                    second / med2 if med2 > 0 else float("inf")))
    return TransitionReport(jumps, med1, med2)


# ---------------------------------------------------------------------------
# bursting behaviour


BURST_VERDICTS = ("aperiodic", "one-cycle", "two-cycles", "long-cycle", "fixed-point")


def burst_symbols(fields, dt: float = 1.0, hysteresis: float = 0.5):
    """Symbolise switches between the two cellular states.

    The state side is the sign of ``Re`` of the second Fourier mode, with a
    dead band of ``hysteresis`` times its median magnitude. Each completed
    switch becomes a symbol ``(direction, quadrant)`` where ``quadrant`` is the
    quadrant of the first Fourier mode at its largest excursion during the
    switch. Returns the symbols and the switch times.
    """
    U = np.atleast_2d(np.asarray(fields, dtype=np.float64))
    a2 = fourier_mode(U, 2).real
    a1 = fourier_mode(U, 1)
    band = hysteresis * float(np.median(np.abs(a2)))
    side = np.where(a2 > band, 1, np.where(a2 < -band, -1, 0))
    symbols, times = [], []
    last_side, left_at = 0, None
    for t, s in enumerate(side):
        if s == 0:
            if last_side != 0 and left_at is None:
                left_at = t
            continue
        if last_side != 0 and s != last_side:
            start = left_at if left_at is not None else t
            window = slice(max(start - 1, 0), t + 1)
            k = int(np.argmax(np.abs(a1[window]))) + window.start
            quad = int((np.angle(a1[k]) % (2 * np.pi)) // (np.pi / 2))
            symbols.append(("up" if s > 0 else "down", quad))
            times.append(t * dt)
        if s != 0:
            last_side, left_at = s, None
    return symbols, np.array(times)


def _minimal_period(seq: Sequence, min_repeats: int = 3) -> int | None:
    n = len(seq)
    for p in range(1, n // min_repeats + 1):
        if all(seq[i] == seq[i + p] for i in range(n - p)):
            return p
    return None


def _canonical_cycle(seq: Sequence, p: int) -> tuple:
    cyc = list(seq[:p])
    rots = [tuple(cyc[i:] + cyc[:i]) for i in range(p)]
    return min(rots, key=repr)


def classify_symbols(sequences, min_repeats: int = 3) -> str:
    """Verdict from one or more burst-symbol sequences (already past transients)."""
    # a list of lists holds several runs; anything else is a single run
    if isinstance(sequences, str) or not (sequences and isinstance(sequences[0], list)):
        sequences = [sequences]
    cycles = set()
    for seq in sequences:
        seq = list(seq)
        p = _minimal_period(seq, min_repeats)
        if p is None:
            return "aperiodic"
        cycles.add(_canonical_cycle(seq, p))
    lengths = {len(c) for c in cycles}
    if max(lengths) > 2:
        return "long-cycle"
    if len(cycles) >= 2:
        return "two-cycles"
    return "one-cycle"


def classify_bursting_behavior(trajectories, dt: float = 1.0, discard: float = 0.25,
                               fixed_tol: float = 1e-6, min_repeats: int = 3) -> str:
    """One of ``aperiodic``, ``one-cycle``, ``two-cycles``, ``long-cycle``, ``fixed-point``.

    ``trajectories`` is one field time series or a list of them (runs from
    different initial conditions; telling two coexisting cycles apart needs
    more than one run). The first ``discard`` fraction of each run is dropped.
    A run whose trailing variance falls below ``fixed_tol`` times its mean
    square is at a fixed point.
    """
    runs = trajectories
    if isinstance(runs, np.ndarray) and runs.ndim == 2:
        runs = [runs]
    seqs = []
    fixed = []
    for U in runs:
        U = np.asarray(U, dtype=np.float64)
        U = U[int(discard * U.shape[0]):]
        tail = U[U.shape[0] // 2:]
        scale = float((U**2).mean()) or 1.0
        var = float(tail.var(axis=0).mean())
        if var <= fixed_tol * scale:
            fixed.append(True)
            continue
        fixed.append(False)
        symbols, _ = burst_symbols(U, dt)
        seqs.append(symbols[1:])  # the first switch may be cut by the discard
    if all(fixed):
        return "fixed-point"
    if any(len(s) < 2 * min_repeats for s in seqs):
        return "aperiodic"
    return classify_symbols(seqs, min_repeats)


def dwell_times(fields, dt: float = 1.0) -> np.ndarray:
    """Times spent between consecutive switches (quiescent durations)."""
    _, times = burst_symbols(fields, dt)
    return np.diff(times)


def symbol_counts(fields) -> Counter:
    symbols, _ = burst_symbols(fields)
    return Counter(symbols)
