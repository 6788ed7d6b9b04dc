"""Synthetic thermal plants, excitation signals, datasets, CSV ingestion.

Two ground-truth simulators with known monotone structure:

  * HvacPlant: one room temperature driven by supply air and ambient loss,
      T' = T + (dt/C) (mdot c_p (Ts - T) + k_a (T_amb - T)).
    Bilinear in (mdot, T) and (mdot, Ts), so the true update has a constant
    nonzero mixed Hessian; a second-order predictor has something real to
    learn here.
  * TcLabPlant: two heater/sensor pairs with ambient loss and symmetric
    cross-coupling,
      T1' = T1 + dt (alpha1 Q1 + k_loss (T_amb - T1) + k_couple (T2 - T1)).

Both audit their monotone structure at construction from the analytic
partials, so a bad parameter set fails fast instead of silently breaking the
sign priors the models train against.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .constraints import MonoSpec

Array = np.ndarray


@dataclass
class HvacPlant:
    C: float = 500.0  # kJ/degF
    c_p: float = 1.0  # kJ/(kg degF)
    k_a: float = 0.02  # kW/degF
    T_amb: float = 70.0  # degF
    dt: float = 300.0  # s
    mdot_max: float = 1.0  # kg/s, audited operating range

    nx = 1
    nu = 2

    def __post_init__(self):
        if self.C <= 0 or self.c_p <= 0 or self.k_a < 0:
            raise ValueError("need C > 0, c_p > 0, k_a >= 0")
        # monotone audit over the declared flow range: dT'/dT >= 0 needs
        # (dt/C)(mdot c_p + k_a) <= 1, worst at mdot_max; dT'/dTs >= 0 always
        for m in np.linspace(0.0, self.mdot_max, 101):
            if 1.0 - (self.dt / self.C) * (m * self.c_p + self.k_a) < 0:
                raise ValueError(
                    f"update not increasing in T at mdot={m:.3f}; "
                    "reduce dt or mdot_max"
                )

    def step(self, x, u):
        x = np.asarray(x, dtype=np.float64)
        u = np.asarray(u, dtype=np.float64)
        T = x[..., 0]
        Ts, mdot = u[..., 0], u[..., 1]
        nxt = hvac_step(self, T, Ts, mdot)
        return np.stack([nxt], axis=-1)

    def mono_spec(self) -> MonoSpec:
        """Sign prior for z = (T, Ts, mdot) in the cooling regime (Ts < T)."""
        return MonoSpec.from_symbols(["++-"])


def hvac_step(plant: HvacPlant, T, Ts, mdot):
    """One Euler step of the room heat balance."""
    T = np.asarray(T, dtype=np.float64)
    Ts = np.asarray(Ts, dtype=np.float64)
    mdot = np.asarray(mdot, dtype=np.float64)
    if np.any(mdot < 0):
        raise ValueError("mdot must be nonnegative")
    gain = plant.dt / plant.C
    return T + gain * (mdot * plant.c_p * (Ts - T) + plant.k_a * (plant.T_amb - T))


@dataclass
class TcLabPlant:
    alpha1: float = 0.0065  # degC/s per % power
    alpha2: float = 0.0065
    k_loss: float = 0.008  # 1/s
    k_couple: float = 0.003  # 1/s
    T_amb: float = 23.0  # degC
    dt: float = 15.0  # s

    nx = 2
    nu = 2

    def __post_init__(self):
        if min(self.alpha1, self.alpha2, self.k_loss, self.k_couple) < 0:
            raise ValueError("coefficients must be nonnegative")
        # own-temperature partial 1 - dt (k_loss + k_couple) must stay >= 0
        if 1.0 - self.dt * (self.k_loss + self.k_couple) < 0:
            raise ValueError("dt too large for the loss/coupling rates")

    def step(self, x, u):
        x = np.asarray(x, dtype=np.float64)
        u = np.asarray(u, dtype=np.float64)
        T1n, T2n = tclab_step(self, (x[..., 0], x[..., 1]), (u[..., 0], u[..., 1]))
        return np.stack([T1n, T2n], axis=-1)

    def mono_spec(self) -> MonoSpec:
        """Sign prior for z = (T1, T2, Q1, Q2); the other heater has no
        same-step effect, left untagged."""
        return MonoSpec.from_symbols(["+++.", "++.+"])


def tclab_step(plant: TcLabPlant, temps, powers):
    """One Euler step of the coupled two-heater balance."""
    T1 = np.asarray(temps[0], dtype=np.float64)
    T2 = np.asarray(temps[1], dtype=np.float64)
    Q1 = np.asarray(powers[0], dtype=np.float64)
    Q2 = np.asarray(powers[1], dtype=np.float64)
    if np.any((Q1 < 0) | (Q1 > 100) | (Q2 < 0) | (Q2 > 100)):
        raise ValueError("heater powers must lie in [0, 100] %")
    d1 = plant.alpha1 * Q1 + plant.k_loss * (plant.T_amb - T1) + plant.k_couple * (T2 - T1)
    d2 = plant.alpha2 * Q2 + plant.k_loss * (plant.T_amb - T2) + plant.k_couple * (T1 - T2)
    return T1 + plant.dt * d1, T2 + plant.dt * d2


@dataclass
class Series:
    """A uniformly sampled trajectory: t (n,), x (n, Nx), u (n, Nu)."""

    t: Array
    x: Array
    u: Array

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
        self.u = np.atleast_2d(np.asarray(self.u, dtype=np.float64))
        if self.x.shape[0] != len(self.t) or self.u.shape[0] != len(self.t):
            raise ValueError("t, x, u lengths disagree")

    def __len__(self) -> int:
        return len(self.t)


@dataclass
class Transition:
    """One supervised sample: (z_prev, z_curr, x_next) from consecutive steps."""

    z_prev: Array
    z_curr: Array
    x_next: Array


@dataclass
class ExcitePolicy:
    """Piecewise-constant random excitation: levels U[lo, hi] per channel,
    held for a dwell drawn from dwell_choices (in samples)."""

    lo: Array
    hi: Array
    dwell_choices: tuple = (8, 10)
    noise_sigma: float = 0.0  # additive on the emitted states only

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        if self.lo.shape != self.hi.shape or np.any(self.lo > self.hi):
            raise ValueError("need lo <= hi per channel")
        if not self.dwell_choices or any(d < 1 for d in self.dwell_choices):
            raise ValueError("dwell choices must be positive sample counts")


def excite(plant, policy: ExcitePolicy, n: int, seed: int, x0) -> Series:
    """Roll the plant under the policy for n samples, deterministically."""
    if n < 3:
        raise ValueError("need at least 3 samples to form one transition")
    rng = np.random.default_rng(seed)
    x0 = np.asarray(x0, dtype=np.float64).reshape(-1)
    nu = len(policy.lo)
    x = np.empty((n, len(x0)))
    u = np.empty((n, nu))
    x[0] = x0
    level = rng.uniform(policy.lo, policy.hi)
    remaining = int(rng.choice(policy.dwell_choices))
    for k in range(n):
        if remaining == 0:
            level = rng.uniform(policy.lo, policy.hi)
            remaining = int(rng.choice(policy.dwell_choices))
        u[k] = level
        remaining -= 1
        if k + 1 < n:
            x[k + 1] = plant.step(x[k], u[k])
    if policy.noise_sigma > 0:
        x = x + rng.normal(0.0, policy.noise_sigma, size=x.shape)
    t = np.arange(n, dtype=np.float64) * plant.dt
    return Series(t, x, u)


def to_transitions(series: Series) -> list:
    """Sliding window of consecutive triples: length = len(series) - 2."""
    n = len(series)
    if n < 3:
        raise ValueError(f"series of length {n} has no (prev, curr, next) triple")
    out = []
    for k in range(1, n - 1):
        z_prev = np.concatenate([series.x[k - 1], series.u[k - 1]])
        z_curr = np.concatenate([series.x[k], series.u[k]])
        out.append(Transition(z_prev, z_curr, series.x[k + 1].copy()))
    return out


def transitions_to_arrays(transitions) -> tuple:
    """Stack a transition list into (Z_prev, Z_curr, X_next) batch arrays."""
    if not transitions:
        raise ValueError("empty transition list")
    Zp = np.stack([tr.z_prev for tr in transitions])
    Zc = np.stack([tr.z_curr for tr in transitions])
    Xn = np.stack([tr.x_next for tr in transitions])
    return Zp, Zc, Xn


def range_shift_split(series: Series, n_train: int = 180, n_test: int = 100):
    """Chronological split of the transition list: first n_train, next n_test."""
    if n_train <= 0 or n_test <= 0:
        raise ValueError("split sizes must be positive")
    if len(series) < n_train + n_test + 2:
        raise ValueError(
            f"series of length {len(series)} cannot yield {n_train}+{n_test} transitions"
        )
    transitions = to_transitions(series)
    return transitions[:n_train], transitions[n_train : n_train + n_test]


def save_csv(series: Series, path, state_names, input_names) -> None:
    names = list(state_names) + list(input_names)
    if len(names) != series.x.shape[1] + series.u.shape[1]:
        raise ValueError("column names do not cover all channels")
    with open(path, "w") as f:
        f.write(",".join(["t"] + names) + "\n")
        for k in range(len(series)):
            row = [series.t[k], *series.x[k], *series.u[k]]
            f.write(",".join(repr(float(v)) for v in row) + "\n")


def load_csv(path, state_cols=None, input_cols=None) -> Series:
    """Parse a trajectory CSV; malformed content is rejected with its line number.

    Column roles default to the two native schemas (t,T,Ts,mdot) and
    (t,T1,T2,Q1,Q2); pass explicit column lists for foreign logs.
    """
    with open(path) as f:
        lines = [ln.rstrip("\n") for ln in f]
    if not lines or not lines[0].strip():
        raise ValueError(f"{path}: missing header row")
    header = [h.strip() for h in lines[0].split(",")]
    if state_cols is None or input_cols is None:
        if header == ["t", "T", "Ts", "mdot"]:
            state_cols, input_cols = ["T"], ["Ts", "mdot"]
        elif header == ["t", "T1", "T2", "Q1", "Q2"]:
            state_cols, input_cols = ["T1", "T2"], ["Q1", "Q2"]
        else:
            raise ValueError(
                f"{path}: unrecognized header {header}; pass state_cols/input_cols"
            )
    for c in ["t"] + list(state_cols) + list(input_cols):
        if c not in header:
            raise ValueError(f"{path}: column {c!r} missing from header")
    idx = {c: header.index(c) for c in header}
    rows = []
    for lineno, ln in enumerate(lines[1:], start=2):
        if not ln.strip():
            continue
        parts = ln.split(",")
        if len(parts) != len(header):
            raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(parts)}")
        try:
            vals = [float(p) for p in parts]
        except ValueError:
            raise ValueError(f"{path}:{lineno}: non-numeric field") from None
        if not all(np.isfinite(v) for v in vals):
            raise ValueError(f"{path}:{lineno}: non-finite value")
        rows.append((lineno, vals))
    if len(rows) < 1:
        raise ValueError(f"{path}: no data rows")
    t = np.array([v[idx["t"]] for _, v in rows])
    if len(t) >= 2:
        dts = np.diff(t)
        if np.any(dts <= 0):
            bad = rows[int(np.argmax(dts <= 0)) + 1][0]
            raise ValueError(f"{path}:{bad}: non-increasing timestamp")
        if np.any(np.abs(dts - dts[0]) > 1e-9 * max(1.0, abs(dts[0]))):
            bad = rows[int(np.argmax(np.abs(dts - dts[0]) > 1e-9 * max(1.0, abs(dts[0])))) + 1][0]
            raise ValueError(f"{path}:{bad}: gap in uniform sampling")
    x = np.array([[v[idx[c]] for c in state_cols] for _, v in rows])
    u = np.array([[v[idx[c]] for c in input_cols] for _, v in rows])
    return Series(t, x, u)


@dataclass
class HvacBenchmark:
    plant: HvacPlant
    series: Series
    train: list
    test: list


def hvac_benchmark(
    seed: int, n_train: int = 180, n_test: int = 100, noise_sigma: float = 0.05
) -> HvacBenchmark:
    """Range-shifted identification benchmark on the room-temperature plant.

    A hot-ambient room (85 degF) is cooled by 55 degF supply air. Training
    samples wander a low band (about 68-73 degF) under heavy flows, testing
    samples a higher band (73-76 degF) under light flows; a pinned medium
    flow carries the trajectory gently across the boundary so the two bands
    overlap by well under the 1 degF budget. The supply stays 8+ degF colder
    than the room everywhere, so dT'/dmdot < 0 holds throughout and the
    sign prior (T: +, Ts: +, mdot: -) is true ground truth.
    """
    plant = HvacPlant(C=500.0, c_p=1.0, k_a=0.2, T_amb=85.0, dt=300.0)
    n = n_train + n_test + 2
    rng = np.random.default_rng(seed)
    x = np.empty((n, 1))
    u = np.empty((n, 2))
    x[0, 0] = 70.0
    # flow is slew-limited so consecutive samples stay close in mdot; the
    # supply setpoint still jumps at dwell boundaries
    max_dm = 0.015
    # crossing window: flow pinned at a medium level whose equilibrium sits
    # just above the test band floor; the train/test boundary lands mid-climb
    climb_start = n_train - 6
    climb_end = climb_start + 12
    settle_start = climb_start - 14  # pre-crossing: park T near the band top
    # coverage window: drive flow down through the light-flow range the test
    # band uses, so that range is interpolated during training; a deep cool
    # first buys the headroom the slew-limited descent needs
    dip_start, dip_end = 62, 88
    m_cur, m_tgt, Ts = 0.16, 0.16, 55.0
    remaining = 0
    cool_turn = False
    for k in range(n):
        T = x[k, 0]
        if dip_start <= k < dip_end:
            if k < dip_start + 10:
                m_tgt, Ts = 0.26, 52.0  # pre-cool toward the band floor
            elif k < dip_start + 20:
                m_tgt, Ts = 0.08, 52.5  # glide down through medium flow
            else:
                m_tgt = 0.078 if T < 71.3 else 0.105  # regulated light flow
                Ts = 53.0
            remaining = 0
        elif climb_start <= k < climb_end:
            m_tgt, Ts = 0.115, 55.0
            remaining = 0  # force a fresh draw right after the window
        elif remaining == 0:
            if k < settle_start:  # low-band phase
                if T < 70.6 and m_cur < 0.17 and rng.random() < 0.5:
                    # dip into the low-flow range the test band lives in, so
                    # flow is interpolated there even though T is not; cool
                    # supply keeps the room from warming out of band too fast
                    m_tgt = rng.uniform(0.075, 0.095)
                    Ts = rng.uniform(52.0, 54.0)
                    remaining = int(rng.integers(4, 8))
                else:
                    if T < 68.8:
                        # recover slowly: low flow here chains into a dip
                        m_tgt = rng.uniform(0.085, 0.12)
                        Ts = rng.uniform(52.0, 55.0)
                    elif T > 72.2:
                        m_tgt = rng.uniform(0.20, 0.26)
                        Ts = rng.uniform(52.0, 58.0)
                    else:
                        m_tgt = rng.uniform(0.13, 0.22)
                        Ts = rng.uniform(52.0, 58.0)
                    remaining = int(rng.integers(4, 8))
            elif k < climb_start:  # settle just under the crossing
                hold = 0.2 * (85.0 - T) / max(T - 55.0, 1.0)
                if T < 71.2:
                    m_tgt = max(hold - 0.02, 0.06)
                elif T > 72.2:
                    m_tgt = min(hold + 0.02, 0.26)
                else:
                    m_tgt = hold + rng.uniform(-0.008, 0.008)
                Ts = rng.uniform(54.0, 56.0)
                remaining = int(rng.integers(2, 4))
            else:  # high-band phase: long alternating warm/cool plateaus in 73-76
                if T < 73.5:
                    m_tgt = rng.uniform(0.082, 0.09)
                elif T > 76.5:
                    m_tgt = rng.uniform(0.124, 0.135)
                elif cool_turn:
                    m_tgt = rng.uniform(0.124, 0.135)
                else:
                    m_tgt = rng.uniform(0.082, 0.09)
                cool_turn = not cool_turn
                Ts = rng.uniform(54.0, 56.0)
                remaining = int(rng.integers(14, 23))
        else:
            remaining -= 1
            # escape valves: abort a dwell that is drifting out of its band
            if k < settle_start and T > 71.5 and m_tgt < 0.11:
                remaining = 0  # low-flow dip has warmed the room enough
            elif k < settle_start and T > 72.2 and m_tgt < 0.20:
                remaining = 0
            elif k >= climb_end and T < 73.3 and m_tgt > 0.10:
                remaining = 0
        m_cur += float(np.clip(m_tgt - m_cur, -max_dm, max_dm))
        u[k] = (Ts, m_cur)
        if k + 1 < n:
            x[k + 1] = plant.step(x[k], u[k])
    if noise_sigma > 0:
        x = x + rng.normal(0.0, noise_sigma, size=x.shape)
    series = Series(np.arange(n, dtype=np.float64) * plant.dt, x, u)
    train, test = range_shift_split(series, n_train, n_test)
    max_train = max(float(tr.x_next[0]) for tr in train)
    min_test = min(float(tr.x_next[0]) for tr in test)
    if not max_train < min_test + 1.0:
        raise RuntimeError(
            f"range shift failed: max train T {max_train:.2f} vs "
            f"min test T {min_test:.2f} exceeds the 1 degF overlap budget"
        )
    return HvacBenchmark(plant, series, train, test)


@dataclass
class TcLabDataset:
    plant: TcLabPlant
    series: Series
    train: list
    test: list


def tclab_dataset(
    seed: int, n_train: int = 250, n_test: int = 60, noise_sigma: float = 0.05
) -> TcLabDataset:
    """Identification data: heaters wander 10-50 % with 120/150 s dwells."""
    plant = TcLabPlant()
    policy = ExcitePolicy(
        lo=np.array([10.0, 10.0]),
        hi=np.array([50.0, 50.0]),
        dwell_choices=(8, 10),  # 120 s or 150 s at dt = 15 s
        noise_sigma=noise_sigma,
    )
    n = n_train + n_test + 2
    series = excite(plant, policy, n, seed, x0=np.array([plant.T_amb, plant.T_amb]))
    transitions = to_transitions(series)
    return TcLabDataset(plant, series, transitions[:n_train], transitions[n_train:])
