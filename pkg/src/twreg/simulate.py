"""Synthetic sources, forward operators and calibrated sensor noise."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, DimensionMismatch, IndexOutOfRange, SilentTruth
from .model_io import DipoleGeometry, as_matrix


@dataclass(frozen=True)
class SourceWaveformSpec:
    """Damped sinusoid centred on ``peak_time_s``.

    ``phase`` is added to the oscillation; the default ``pi/2`` puts a crest
    (and therefore the energy maximum) exactly at the peak time.
    """

    freq_hz: float
    peak_time_s: float
    decay_s: float
    amplitude: float = 1.0
    phase: float = math.pi / 2
    kind: str = "sine_exponential"

    def __post_init__(self):
        if self.kind != "sine_exponential":
            raise ConfigError(f"unknown waveform kind {self.kind!r}")
        if not self.decay_s > 0:
            raise ConfigError(f"decay_s must be > 0, got {self.decay_s}")
        if not self.freq_hz > 0:
            raise ConfigError(f"freq_hz must be > 0, got {self.freq_hz}")
        if not math.isfinite(self.amplitude):
            raise ConfigError("amplitude must be finite")


def sine_exponential(t, spec: SourceWaveformSpec):
    """``amplitude * sin(2 pi f (t - t0) + phase) * exp(-|t - t0| / decay)``."""
    dt = np.asarray(t, dtype=np.float64) - spec.peak_time_s
    out = (spec.amplitude * np.sin(2.0 * np.pi * spec.freq_hz * dt + spec.phase)
           * np.exp(-np.abs(dt) / spec.decay_s))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class ActiveSet:
    dipoles: tuple
    orientation: tuple
    waveform: SourceWaveformSpec

    def __post_init__(self):
        object.__setattr__(self, "dipoles", tuple(int(d) for d in self.dipoles))
        u = tuple(float(v) for v in self.orientation)
        if len(u) != 3:
            raise ConfigError(f"orientation must be a 3-vector, got {u}")
        if abs(math.sqrt(sum(v * v for v in u)) - 1.0) > 1e-10:
            raise ConfigError(f"orientation must be unit norm, got {u}")
        object.__setattr__(self, "orientation", u)


@dataclass(frozen=True)
class ScenarioSpec:
    n_sensors: int
    n_dipoles: int
    n_timepoints: int
    sample_rate_hz: float = 355.0
    active_sets: tuple = ()
    snr_db: float = 5.0
    noise_seed: int = 0
    forward_seed: int = 0
    condition_number: float = 10.0

    def __post_init__(self):
        for name in ("n_sensors", "n_dipoles", "n_timepoints"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive")
        if not self.sample_rate_hz > 0:
            raise ConfigError("sample_rate_hz must be positive")
        if not self.condition_number >= 1:
            raise ConfigError("condition_number must be >= 1")
        sets = tuple(a if isinstance(a, ActiveSet) else _active_set_from_dict(a)
                     for a in self.active_sets)
        object.__setattr__(self, "active_sets", sets)
        seen = set()
        for a in sets:
            for d in a.dipoles:
                if not 0 <= d < self.n_dipoles:
                    raise IndexOutOfRange(f"active dipole {d} outside 0..{self.n_dipoles - 1}")
                if d in seen:
                    raise ConfigError(f"dipole {d} appears in more than one active set")
                seen.add(d)

    @property
    def p(self) -> int:
        return 3 * self.n_dipoles

    def times(self) -> np.ndarray:
        return np.arange(self.n_timepoints) / self.sample_rate_hz

    def peak_sample(self, t_s: float) -> int:
        return int(np.argmin(np.abs(self.times() - t_s)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["active_sets"] = [
            {"dipoles": list(a.dipoles), "orientation": list(a.orientation),
             "waveform": asdict(a.waveform)}
            for a in self.active_sets
        ]
        d["snr_db"] = _encode_snr(self.snr_db)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        d = dict(d)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown scenario fields: {sorted(unknown)}")
        if "snr_db" in d:
            d["snr_db"] = _decode_snr(d["snr_db"])
        d["active_sets"] = tuple(_active_set_from_dict(a) for a in d.get("active_sets", ()))
        return cls(**d)


def _encode_snr(v):
    return "inf" if math.isinf(v) and v > 0 else float(v)


def _decode_snr(v):
    if isinstance(v, str):
        if v.lower() in ("inf", "+inf", "infinity"):
            return math.inf
        raise ConfigError(f"snr_db must be a number or 'inf', got {v!r}")
    return float(v)


def _active_set_from_dict(a) -> ActiveSet:
    if isinstance(a, ActiveSet):
        return a
    try:
        return ActiveSet(dipoles=tuple(a["dipoles"]), orientation=tuple(a["orientation"]),
                         waveform=SourceWaveformSpec(**a["waveform"]))
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed active set {a!r}: {exc}") from exc


def random_forward_operator(n: int, p: int, condition_number: float = 10.0, seed: int = 0) -> np.ndarray:
    """Seeded ``n x p`` matrix with singular values geometric from 1 to ``1/condition_number``.

    Scaled by ``sqrt(p / n)`` so that a unit-variance source row maps to sensor
    signals of roughly unit variance.
    """
    if n > p:
        raise DimensionMismatch(f"forward operator must be wide, got {n}x{p}")
    rng = np.random.default_rng(seed)
    U, _ = np.linalg.qr(rng.standard_normal((n, n)))
    V, _ = np.linalg.qr(rng.standard_normal((p, n)))
    d = np.geomspace(1.0, 1.0 / condition_number, n) if n > 1 else np.ones(1)
    return math.sqrt(p / n) * (U * d) @ V.T


def grid_geometry(n_dipoles: int, spacing: float = 1.0) -> DipoleGeometry:
    """Dipoles on a cubic lattice filled in x-fastest order."""
    side = max(1, math.ceil(round(n_dipoles ** (1.0 / 3.0), 9)))
    idx = np.arange(n_dipoles)
    coords = np.stack([idx % side, (idx // side) % side, idx // (side * side)], axis=1)
    return DipoleGeometry(spacing * coords.astype(np.float64))


def build_truth(spec: ScenarioSpec, X=None) -> np.ndarray:
    """True ``p x s`` source matrix: oriented waveforms on the active dipoles, zero elsewhere."""
    if X is not None:
        X = np.asarray(X)
        if X.ndim != 2 or X.shape[1] != spec.p or X.shape[0] != spec.n_sensors:
            raise DimensionMismatch(
                f"X has shape {X.shape}, scenario needs {spec.n_sensors}x{spec.p}"
            )
    B = np.zeros((spec.p, spec.n_timepoints))
    t = spec.times()
    for a in spec.active_sets:
        w = sine_exponential(t, a.waveform)
        for d in a.dipoles:
            if not 0 <= d < spec.n_dipoles:
                raise IndexOutOfRange(f"active dipole {d} outside 0..{spec.n_dipoles - 1}")
            for axis, u in enumerate(a.orientation):
                B[3 * d + axis] = u * w
    return B


def achieved_snr_db(signal, noise) -> float:
    ns = float(np.sum(np.square(noise)))
    if ns == 0.0:
        return math.inf
    return 10.0 * math.log10(float(np.sum(np.square(signal))) / ns)


def synthesize(X, B, snr_db: float, noise_seed: int):
    """Return ``(Y, E)`` with ``Y = X B + E`` at exactly the requested SNR in dB.

    ``E`` is i.i.d. standard normal from ``default_rng(noise_seed)``, rescaled so
    that ``10 log10(||XB||^2 / ||E||^2) = snr_db``.  ``snr_db = inf`` gives ``E = 0``.
    """
    X = as_matrix(X, "X")
    B = as_matrix(B, "B")
    if X.shape[1] != B.shape[0]:
        raise DimensionMismatch(f"X is {X.shape}, B is {B.shape}")
    signal = X @ B
    if math.isinf(snr_db) and snr_db > 0:
        return signal, np.zeros_like(signal)
    if not math.isfinite(snr_db):
        raise ConfigError(f"snr_db must be finite or +inf, got {snr_db}")
    power = float(np.sum(signal * signal))
    if power == 0.0:
        raise SilentTruth("X B is identically zero; SNR is undefined")
    E = np.random.default_rng(noise_seed).standard_normal(signal.shape)
    target_noise = power / 10.0 ** (snr_db / 10.0)
    E *= math.sqrt(target_noise / float(np.sum(E * E)))
    return signal + E, E


@dataclass
class SimulatedData:
    spec: ScenarioSpec
    X: np.ndarray
    B: np.ndarray
    Y: np.ndarray
    E: np.ndarray
    geometry: DipoleGeometry
    extras: dict = field(default_factory=dict)

    @property
    def achieved_snr_db(self) -> float:
        return achieved_snr_db(self.X @ self.B, self.E)


def simulate(spec: ScenarioSpec, X=None, geometry: DipoleGeometry | None = None) -> SimulatedData:
    """Forward operator (generated unless given), truth, and noisy data for a scenario."""
    if X is None:
        X = random_forward_operator(spec.n_sensors, spec.p, spec.condition_number, spec.forward_seed)
    X = as_matrix(X, "X")
    if geometry is None:
        geometry = grid_geometry(spec.n_dipoles)
    if geometry.n_dipoles != spec.n_dipoles:
        raise DimensionMismatch("geometry does not match scenario dipole count")
    B = build_truth(spec, X)
    Y, E = synthesize(X, B, spec.snr_db, spec.noise_seed)
    return SimulatedData(spec=spec, X=X, B=B, Y=Y, E=E, geometry=geometry)


def desk_scenario(noise_seed: int = 0, **overrides) -> ScenarioSpec:
    """Scaled-down two-source design: 20 sensors, 40 dipoles, 60 samples at 355 Hz.

    One dipole per source area, crests at 25 ms and 58 ms.
    """
    left = ActiveSet(
        dipoles=(5,),
        orientation=tuple(np.array([1.0, 2.0, 2.0]) / 3.0),
        waveform=SourceWaveformSpec(freq_hz=12.0, peak_time_s=0.025, decay_s=0.02, amplitude=1.0),
    )
    right = ActiveSet(
        dipoles=(30,),
        orientation=tuple(np.array([2.0, -1.0, 2.0]) / 3.0),
        waveform=SourceWaveformSpec(freq_hz=9.0, peak_time_s=0.058, decay_s=0.025, amplitude=1.0),
    )
    params = dict(n_sensors=20, n_dipoles=40, n_timepoints=60, sample_rate_hz=355.0,
                  active_sets=(left, right), snr_db=5.0, noise_seed=noise_seed,
                  forward_seed=2012, condition_number=10.0)
    params.update(overrides)
    return ScenarioSpec(**params)
