"""Repeatable hub-height wind sequences and the upstream preview sensor.

Randomness comes from xoshiro256** seeded through splitmix64, implemented
here so sequences are bit-identical across platforms and library versions.
Gaussian variates use the Box-Muller transform on 53-bit uniforms.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import signal

MASK64 = 0xFFFFFFFFFFFFFFFF
MIN_TURBULENT_WIND = 0.5  # m/s floor applied after shaping

# Second-order shaping filter (1 zero, 2 poles) fit in normalized frequency
# f·L/V to the Kaimal shape (1 + 6 f L / V)^(-5/3); 1.34 dB worst case on [1e-3, 10].
KAIMAL_FIT_POLES = (0.09181785, 0.93882459)
KAIMAL_FIT_ZERO = 0.30794431


def splitmix64(x):
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31), x


class Xoshiro256:
    """xoshiro256** 1.0 (Blackman & Vigna), state seeded by splitmix64."""

    def __init__(self, seed):
        s = int(seed) & MASK64
        state = []
        for _ in range(4):
            out, s = splitmix64(s)
            state.append(out)
        self.s = state

    def next_u64(self):
        s0, s1, s2, s3 = self.s
        result = (((s1 * 5) & MASK64) << 7 | ((s1 * 5) & MASK64) >> 57) & MASK64
        result = (result * 9) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = ((s3 << 45) | (s3 >> 19)) & MASK64
        self.s = [s0, s1, s2, s3]
        return result

    def uniform(self):
        """Double in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / 9007199254740992.0)

    def normals(self, count):
        out = np.empty(count)
        s0, s1, s2, s3 = self.s
        scale = 1.0 / 9007199254740992.0
        two_pi = 2.0 * math.pi
        i = 0
        buf = [0, 0]
        while i < count:
            for j in range(2):
                r = (s1 * 5) & MASK64
                r = (((r << 7) | (r >> 57)) & MASK64) * 9 & MASK64
                t = (s1 << 17) & MASK64
                s2 ^= s0
                s3 ^= s1
                s1 ^= s2
                s0 ^= s3
                s2 ^= t
                s3 = ((s3 << 45) | (s3 >> 19)) & MASK64
                buf[j] = r
            u1 = 1.0 - (buf[0] >> 11) * scale  # (0, 1]
            u2 = (buf[1] >> 11) * scale
            rad = math.sqrt(-2.0 * math.log(u1))
            out[i] = rad * math.cos(two_pi * u2)
            if i + 1 < count:
                out[i + 1] = rad * math.sin(two_pi * u2)
            i += 2
        self.s = [s0, s1, s2, s3]
        return out


def _mix64_array(x):
    z = x.astype(np.uint64)
    with np.errstate(over="ignore"):
        z = z + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def keyed_normals(seed, tick, count):
    """Gaussian noise that depends only on (seed, tick, index)."""
    idx = np.arange(2 * count, dtype=np.uint64)
    base = _mix64_array(np.array([seed & MASK64], dtype=np.uint64))[0]
    with np.errstate(over="ignore"):
        key = _mix64_array(np.array([(int(base) ^ (tick & MASK64)) & MASK64], dtype=np.uint64))[0]
        bits = _mix64_array(idx + key)
    u = (bits >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
    u1 = 1.0 - u[0::2]
    u2 = u[1::2]
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * math.pi * u2)


@dataclass
class WindSequence:
    dt: float
    samples: np.ndarray
    seed: int = 0
    kind: str = "constant"
    mean: float = 0.0
    params: dict = field(default_factory=dict)
    event_time: float = 0.0  # s, onset of the inflow event (timing-signal pulse)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("samples must be a non-empty 1-D array")
        if not np.all(np.isfinite(self.samples)) or np.any(self.samples <= 0):
            raise ValueError("wind samples must be finite and > 0")

    def __len__(self):
        return self.samples.size

    @property
    def duration(self):
        return (self.samples.size - 1) * self.dt

    @property
    def t(self):
        return np.arange(self.samples.size) * self.dt

    def index(self, t):
        return int(round(t / self.dt))

    def at(self, t):
        i = self.index(t)
        if i < 0 or i >= self.samples.size:
            raise ValueError(f"t={t} outside the sequence span")
        return float(self.samples[i])

    def to_csv(self, path):
        header = {"kind": self.kind, "seed": self.seed, "dt": self.dt, "mean": self.mean,
                  "event_time": self.event_time, "params": self.params}
        with open(path, "w") as fh:
            fh.write("# " + json.dumps(header, sort_keys=True) + "\n")
            fh.write("t_s,v_mps\n")
            for i, v in enumerate(self.samples.tolist()):
                fh.write(f"{i * self.dt!r},{v!r}\n")

    @classmethod
    def from_csv(cls, path):
        with open(path) as fh:
            first = fh.readline()
            if not first.startswith("# "):
                raise ValueError(f"{path}: missing header comment")
            header = json.loads(first[2:])
            if fh.readline().strip() != "t_s,v_mps":
                raise ValueError(f"{path}: expected column header t_s,v_mps")
            values = [float(line.split(",")[1]) for line in fh if line.strip()]
        return cls(dt=header["dt"], samples=np.array(values), seed=header["seed"],
                   kind=header["kind"], mean=header["mean"], params=header["params"],
                   event_time=header.get("event_time", 0.0))


@dataclass
class PreviewWindow:
    horizon_len: int
    values: np.ndarray
    valid_len: int

    def __post_init__(self):
        if self.valid_len > self.horizon_len:
            raise ValueError("valid_len exceeds horizon_len")


def _check_finite(**values):
    for name, value in values.items():
        if not math.isfinite(value):
            raise ValueError(f"non-finite parameter {name}={value}")


def _n_samples(duration, dt):
    _check_finite(duration=duration, dt=dt)
    if not (dt > 0 and duration >= 0):
        raise ValueError("need dt > 0 and duration >= 0")
    return int(math.floor(duration / dt + 1e-9)) + 1


def gen_constant(v, duration, dt, event_time=1.0):
    _check_finite(v=v)
    if not v > 0:
        raise ValueError("wind speed must be > 0")
    n = _n_samples(duration, dt)
    return WindSequence(dt=dt, samples=np.full(n, float(v)), kind="constant", mean=float(v),
                        params={"v": v, "duration": duration}, event_time=event_time)


def gen_step(v0, v1, t_step, duration, dt):
    _check_finite(v0=v0, v1=v1, t_step=t_step)
    if not (v0 > 0 and v1 > 0):
        raise ValueError("step wind speeds must be > 0")
    if not 0 <= t_step <= duration:
        raise ValueError("t_step must lie in [0, duration]")
    n = _n_samples(duration, dt)
    k_step = int(math.ceil(t_step / dt - 1e-9))
    samples = np.full(n, float(v0))
    samples[k_step:] = v1
    return WindSequence(dt=dt, samples=samples, kind="step", mean=float(np.mean(samples)),
                        params={"v0": v0, "v1": v1, "t_step": t_step, "duration": duration},
                        event_time=t_step)


def eog_shape(tau, period):
    """Unit-amplitude extreme-operating-gust deviation (v - v0)/A at local time tau."""
    tau = np.asarray(tau, dtype=float)
    inside = (tau >= 0) & (tau <= period)
    shape = -0.37 * np.sin(3 * np.pi * tau / period) * (1 - np.cos(2 * np.pi * tau / period))
    return np.where(inside, shape, 0.0)


def gen_gust(v0, amplitude, period, t_start, duration, dt):
    _check_finite(v0=v0, amplitude=amplitude, period=period, t_start=t_start)
    if not v0 > 0:
        raise ValueError("v0 must be > 0")
    if amplitude < 0:
        raise ValueError("gust amplitude must be >= 0")
    if not period > 0:
        raise ValueError("gust period must be > 0")
    n = _n_samples(duration, dt)
    t = np.arange(n) * dt
    samples = v0 + amplitude * eog_shape(t - t_start, period)
    return WindSequence(dt=dt, samples=samples, kind="gust", mean=float(np.mean(samples)),
                        params={"v0": v0, "amplitude": amplitude, "period": period,
                                "t_start": t_start, "duration": duration},
                        event_time=t_start)


def shaping_filter(v_mean, length_scale, dt):
    """Discrete (b, a) of the turbulence shaping filter at sample time ``dt``."""
    p1, p2 = (2 * np.pi * p * v_mean / length_scale for p in KAIMAL_FIT_POLES)
    z = 2 * np.pi * KAIMAL_FIT_ZERO * v_mean / length_scale
    num = [1.0 / z, 1.0]
    den = np.polymul([1.0 / p1, 1.0], [1.0 / p2, 1.0])
    b, a = signal.bilinear(num, den, fs=1.0 / dt)
    return b, a


def gen_turbulence(v_mean, turbulence_intensity, duration, dt, seed, length_scale=2.0,
                   event_time=1.0):
    """Seeded single-point turbulence: shaped white noise scaled to std TI·v_mean."""
    _check_finite(v_mean=v_mean, turbulence_intensity=turbulence_intensity)
    if not 0 < turbulence_intensity < 0.5:
        raise ValueError("turbulence_intensity must lie in (0, 0.5)")
    if not (v_mean > 0 and length_scale > 0):
        raise ValueError("v_mean and length_scale must be > 0")
    n = _n_samples(duration, dt)
    b, a = shaping_filter(v_mean, length_scale, dt)
    slowest = length_scale / (2 * np.pi * KAIMAL_FIT_POLES[0] * v_mean)
    burn = int(math.ceil(8 * slowest / dt))
    white = Xoshiro256(seed).normals(n + burn)
    shaped = signal.lfilter(b, a, white)[burn:]
    shaped = (shaped - shaped.mean()) / shaped.std()
    samples = np.maximum(v_mean + turbulence_intensity * v_mean * shaped, MIN_TURBULENT_WIND)
    return WindSequence(dt=dt, samples=samples, seed=int(seed), kind="turbulence",
                        mean=float(v_mean),
                        params={"v_mean": v_mean, "turbulence_intensity": turbulence_intensity,
                                "duration": duration, "length_scale": length_scale},
                        event_time=event_time)


def preview_at(seq: WindSequence, t, ctrl_period, Np, noise_std=0.0, noise_seed=0):
    """Future hub-wind samples seq(t + i·ctrl_period), i = 0..Np-1, optionally noisy.

    Past the end of the sequence the last sample is repeated; ``valid_len``
    counts the entries that fall inside the record.
    """
    if Np < 1:
        raise ValueError("Np must be >= 1")
    j0 = seq.index(t)
    if j0 < 0:
        raise ValueError(f"t={t} precedes the sequence start")
    last = seq.samples.size - 1
    if j0 > last:
        raise ValueError(f"t={t} is beyond the sequence end")
    stride = int(round(ctrl_period / seq.dt))
    idx = j0 + stride * np.arange(Np)
    valid = int(np.count_nonzero(idx <= last))
    values = seq.samples[np.minimum(idx, last)]
    if noise_std > 0:
        values = values + noise_std * keyed_normals(noise_seed, j0, Np)
    return PreviewWindow(horizon_len=Np, values=values, valid_len=valid)
