"""Process-separated hardware-in-the-loop analogue.

A plant server owns the simulation clock and exchanges framed binary
messages with a controller client over TCP.  Frame layout (little-endian)::

    magic 'WT' | version u8 | msg_type u8 | seq u32 | payload_len u16 | payload | crc32

The CRC (IEEE, as in zlib) covers header and payload.  The exchange is
stop-and-wait: one MEAS per control tick, answered by one CMD echoing k.
"""
from __future__ import annotations

import json
import logging
import math
import socket
import struct
import time
import warnings
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import inflow
from .control import Controller, ControllerInput, CtrlStatus, MpcController
from .sim import (CommandSource, Plant, SimConfig, SimLog, _loop, build_controller,
                  golden_compare, make_input, make_plant, preview_seed, run_closed_loop)

log = logging.getLogger(__name__)

MAGIC = b"WT"
VERSION = 1
HEADER = struct.Struct("<2sBBIH")
CRC = struct.Struct("<I")
MAX_PAYLOAD = 0xFFFF

MSG_HELLO, MSG_MEAS, MSG_CMD, MSG_BYE = 0x01, 0x02, 0x03, 0x04

# extra ctrl_status codes written by the plant server
STATUS_MISSED = 3  # deadline missed, last command held
STATUS_FAILSAFE = 4  # feathering ramp after too many misses

STATE_DIM = 3


class ProtocolError(Exception):
    """Malformed frame, CRC failure or out-of-order message."""


class HandshakeError(ProtocolError):
    """HELLO parameters disagree between plant and controller."""


class GoldenSchemaError(ValueError):
    """Golden file does not match the expected layout."""


# ---------------------------------------------------------------------------
# messages

@dataclass
class Hello:
    ctrl_period: float  # s
    Np: int
    state_dim: int = STATE_DIM

    msg_type = MSG_HELLO
    _fmt = struct.Struct("<dHH")

    def pack(self):
        return self._fmt.pack(self.ctrl_period, self.Np, self.state_dim)

    @classmethod
    def unpack(cls, payload):
        if len(payload) != cls._fmt.size:
            raise ProtocolError(f"HELLO payload has {len(payload)} bytes")
        return cls(*cls._fmt.unpack(payload))


@dataclass
class Meas:
    k: int
    omega: float  # rad/s
    beta: float  # rad
    v_hub: float  # m/s
    preview: np.ndarray  # m/s, absolute

    msg_type = MSG_MEAS
    _head = struct.Struct("<Iddd")

    def pack(self):
        pv = np.ascontiguousarray(self.preview, dtype="<f8")
        return self._head.pack(self.k, self.omega, self.beta, self.v_hub) + pv.tobytes()

    @classmethod
    def unpack(cls, payload):
        rest = len(payload) - cls._head.size
        if rest < 0 or rest % 8:
            raise ProtocolError(f"MEAS payload has {len(payload)} bytes")
        k, omega, beta, v_hub = cls._head.unpack_from(payload)
        preview = np.frombuffer(payload, dtype="<f8", offset=cls._head.size).astype(float)
        return cls(k, omega, beta, v_hub, preview)

    def __eq__(self, other):
        return (isinstance(other, Meas) and
                (self.k, self.omega, self.beta, self.v_hub) ==
                (other.k, other.omega, other.beta, other.v_hub) and
                np.array_equal(self.preview, other.preview))


@dataclass
class Cmd:
    k: int
    beta_cmd: float  # rad
    status: int
    solve_time_us: int

    msg_type = MSG_CMD
    _fmt = struct.Struct("<IdBI")

    def pack(self):
        return self._fmt.pack(self.k, self.beta_cmd, self.status, self.solve_time_us)

    @classmethod
    def unpack(cls, payload):
        if len(payload) != cls._fmt.size:
            raise ProtocolError(f"CMD payload has {len(payload)} bytes")
        return cls(*cls._fmt.unpack(payload))


@dataclass
class Bye:
    msg_type = MSG_BYE

    def pack(self):
        return b""

    @classmethod
    def unpack(cls, payload):
        if payload:
            raise ProtocolError("BYE carries no payload")
        return cls()


MESSAGES = {cls.msg_type: cls for cls in (Hello, Meas, Cmd, Bye)}


def encode_frame(msg_type, seq, payload: bytes) -> bytes:
    if len(payload) > MAX_PAYLOAD:
        raise ValueError(f"payload of {len(payload)} bytes does not fit a frame")
    head = HEADER.pack(MAGIC, VERSION, msg_type, seq & 0xFFFFFFFF, len(payload))
    return head + payload + CRC.pack(zlib.crc32(head + payload))


def decode_frame(data: bytes):
    """Parse one complete frame; returns (msg_type, seq, payload)."""
    if len(data) < HEADER.size + CRC.size:
        raise ProtocolError(f"frame of {len(data)} bytes is too short")
    magic, version, msg_type, seq, n = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported version {version}")
    if len(data) != HEADER.size + n + CRC.size:
        raise ProtocolError(f"payload_len {n} does not match frame size {len(data)}")
    body = data[:HEADER.size + n]
    (crc,) = CRC.unpack_from(data, HEADER.size + n)
    if crc != zlib.crc32(body):
        raise ProtocolError("CRC mismatch")
    return msg_type, seq, bytes(data[HEADER.size:HEADER.size + n])


def encode_message(msg, seq) -> bytes:
    return encode_frame(msg.msg_type, seq, msg.pack())


def decode_message(data: bytes):
    """Returns (message, seq)."""
    msg_type, seq, payload = decode_frame(data)
    cls = MESSAGES.get(msg_type)
    if cls is None:
        raise ProtocolError(f"unknown message type 0x{msg_type:02x}")
    return cls.unpack(payload), seq


class Link:
    """Framed message stream over a connected socket.

    Reads use a timeout instead of a background thread, so the owner of the
    link also owns the clock.
    """

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.buf = bytearray()
        self.seq = 0
        self.last_rx_seq = None
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def send(self, msg):
        self.send_raw(encode_message(msg, self.seq))

    def send_raw(self, frame: bytes):
        self.sock.sendall(frame)
        self.seq = (self.seq + 1) & 0xFFFFFFFF

    def _frame_length(self):
        if len(self.buf) < HEADER.size:
            return None
        if bytes(self.buf[:2]) != MAGIC:
            raise ProtocolError(f"bad magic {bytes(self.buf[:2])!r}")
        n = HEADER.unpack_from(self.buf)[4]
        return HEADER.size + n + CRC.size

    def recv(self, deadline=None):
        """Next message, or None if ``deadline`` (perf_counter time) passes first."""
        while True:
            size = self._frame_length()
            if size is not None and len(self.buf) >= size:
                data = bytes(self.buf[:size])
                del self.buf[:size]
                msg, seq = decode_message(data)
                self.last_rx_seq = seq
                return msg
            if deadline is None:
                self.sock.settimeout(None)
            else:
                remaining = deadline - time.perf_counter()
                if remaining <= 0:
                    return None
                self.sock.settimeout(remaining)
            try:
                chunk = self.sock.recv(65536)
            except socket.timeout:
                return None
            if not chunk:
                raise ConnectionError("peer closed the connection")
            self.buf.extend(chunk)

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass


# ---------------------------------------------------------------------------
# plant server

@dataclass
class HilStats:
    ticks: int = 0
    misses: int = 0
    max_consecutive_misses: int = 0
    stale_discarded: int = 0
    failsafe_tick: int | None = None
    latencies_us: list = field(default_factory=list)
    error: str | None = None

    @property
    def latency_mean_us(self):
        return float(np.mean(self.latencies_us)) if self.latencies_us else math.nan

    @property
    def latency_p99_us(self):
        return float(np.percentile(self.latencies_us, 99)) if self.latencies_us else math.nan

    def as_dict(self):
        return {"ticks": self.ticks, "misses": self.misses,
                "max_consecutive_misses": self.max_consecutive_misses,
                "stale_discarded": self.stale_discarded, "failsafe_tick": self.failsafe_tick,
                "latency_mean_us": self.latency_mean_us, "latency_p99_us": self.latency_p99_us,
                "error": self.error}


@dataclass
class HilResult:
    log: SimLog
    stats: HilStats
    aborted: bool = False


def accept_controller(listen_address, ctrl_period, Np, accept_timeout=30.0, on_listen=None):
    """Listen, accept one client and complete the HELLO handshake; returns a Link."""
    server = socket.create_server(tuple(listen_address))
    try:
        if on_listen is not None:
            on_listen(server.getsockname()[:2])
        server.settimeout(accept_timeout)
        conn, peer = server.accept()
    finally:
        server.close()
    link = Link(conn)
    try:
        link.send(Hello(ctrl_period, Np, STATE_DIM))
        reply = link.recv(time.perf_counter() + accept_timeout)
        if reply is None:
            raise HandshakeError("no HELLO reply from controller")
        if isinstance(reply, Bye):
            raise HandshakeError("controller rejected HELLO")
        if not isinstance(reply, Hello):
            raise HandshakeError(f"expected HELLO, got {type(reply).__name__}")
        if reply.Np != Np or reply.ctrl_period != ctrl_period or reply.state_dim != STATE_DIM:
            link.send(Bye())
            raise HandshakeError(f"HELLO mismatch: plant (Ts={ctrl_period}, Np={Np}), "
                                 f"controller (Ts={reply.ctrl_period}, Np={reply.Np})")
    except Exception:
        link.close()
        raise
    log.info("controller %s connected", peer)
    return link


class WireSource:
    """Plant-side command source: MEAS out, CMD back within the deadline."""

    def __init__(self, link: Link, Np, ctrl_period, limits, deadline_us, max_misses=5,
                 mode="lockstep"):
        if mode not in ("lockstep", "realtime"):
            raise ValueError(f"unknown HIL mode {mode!r}")
        if max_misses < 1:
            raise ValueError("max_misses must be >= 1")
        self.link, self.Np, self.ctrl_period, self.limits = link, Np, ctrl_period, limits
        self.deadline_s = deadline_us * 1e-6
        self.max_misses, self.mode = max_misses, mode
        self.stats = HilStats()
        self.last = 0.0
        self.run = 0
        self.failsafe = False
        self.closed = False
        self.t0 = None

    def start(self, beta0, preview_dev=None):
        # the client initializes itself from the first MEAS
        self.last = beta0
        self.t0 = time.perf_counter()

    def should_stop(self):
        return self.closed and not self.failsafe

    def _fail(self, reason):
        log.error("HIL protocol error: %s", reason)
        self.stats.error = reason
        self.close()

    def close(self):
        if not self.closed:
            try:
                self.link.send(Bye())
            except OSError:
                pass
            self.link.close()
            self.closed = True

    def _failsafe_cmd(self):
        step = self.limits.rate * self.ctrl_period
        self.last = min(self.limits.pitch_max, self.last + step)
        if self.last >= self.limits.pitch_max:
            self.close()
        return self.last, STATUS_FAILSAFE, 0.0

    def command(self, k, omega, beta, v_hub, preview_abs, op):
        self.stats.ticks += 1
        if self.failsafe:
            return self._failsafe_cmd()
        if self.closed:
            return self.last, int(CtrlStatus.FAULT), 0.0
        if self.mode == "realtime":
            wait = self.t0 + k * self.ctrl_period - time.perf_counter()
            if wait > 0:
                time.sleep(wait)
        try:
            self.link.send(Meas(k, omega, beta, v_hub, np.asarray(preview_abs, dtype=float)))
            t_send = time.perf_counter()
            deadline = t_send + self.deadline_s
            while True:
                msg = self.link.recv(deadline)
                if msg is None:
                    break
                if isinstance(msg, Cmd):
                    if msg.k == k:
                        self.stats.latencies_us.append((time.perf_counter() - t_send) * 1e6)
                        self.run = 0
                        self.last = msg.beta_cmd
                        return msg.beta_cmd, msg.status, float(msg.solve_time_us)
                    if msg.k < k:
                        self.stats.stale_discarded += 1
                        continue
                    raise ProtocolError(f"CMD for future tick {msg.k} at tick {k}")
                if isinstance(msg, Bye):
                    raise ProtocolError(f"controller sent BYE at tick {k}")
                raise ProtocolError(f"unexpected {type(msg).__name__} at tick {k}")
        except (ProtocolError, OSError) as exc:
            self._fail(str(exc))
            return self.last, int(CtrlStatus.FAULT), 0.0
        # deadline missed: hold the last command
        self.run += 1
        self.stats.misses += 1
        self.stats.max_consecutive_misses = max(self.stats.max_consecutive_misses, self.run)
        if self.run >= self.max_misses:
            self.failsafe = True
            self.stats.failsafe_tick = k + 1
            log.warning("%d consecutive deadline misses; feathering", self.run)
        return self.last, STATUS_MISSED, 0.0


def serve_plant(config: SimConfig, listen_address=("127.0.0.1", 0), deadline_us=None,
                max_misses=5, mode="lockstep", plant: Plant | None = None, seq=None,
                on_listen=None, accept_timeout=30.0) -> HilResult:
    """Run the closed loop with the controller in another process.

    ``deadline_us`` defaults to one control period.  ``on_listen`` receives the
    bound (host, port) before the server blocks in accept.
    """
    plant = plant or make_plant(Ts=config.ctrl_period)
    if seq is None:
        seq = config.inflow.build(config.dt_plant, config.seed)
    if deadline_us is None:
        deadline_us = config.ctrl_period * 1e6
    Np = config.controller.Np
    link = accept_controller(listen_address, config.ctrl_period, Np, accept_timeout, on_listen)
    source = WireSource(link, Np, config.ctrl_period, plant.limits, deadline_us, max_misses,
                        mode)
    source.Np = Np
    try:
        res = _loop(config, plant, seq, None, source, stop_hook=source.should_stop)
    finally:
        source.close()
    aborted = res.aborted or source.stats.error is not None
    return HilResult(log=res.log, stats=source.stats, aborted=aborted)


# ---------------------------------------------------------------------------
# controller client

@dataclass
class ClientReport:
    ticks: int = 0
    compute_us: list = field(default_factory=list)
    bye_received: bool = False
    error: str | None = None

    @property
    def compute_mean_us(self):
        return float(np.mean(self.compute_us)) if self.compute_us else math.nan

    @property
    def compute_p99_us(self):
        return float(np.percentile(self.compute_us, 99)) if self.compute_us else math.nan


def run_controller_client(controller: Controller, server_address, op, connect_timeout=10.0,
                          delay_s=0.0, corrupt_tick=None) -> ClientReport:
    """Serve commands until BYE.

    ``op`` is the design operating point used to form deviations.  The last
    two arguments inject faults for testing: a sleep before every CMD and a
    CMD frame with a broken CRC at one tick.
    """
    report = ClientReport()
    sock = socket.create_connection(tuple(server_address), timeout=connect_timeout)
    link = Link(sock)
    try:
        hello = link.recv(time.perf_counter() + connect_timeout)
        if not isinstance(hello, Hello):
            raise ProtocolError("expected HELLO from plant")
        if hello.Np != controller.Np or hello.ctrl_period != controller.Ts:
            link.send(Bye())
            raise HandshakeError(f"plant wants Np={hello.Np}, Ts={hello.ctrl_period}; "
                                 f"controller has Np={controller.Np}, Ts={controller.Ts}")
        link.send(Hello(controller.Ts, controller.Np, STATE_DIM))
        started = False
        while True:
            msg = link.recv()
            if isinstance(msg, Bye):
                report.bye_received = True
                break
            if not isinstance(msg, Meas):
                raise ProtocolError(f"unexpected {type(msg).__name__}")
            if not started:
                controller.initialize(msg.beta, np.asarray(msg.preview) - op.v)
                started = True
            t0 = time.perf_counter()
            out = controller.step(make_input(msg.k, msg.omega, msg.beta, msg.preview, op))
            report.compute_us.append((time.perf_counter() - t0) * 1e6)
            if delay_s > 0:
                time.sleep(delay_s)
            solve = int(min(max(round(out.solve_time_us), 0), 0xFFFFFFFF))
            frame = encode_message(Cmd(msg.k, out.beta_cmd, int(out.status), solve), link.seq)
            if corrupt_tick is not None and msg.k == corrupt_tick:
                frame = frame[:-1] + bytes([frame[-1] ^ 0xFF])
            link.send_raw(frame)
            report.ticks += 1
    except (ProtocolError, ConnectionError, OSError) as exc:
        report.error = str(exc)
        if isinstance(exc, HandshakeError):
            link.close()
            raise
    finally:
        link.close()
    return report


# ---------------------------------------------------------------------------
# open-loop replay validation

GOLDEN_FORMAT = "scaledwt-golden"
EXPECTED_COLUMN = "expected_beta_cmd_rad"


def record_golden(path, config: SimConfig, plant: Plant | None = None, seq=None,
                  controller: Controller | None = None):
    """Closed-loop run written as a golden file; returns the RunResult."""
    plant = plant or make_plant(Ts=config.ctrl_period)
    if seq is None:
        seq = config.inflow.build(config.dt_plant, config.seed)
    if controller is None:
        controller = build_controller(config.controller, plant)
    res = run_closed_loop(config, plant, seq, controller)
    if res.aborted:
        raise RuntimeError("run aborted; refusing to record a partial golden trace")
    meta = {"format": GOLDEN_FORMAT, "version": 1, "dt_plant": config.dt_plant,
            "ctrl_period": config.ctrl_period, "Np": controller.Np,
            "preview_noise_std": config.inflow.preview_noise_std,
            "noise_seed": preview_seed(config.seed), "n_samples": len(res.log),
            "op_v": plant.op.v, "op_omega": plant.op.omega, "controller": controller.name,
            "seed": config.seed}
    res.log.to_csv(path, extra={EXPECTED_COLUMN: res.log["beta_cmd_rad"]},
                   comment=json.dumps(meta, sort_keys=True))
    return res


def load_golden(path):
    """Returns (log, expected_cmd, metadata); raises GoldenSchemaError."""
    try:
        lg, extras, comment = SimLog.from_csv(path, extra=(EXPECTED_COLUMN,))
    except ValueError as exc:
        raise GoldenSchemaError(str(exc)) from exc
    if comment is None:
        raise GoldenSchemaError(f"{path}: missing metadata line")
    try:
        meta = json.loads(comment)
    except json.JSONDecodeError as exc:
        raise GoldenSchemaError(f"{path}: metadata is not JSON ({exc})") from exc
    needed = ("format", "dt_plant", "ctrl_period", "Np", "preview_noise_std", "noise_seed",
              "n_samples", "op_v", "op_omega")
    missing = [k for k in needed if k not in meta]
    if missing or meta["format"] != GOLDEN_FORMAT:
        raise GoldenSchemaError(f"{path}: metadata lacks {missing or 'format tag'}")
    if len(lg) != meta["n_samples"]:
        raise GoldenSchemaError(f"{path}: {len(lg)} rows, metadata promises "
                                f"{meta['n_samples']} (truncated file?)")
    return lg, extras[EXPECTED_COLUMN], meta


@dataclass
class ReplayReport:
    golden: object  # sim.GoldenReport
    ticks: int
    first_divergence_tick: int | None
    replayed_cmd: np.ndarray

    @property
    def passed(self):
        return self.golden.passed

    def __bool__(self):
        return self.passed


def replay_validate(golden_path, controller, tol=1e-9) -> ReplayReport:
    """Feed the recorded controller inputs through ``controller`` open-loop.

    ``controller`` is a Controller instance or any command source with the
    ``start``/``command`` interface, such as a WireSource talking to a remote
    client.
    """
    lg, expected, meta = load_golden(golden_path)
    source = CommandSource(controller) if isinstance(controller, Controller) else controller
    Np = controller.Np if isinstance(controller, Controller) else source.Np
    if Np != meta["Np"]:
        raise GoldenSchemaError(f"golden recorded with Np={meta['Np']}, controller has Np={Np}")
    dt, Ts = meta["dt_plant"], meta["ctrl_period"]
    ratio = int(round(Ts / dt))
    seq = inflow.WindSequence(dt=dt, samples=lg["v_hub_mps"])
    op = _OpView(meta["op_v"], meta["op_omega"])
    std, nseed = meta["preview_noise_std"], meta["noise_seed"]
    omega, beta, v = lg["omega_rad_s"], lg["beta_rad"], lg["v_hub_mps"]
    win0 = inflow.preview_at(seq, 0.0, Ts, Np, std, nseed)
    source.start(float(beta[0]), np.asarray(win0.values) - op.v)
    out = np.empty(len(lg))
    cmd = float(beta[0])
    ticks = 0
    for j in range(len(lg)):
        if j % ratio == 0:
            win = inflow.preview_at(seq, j * dt, Ts, Np, std, nseed)
            cmd = source.command(j // ratio, float(omega[j]), float(beta[j]), float(v[j]),
                                 win.values, op)[0]
            ticks += 1
        out[j] = cmd
    rep = golden_compare(out, expected, tol)
    first = rep.first_divergence_index
    return ReplayReport(golden=rep, ticks=ticks,
                        first_divergence_tick=None if first is None else first // ratio,
                        replayed_cmd=out)


@dataclass(frozen=True)
class _OpView:
    v: float
    omega: float


# ---------------------------------------------------------------------------
# horizon tuning

@dataclass
class HorizonProfile:
    """p99 wall-clock solve time (µs) per candidate horizon."""

    p99_us: dict  # Np -> µs
    trials: int

    def select(self, budget_us):
        if not budget_us > 0:
            raise ValueError("budget must be > 0")
        fits = [Np for Np, t in self.p99_us.items() if t <= budget_us]
        if not fits:
            lo = min(self.p99_us)
            warnings.warn(f"no horizon meets {budget_us} µs; even Np={lo} needs "
                          f"{self.p99_us[lo]:.0f} µs", RuntimeWarning, stacklevel=2)
            return lo
        return max(fits)


def trial_inputs(plant: Plant, config: SimConfig, Np_max, count=200):
    """Controller inputs sampled from a closed-loop run of ``config``."""
    seq = config.inflow.build(config.dt_plant, config.seed)
    res = run_closed_loop(config, plant, seq)
    ratio = config.ratio
    ticks = np.linspace(0, (len(res.log) - 1) // ratio, count).astype(int)
    out = []
    for k in ticks:
        j = k * ratio
        win = inflow.preview_at(seq, j * config.dt_plant, config.ctrl_period, Np_max)
        out.append(make_input(int(k), float(res.log["omega_rad_s"][j]),
                              float(res.log["beta_rad"][j]), win.values, plant.op))
    return out


def profile_horizons(spec, plant: Plant, trials, Np_grid=(1, 2, 5, 10, 15, 20, 30, 40)):
    """Measure per-horizon p99 solve time of the MPC described by ``spec``."""
    if not trials:
        raise ValueError("empty trial set")
    p99 = {}
    for Np in sorted(set(int(n) for n in Np_grid)):
        ctrl = build_controller(_replace_np(spec, Np), plant)
        if not isinstance(ctrl, MpcController):
            raise ValueError("tune_horizon needs an MPC controller spec")
        ctrl.deadline_budget_us = math.inf
        times = []
        for inp in trials:
            ctrl.initialize(inp.beta_meas)
            trimmed = ControllerInput(inp.k, inp.omega_err, inp.beta_meas, inp.preview[:Np])
            t0 = time.perf_counter()
            ctrl.step(trimmed)
            times.append((time.perf_counter() - t0) * 1e6)
        p99[Np] = float(np.percentile(times, 99))
    return HorizonProfile(p99_us=p99, trials=len(trials))


def tune_horizon(spec, budget_us, trials, plant: Plant | None = None,
                 Np_grid=(1, 2, 5, 10, 15, 20, 30, 40), profile: HorizonProfile | None = None):
    """Largest horizon whose p99 solve time fits the budget.

    Pass a shared ``profile`` when comparing budgets so that the selection is
    made on one set of measurements.
    """
    if not budget_us > 0:
        raise ValueError("budget must be > 0")
    if profile is None:
        if not trials:
            raise ValueError("empty trial set")
        plant = plant or make_plant()
        profile = profile_horizons(spec, plant, trials, Np_grid)
    return profile.select(budget_us)


def _replace_np(spec, Np):
    return replace(spec, Np=Np)
