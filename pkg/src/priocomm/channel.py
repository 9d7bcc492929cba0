"""Simulated slot-limited broadcast network.

Each step only ``slots`` of the N agents may transmit. In priority mode the
slots go to the agents with the highest announced priorities; if the
priority exchange itself is lost (one Bernoulli draw for the whole round),
the step falls back to the round-robin schedule. Messages are dropped
atomically (a lost broadcast reaches nobody), survive ``delay_steps`` steps
in flight, and carry their payload at 32-bit wire precision.

Loss draws come from one independent stream per sender plus one stream for
the round event, so outcomes follow agents rather than their labels.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError, ProtocolError

MODE_PRIORITY = "priority"
MODE_ROUND_ROBIN = "roundrobin"

PAYLOAD_LEN = 4
PAYLOAD_BYTES = PAYLOAD_LEN * 4  # four float32 on the wire

DEFAULT_PRIORITY_LEVELS = 8


@dataclass(frozen=True)
class NetworkConfig:
    n_agents: int
    slots: int
    mode: str = MODE_PRIORITY
    loss_prob: float = 0.2
    delay_steps: int = 1
    priority_loss_prob: float = 0.2

    def __post_init__(self):
        if self.mode not in (MODE_PRIORITY, MODE_ROUND_ROBIN):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.n_agents < 2:
            raise ConfigError("n_agents must be >= 2")
        if not (0 < self.slots < self.n_agents):
            raise ConfigError(f"slots must satisfy 0 < L < N, got L={self.slots} N={self.n_agents}")
        if not (0.0 <= self.loss_prob < 1.0) or not (0.0 <= self.priority_loss_prob < 1.0):
            raise ConfigError("loss probabilities must lie in [0, 1)")
        if self.delay_steps < 0:
            raise ConfigError("delay_steps must be >= 0")


@dataclass
class Message:
    sender: int
    payload: np.ndarray  # float32, length 4
    send_step: int


@dataclass
class Allocation:
    selected: list[int]        # ascending agent ids, always len == slots
    fallback: bool = False     # priority exchange lost, round-robin used


def encode_payload(payload) -> bytes:
    """Serialize a length-4 vector to its 16-byte wire form (4x float32 LE)."""
    vec = np.asarray(payload, dtype=np.float64).reshape(-1)
    if vec.shape != (PAYLOAD_LEN,):
        raise InputError(f"payload must have length {PAYLOAD_LEN}")
    return struct.pack("<4f", *vec)


def decode_payload(blob: bytes) -> np.ndarray:
    if len(blob) != PAYLOAD_BYTES:
        raise InputError(f"wire payload must be {PAYLOAD_BYTES} bytes, got {len(blob)}")
    return np.array(struct.unpack("<4f", blob), dtype=np.float32)


def priority_wire_size(n_levels: int) -> int:
    """Bits needed to encode a priority quantized to ``n_levels`` bins."""
    if n_levels < 2:
        raise InputError("n_levels must be >= 2")
    return int(math.ceil(math.log2(n_levels)))


def quantize_priority(p: float, n_levels: int = DEFAULT_PRIORITY_LEVELS) -> int:
    """Uniform bin index used for wire-size reporting only."""
    return min(int(p * n_levels), n_levels - 1)


def assemble_comm_obs(delivered: list[Message], receiver: int,
                      config: NetworkConfig) -> np.ndarray:
    """Fixed agent-ID layout: slot j holds sender j's payload or zeros.

    The receiver's own slot is always zeroed, as are slots of agents whose
    message did not arrive. Output length is exactly 4*N (float64).
    """
    out = np.zeros(PAYLOAD_LEN * config.n_agents)
    seen = set()
    for msg in delivered:
        if msg.sender in seen:
            raise ProtocolError(f"duplicate sender {msg.sender} in delivered batch")
        seen.add(msg.sender)
        if msg.sender == receiver:
            continue
        start = PAYLOAD_LEN * msg.sender
        out[start:start + PAYLOAD_LEN] = np.asarray(msg.payload, dtype=np.float64)
    return out


class Channel:
    """Owns the in-flight queue, round-robin cursor, and loss RNG streams."""

    def __init__(self, config: NetworkConfig, seed=None, *,
                 loss_rngs: list[np.random.Generator] | None = None,
                 round_rng: np.random.Generator | None = None):
        self.config = config
        if loss_rngs is None or round_rng is None:
            children = np.random.SeedSequence(seed).spawn(config.n_agents + 1)
            if loss_rngs is None:
                loss_rngs = [np.random.default_rng(s) for s in children[:config.n_agents]]
            if round_rng is None:
                round_rng = np.random.default_rng(children[config.n_agents])
        if len(loss_rngs) != config.n_agents:
            raise ConfigError("need one loss stream per agent")
        self._loss_rngs = loss_rngs
        self._round_rng = round_rng
        self._queue: list[tuple[Message, int]] = []
        self.cursor = 0
        self._last_deliver_step: int | None = None

    def _round_robin_selection(self) -> list[int]:
        cfg = self.config
        selected = [(self.cursor + k) % cfg.n_agents for k in range(cfg.slots)]
        self.cursor = (self.cursor + cfg.slots) % cfg.n_agents
        return sorted(selected)

    def allocate_slots(self, priorities=None) -> Allocation:
        """Pick the transmitting agents for this step.

        Priority mode selects the L highest priorities (ties to the lower
        id) unless the whole priority exchange is lost, in which case the
        step uses - and advances - the round-robin schedule.
        """
        cfg = self.config
        if cfg.mode == MODE_ROUND_ROBIN:
            return Allocation(self._round_robin_selection(), fallback=False)
        p = np.asarray(priorities, dtype=np.float64).reshape(-1)
        if p.shape != (cfg.n_agents,):
            raise InputError(f"need {cfg.n_agents} priorities, got shape {p.shape}")
        if not np.all(np.isfinite(p)) or np.any(p <= 0.0) or np.any(p >= 1.0):
            raise InputError("priorities must lie strictly inside (0,1)")
        if self._round_rng.random() < cfg.priority_loss_prob:
            return Allocation(self._round_robin_selection(), fallback=True)
        order = np.lexsort((np.arange(cfg.n_agents), -p))
        return Allocation(sorted(int(i) for i in order[:cfg.slots]), fallback=False)

    def transmit(self, selected: list[int], payloads, now: int) -> list[int]:
        """Broadcast one payload per selected agent; returns the dropped ids.

        Each transmission survives an independent Bernoulli(loss_prob) draw
        from its sender's stream; survivors are queued for delivery at
        ``now + delay_steps``. A drop is atomic: no receiver gets the message.
        """
        cfg = self.config
        if len(payloads) != len(selected):
            raise InputError("need exactly one payload per selected agent")
        dropped = []
        for agent, payload in zip(selected, payloads):
            if self._loss_rngs[agent].random() < cfg.loss_prob:
                dropped.append(agent)
                continue
            wire = decode_payload(encode_payload(payload))  # 32-bit wire precision
            msg = Message(sender=agent, payload=wire, send_step=now)
            self._queue.append((msg, now + cfg.delay_steps))
        return dropped

    def deliver(self, now: int) -> list[Message]:
        """Remove and return the messages due exactly at ``now``, by sender id."""
        if self._last_deliver_step is not None and now < self._last_deliver_step:
            raise InputError(f"deliver time went backwards: {now} < {self._last_deliver_step}")
        self._last_deliver_step = now
        due = [msg for msg, when in self._queue if when == now]
        self._queue = [(msg, when) for msg, when in self._queue if when != now]
        return sorted(due, key=lambda m: m.sender)

    def flush(self) -> None:
        """Drop all in-flight messages (used at episode boundaries)."""
        self._queue.clear()

    @property
    def pending(self) -> int:
        return len(self._queue)


@dataclass
class CommStats:
    """Running bandwidth accounting for one run."""

    n_agents: int
    priority_levels: int = DEFAULT_PRIORITY_LEVELS
    steps: int = 0
    messages_sent: int = 0
    messages_dropped: int = 0
    fallback_steps: int = 0
    priority_steps: int = 0

    def record(self, alloc: Allocation, dropped: list[int], priority_mode: bool) -> None:
        self.steps += 1
        self.messages_sent += len(alloc.selected)
        self.messages_dropped += len(dropped)
        if alloc.fallback:
            self.fallback_steps += 1
        if priority_mode:
            self.priority_steps += 1

    def report(self) -> dict:
        # every agent announces its quantized priority on each priority step
        bits = self.priority_steps * self.n_agents * priority_wire_size(self.priority_levels)
        return {
            "steps": self.steps,
            "messages_sent": self.messages_sent,
            "messages_dropped": self.messages_dropped,
            "bytes_sent": self.messages_sent * PAYLOAD_BYTES,
            "fallback_steps": self.fallback_steps,
            "priority_bits_total": bits,
            "priority_bits_per_step": bits / self.steps if self.steps else 0.0,
        }

    def to_json(self) -> str:
        return json.dumps(self.report(), indent=2, sort_keys=True)
