from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any, Final, Literal, Mapping, Optional, Protocol, Sequence, Union

import numpy as np

from app.core.errors import IntegrityFault
from app.core.geometry import Pose, wrap_angle
from app.services.world_model import Footprint, overlap


logger = logging.getLogger(__name__)


EGO_ID: Final[int] = 0
PEDESTRIAN_HALF_SIZE: Final[float] = 0.25

WeatherCondition = Literal["clear", "rain", "fog"]


@dataclass(frozen=True, slots=True)
class VehicleParams:
    wheelbase: float = 3.0
    length: float = 5.0
    width: float = 2.0
    max_brake: float = 6.0
    max_drive: float = 2.0
    steering_limit: float = 0.55
    steering_rate_limit: float = 0.7

    def __post_init__(self) -> None:
        if self.wheelbase <= 0:
            raise ValueError("wheelbase must be positive")
        if self.length <= 0 or self.width <= 0:
            raise ValueError("footprint dimensions must be positive")

    @property
    def front_overhang(self) -> float:
        """Rear axle to front bumper."""
        return self.wheelbase / 2.0 + self.length / 2.0


@dataclass(frozen=True, slots=True)
class VehicleState:
    x: float
    y: float
    yaw: float
    speed: float = 0.0
    steering: float = 0.0
    params: VehicleParams = field(default_factory=VehicleParams)

    @property
    def pose(self) -> Pose:
        return Pose(self.x, self.y, self.yaw)

    def footprint(self) -> Footprint:
        # Reference point is the rear axle; the body is centred half a wheelbase ahead of it.
        off = self.params.wheelbase / 2.0
        return Footprint(
            center=(self.x + off * math.cos(self.yaw), self.y + off * math.sin(self.yaw)),
            yaw=self.yaw,
            half_length=self.params.length / 2.0,
            half_width=self.params.width / 2.0,
        )

    def front_bumper(self) -> tuple[float, float]:
        f = self.params.front_overhang
        return self.x + f * math.cos(self.yaw), self.y + f * math.sin(self.yaw)


@dataclass(frozen=True, slots=True)
class ControlCommand:
    steering_target: float = 0.0
    accel: float = 0.0
    emergency_brake: bool = False

    def clamped(self, params: VehicleParams) -> ControlCommand:
        return ControlCommand(
            steering_target=min(max(self.steering_target, -params.steering_limit), params.steering_limit),
            accel=min(max(self.accel, -params.max_brake), params.max_drive),
            emergency_brake=self.emergency_brake,
        )


@dataclass(frozen=True, slots=True)
class WeatherState:
    condition: WeatherCondition = "clear"
    friction_factor: float = 1.0
    sensor_noise_scale: float = 1.0
    sensor_dropout_prob: float = 0.0
    # Applied to cruise speed in non-ideal weather.
    speed_factor: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 < self.friction_factor <= 1.0:
            raise ValueError("friction_factor must be in (0, 1]")
        if self.sensor_noise_scale < 1.0:
            raise ValueError("sensor_noise_scale must be >= 1")
        if not 0.0 <= self.sensor_dropout_prob <= 1.0:
            raise ValueError("sensor_dropout_prob must be a probability")
        if not 0.0 < self.speed_factor <= 1.0:
            raise ValueError("speed_factor must be in (0, 1]")
        if self.condition == "clear" and (
            self.friction_factor != 1.0 or self.sensor_noise_scale != 1.0 or self.sensor_dropout_prob != 0.0
        ):
            raise ValueError("clear weather has no friction, noise or dropout penalty")

    @classmethod
    def clear(cls) -> WeatherState:
        return cls()

    @classmethod
    def rain(cls, friction_factor: float = 0.5) -> WeatherState:
        return cls("rain", friction_factor, 1.5, 0.05, 0.8)

    @classmethod
    def fog(cls) -> WeatherState:
        return cls("fog", 0.9, 2.0, 0.15, 0.7)

    @classmethod
    def preset(cls, name: str) -> WeatherState:
        presets = {"clear": cls.clear, "rain": cls.rain, "fog": cls.fog}
        if name not in presets:
            raise ValueError(f"Unknown weather preset: {name}")
        return presets[name]()


@dataclass(frozen=True, slots=True)
class NpcAgent:
    id: int
    vehicle: VehicleState
    policy_state: Any = None
    active: bool = True

    def footprint(self) -> Footprint:
        return self.vehicle.footprint()


@dataclass(frozen=True, slots=True)
class PedestrianAgent:
    id: int
    x: float
    y: float
    vx: float = 0.0
    vy: float = 0.0
    policy_state: Any = None
    active: bool = True

    @property
    def speed(self) -> float:
        return math.hypot(self.vx, self.vy)

    def footprint(self) -> Footprint:
        return Footprint(center=(self.x, self.y), yaw=0.0, half_length=PEDESTRIAN_HALF_SIZE, half_width=PEDESTRIAN_HALF_SIZE)


Agent = Union[NpcAgent, PedestrianAgent]


@dataclass(frozen=True, slots=True)
class SimEvent:
    tick: int
    time: float
    kind: str
    data: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True, slots=True)
class AgentDecision:
    """What a policy wants for one tick. Vehicles use `command`, pedestrians `velocity`."""

    command: Optional[ControlCommand] = None
    velocity: Optional[tuple[float, float]] = None
    policy_state: Any = None
    active: bool = True
    events: tuple[tuple[str, Mapping[str, Any]], ...] = ()


class AgentPolicy(Protocol):
    def __call__(self, state: SimState, agent: Agent, rng: np.random.Generator) -> AgentDecision: ...


@dataclass(frozen=True, slots=True)
class SimState:
    tick: int
    dt: float
    ego: VehicleState
    npcs: tuple[NpcAgent, ...] = ()
    pedestrians: tuple[PedestrianAgent, ...] = ()
    weather: WeatherState = field(default_factory=WeatherState)
    rng_state: Mapping[str, Any] = field(default_factory=dict)
    events: tuple[SimEvent, ...] = ()
    contacts: frozenset[tuple[int, int]] = frozenset()

    @property
    def time(self) -> float:
        return self.tick * self.dt

    def with_events(self, *new: tuple[str, Mapping[str, Any]]) -> SimState:
        stamped = tuple(SimEvent(self.tick, self.time, kind, dict(data)) for kind, data in new)
        return replace(self, events=self.events + stamped)

    def agent(self, agent_id: int) -> Agent:
        for a in self.npcs:
            if a.id == agent_id:
                return a
        for p in self.pedestrians:
            if p.id == agent_id:
                return p
        raise KeyError(agent_id)

    def footprints(self, *, include_ego: bool = True) -> list[tuple[int, Footprint]]:
        """Active bodies in ascending id order."""
        out: list[tuple[int, Footprint]] = [(EGO_ID, self.ego.footprint())] if include_ego else []
        bodies: list[tuple[int, Footprint]] = [(a.id, a.footprint()) for a in self.npcs if a.active]
        bodies += [(p.id, p.footprint()) for p in self.pedestrians if p.active]
        return out + sorted(bodies, key=lambda b: b[0])


def make_rng_state(seed: Union[int, np.random.SeedSequence]) -> dict[str, Any]:
    return dict(np.random.Generator(np.random.PCG64(seed)).bit_generator.state)


def initial_state(
    ego: VehicleState,
    *,
    npcs: Sequence[NpcAgent] = (),
    pedestrians: Sequence[PedestrianAgent] = (),
    weather: Optional[WeatherState] = None,
    seed: Union[int, np.random.SeedSequence] = 0,
    dt: float = 0.02,
) -> SimState:
    if dt <= 0:
        raise ValueError("dt must be positive")
    ids = [a.id for a in npcs] + [p.id for p in pedestrians]
    if EGO_ID in ids or len(set(ids)) != len(ids):
        raise ValueError("Agent ids must be unique and distinct from the ego id")
    return SimState(
        tick=0,
        dt=dt,
        ego=ego,
        npcs=tuple(sorted(npcs, key=lambda a: a.id)),
        pedestrians=tuple(sorted(pedestrians, key=lambda p: p.id)),
        weather=weather or WeatherState.clear(),
        rng_state=make_rng_state(seed),
    )


def bicycle_step(v: VehicleState, cmd: ControlCommand, weather: WeatherState, dt: float) -> VehicleState:
    """Explicit Euler kinematic bicycle about the rear axle."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    p = v.params
    max_delta = p.steering_rate_limit * dt
    target = min(max(cmd.steering_target, -p.steering_limit), p.steering_limit)
    steering = v.steering + min(max(target - v.steering, -max_delta), max_delta)
    steering = min(max(steering, -p.steering_limit), p.steering_limit)

    brake = p.max_brake * weather.friction_factor
    accel = -brake if cmd.emergency_brake else min(max(cmd.accel, -brake), p.max_drive)
    speed = max(0.0, v.speed + accel * dt)

    yaw = wrap_angle(v.yaw + (v.speed / p.wheelbase) * math.tan(steering) * dt)
    x = v.x + v.speed * math.cos(v.yaw) * dt
    y = v.y + v.speed * math.sin(v.yaw) * dt
    return VehicleState(x=x, y=y, yaw=yaw, speed=speed, steering=steering, params=p)


def _check_finite(tick: int, prefix: str, **values: float) -> None:
    for name, value in values.items():
        if not math.isfinite(value):
            raise IntegrityFault(f"non-finite value {value!r}", tick=tick, field=f"{prefix}.{name}")


def _check_vehicle(tick: int, prefix: str, v: VehicleState) -> None:
    _check_finite(tick, prefix, x=v.x, y=v.y, yaw=v.yaw, speed=v.speed, steering=v.steering)


def step(
    state: SimState,
    ego_cmd: ControlCommand,
    dt: float,
    *,
    policies: Optional[Mapping[int, AgentPolicy]] = None,
) -> SimState:
    """
    Advance one fixed tick.

    Order: policies in ascending agent id (sampling the previous state and the
    shared RNG), integrate every agent, record collision onsets, advance time.
    """
    if dt != state.dt:
        raise ValueError(f"dt {dt} differs from the configured step {state.dt}")
    _check_finite(state.tick, "ego_cmd", steering_target=ego_cmd.steering_target, accel=ego_cmd.accel)
    policies = policies or {}

    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = dict(state.rng_state)

    agents: list[Agent] = sorted([*state.npcs, *state.pedestrians], key=lambda a: a.id)
    decisions: dict[int, AgentDecision] = {}
    for agent in agents:
        policy = policies.get(agent.id)
        if policy is not None:
            decisions[agent.id] = policy(state, agent, rng)

    events: list[SimEvent] = list(state.events)
    next_tick = state.tick + 1
    stamp = next_tick * dt

    def emit(kind: str, data: Mapping[str, Any]) -> None:
        events.append(SimEvent(next_tick, stamp, kind, dict(data)))

    ego = bicycle_step(state.ego, ego_cmd, state.weather, dt)
    _check_vehicle(state.tick, "ego", ego)

    npcs: list[NpcAgent] = []
    for a in state.npcs:
        d = decisions.get(a.id)
        active = d.active if d is not None else a.active
        policy_state = d.policy_state if d is not None else a.policy_state
        vehicle = a.vehicle
        if active and a.active:
            cmd = d.command if d is not None and d.command is not None else ControlCommand()
            vehicle = bicycle_step(vehicle, cmd, state.weather, dt)
            _check_vehicle(state.tick, f"npc[{a.id}]", vehicle)
        if active != a.active:
            emit("spawn" if active else "despawn", {"agent": a.id})
        for kind, data in (d.events if d is not None else ()):
            emit(kind, {"agent": a.id, **data})
        npcs.append(NpcAgent(id=a.id, vehicle=vehicle, policy_state=policy_state, active=active))

    peds: list[PedestrianAgent] = []
    for p in state.pedestrians:
        d = decisions.get(p.id)
        active = d.active if d is not None else p.active
        policy_state = d.policy_state if d is not None else p.policy_state
        vx, vy = d.velocity if d is not None and d.velocity is not None else (p.vx, p.vy)
        x, y = p.x, p.y
        if active and p.active:
            x, y = p.x + vx * dt, p.y + vy * dt
            _check_finite(state.tick, f"pedestrian[{p.id}]", x=x, y=y, vx=vx, vy=vy)
        if active != p.active:
            emit("spawn" if active else "despawn", {"agent": p.id})
        for kind, data in (d.events if d is not None else ()):
            emit(kind, {"agent": p.id, **data})
        peds.append(PedestrianAgent(id=p.id, x=x, y=y, vx=vx, vy=vy, policy_state=policy_state, active=active))

    nxt = SimState(
        tick=next_tick,
        dt=dt,
        ego=ego,
        npcs=tuple(npcs),
        pedestrians=tuple(peds),
        weather=state.weather,
        rng_state=dict(rng.bit_generator.state),
        events=(),
        contacts=frozenset(),
    )

    bodies = nxt.footprints()
    contacts: set[tuple[int, int]] = set()
    for i in range(len(bodies)):
        for j in range(i + 1, len(bodies)):
            if overlap(bodies[i][1], bodies[j][1]):
                contacts.add((bodies[i][0], bodies[j][0]))
    for pair in sorted(contacts - state.contacts):
        emit("collision", {"a": pair[0], "b": pair[1]})
        logger.debug("Collision onset at tick %d between %d and %d", next_tick, *pair)

    return replace(nxt, events=tuple(events), contacts=frozenset(contacts))
