"""
Lockstep TCP bridge for external controllers.

Newline-delimited JSON BridgeMessages over one connection. The server sends
`hello`, then per tick the sensor topics followed by `traffic_rules`, and
waits for exactly one `ctrl_cmd` for that tick before stepping the world.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Any, Optional

import anyio
import numpy as np
from anyio.abc import SocketAttribute, SocketStream
from anyio.streams.buffered import BufferedByteReceiveStream
from pydantic import BaseModel, ConfigDict, Field, ValidationError
from tenacity import AsyncRetrying, retry_if_exception_type, stop_after_attempt, wait_fixed

from app.core.config import Settings
from app.core.errors import ProtocolError
from app.core.geometry import Pose
from app.services.ego_stack import (
    CONTROLLER_EVENT_KINDS,
    CrosswalkStatus,
    EgoObservation,
    EgoStep,
    PoseSource,
    TrafficRules,
)
from app.services.formats import FORMAT_VERSION, BridgeMessage, ScenarioOutcome, ScenarioSpec
from app.services.ndt_localization import Extrinsic, NdtLocalizer, NdtMap
from app.services.scenario_harness import ScenarioSession, make_ego_controller, prepare
from app.services.sensors import GpsFix, OdometryDelta, PointCloud
from app.services.sim_engine import ControlCommand
from app.services.trace import jsonable
from app.services.traffic import ObjectListMessage, ObjectReport
from app.services.world_model import Footprint


logger = logging.getLogger(__name__)


MAX_LINE_BYTES = 8 * 1024 * 1024
TOPICS = (
    "hello", "scan", "odom", "gps", "pose_estimate", "object_list", "ego_state", "traffic_rules",
    "ctrl_cmd", "error", "bye",
)


def _reject_constant(name: str) -> Any:
    raise ValueError(f"non-finite number {name}")


def parse_message(line: bytes) -> BridgeMessage:
    try:
        return BridgeMessage.model_validate(json.loads(line.decode("utf-8"), parse_constant=_reject_constant))
    except (UnicodeDecodeError, ValueError, ValidationError) as e:
        raise ProtocolError(f"Malformed message: {e}") from e


class _Sequencer:
    """Per-topic sequence numbers for one side of one connection."""

    def __init__(self) -> None:
        self._next: dict[str, int] = {}

    def message(self, topic: str, stamp: float, data: dict[str, Any]) -> BridgeMessage:
        seq = self._next.get(topic, 0)
        self._next[topic] = seq + 1
        return BridgeMessage(topic=topic, seq=seq, stamp=stamp, data=jsonable(data))


# ---------------------------------------------------------------------------
# Observation and command codecs
# ---------------------------------------------------------------------------


def _pose(p: Optional[Pose]) -> Optional[list[float]]:
    return None if p is None else [p.x, p.y, p.yaw]


def encode_observation(obs: EgoObservation, *, pose_estimate: Optional[Pose] = None, localized: bool = True) -> list[tuple[str, dict[str, Any]]]:
    out: list[tuple[str, dict[str, Any]]] = []
    if obs.scan is not None:
        scan = obs.scan
        ranges = scan.ranges if scan.ranges is not None else np.zeros(0)
        out.append(("scan", {
            "stamp": scan.stamp,
            "points": scan.points.tolist(),
            "beam_angles": None if scan.beam_angles is None else np.asarray(scan.beam_angles).tolist(),
            "ranges": [float(r) if np.isfinite(r) else None for r in ranges],
            "dropped": [int(i) for i in np.flatnonzero(np.isnan(ranges))],
            "max_range": scan.max_range,
        }))
    if obs.odometry is not None:
        o = obs.odometry
        out.append(("odom", {"d_translation": o.d_translation, "d_yaw": o.d_yaw, "interval": o.interval}))
    if obs.gps is not None:
        g = obs.gps
        out.append(("gps", {"position": None if g.position is None else list(g.position), "valid": g.valid,
                            "noise_sigma": g.noise_sigma}))
    if pose_estimate is not None or not localized:
        out.append(("pose_estimate", {"pose": _pose(pose_estimate), "lost": not localized}))
    if obs.objects is not None:
        out.append(("object_list", {
            "stamp": obs.objects.stamp,
            "objects": [
                {"id": r.id, "position": list(r.position), "velocity": list(r.velocity), "yaw": r.yaw,
                 "length": r.length, "width": r.width}
                for r in obs.objects.objects
            ],
        }))
    agents = None
    if obs.truth_agents is not None:
        agents = [[i, fp.center[0], fp.center[1], fp.yaw, fp.half_length, fp.half_width] for i, fp in obs.truth_agents]
    out.append(("ego_state", {"tick": obs.tick, "time": obs.time, "speed": obs.speed, "pose": _pose(obs.pose),
                              "agents": agents}))
    rules = obs.rules
    out.append(("traffic_rules", {
        "granted": sorted(rules.granted),
        "occupied_zones": sorted(rules.occupied_zones),
        "crosswalks": [[c.index, c.inside, c.waiting] for c in rules.crosswalks],
    }))
    return out


def decode_observation(batch: dict[str, dict[str, Any]]) -> EgoObservation:
    """Rebuild the observation of one tick from its topic payloads."""
    state = batch["ego_state"]
    scan = None
    if "scan" in batch:
        d = batch["scan"]
        dropped = set(d["dropped"])
        ranges = np.array(
            [r if r is not None else (np.nan if k in dropped else np.inf) for k, r in enumerate(d["ranges"])],
            dtype=float,
        )
        points = np.asarray(d["points"], dtype=float).reshape(-1, 2)
        angles = None if d["beam_angles"] is None else np.asarray(d["beam_angles"], dtype=float)
        scan = PointCloud(points=points, stamp=d["stamp"], beam_angles=angles, ranges=ranges,
                          max_range=d["max_range"] if d["max_range"] is not None else np.inf)
    odometry = None
    if "odom" in batch:
        d = batch["odom"]
        odometry = OdometryDelta(d["d_translation"], d["d_yaw"], d["interval"])
    gps = None
    if "gps" in batch:
        d = batch["gps"]
        gps = GpsFix(position=None if d["position"] is None else tuple(d["position"]), valid=d["valid"],
                     noise_sigma=d["noise_sigma"])
    objects = None
    if "object_list" in batch:
        d = batch["object_list"]
        objects = ObjectListMessage(stamp=d["stamp"], objects=tuple(
            ObjectReport(id=o["id"], position=tuple(o["position"]), velocity=tuple(o["velocity"]), yaw=o["yaw"],
                         length=o["length"], width=o["width"])
            for o in d["objects"]
        ))
    truth = None
    if state.get("agents") is not None:
        truth = tuple(
            (int(a[0]), Footprint(center=(a[1], a[2]), yaw=a[3], half_length=a[4], half_width=a[5]))
            for a in state["agents"]
        )
    r = batch["traffic_rules"]
    rules = TrafficRules(
        granted=frozenset(r["granted"]),
        occupied_zones=frozenset(r["occupied_zones"]),
        crosswalks=tuple(CrosswalkStatus(int(c[0]), bool(c[1]), bool(c[2])) for c in r["crosswalks"]),
    )
    pose = None if state["pose"] is None else Pose(*state["pose"])
    return EgoObservation(
        tick=state["tick"], time=state["time"], speed=state["speed"], pose=pose, scan=scan,
        odometry=odometry, gps=gps, objects=objects, truth_agents=truth, rules=rules,
    )


class CtrlCmd(BaseModel):
    model_config = ConfigDict(extra="forbid")

    tick: int = Field(ge=0)
    steering_target: float
    accel: float
    emergency_brake: bool = False
    events: list[tuple[str, dict[str, Any]]] = Field(default_factory=list)
    detections: list[tuple[Optional[int], tuple[float, float]]] = Field(default_factory=list)


def encode_command(tick: int, result: EgoStep) -> dict[str, Any]:
    cmd = result.command
    return {
        "tick": tick,
        "steering_target": cmd.steering_target,
        "accel": cmd.accel,
        "emergency_brake": cmd.emergency_brake,
        "events": [[kind, dict(data)] for kind, data in result.events],
        "detections": [[agent, list(point)] for agent, point in result.detections],
    }


# ---------------------------------------------------------------------------
# Server
# ---------------------------------------------------------------------------


class BridgeServer:
    """Runs one scenario session for one client connection."""

    def __init__(
        self,
        spec: ScenarioSpec,
        *,
        host: str = "127.0.0.1",
        port: int = 0,
        settings: Optional[Settings] = None,
        base_dir: Optional[Path] = None,
        ndt_map: Optional[NdtMap] = None,
        out_dir: Optional[Path] = None,
    ) -> None:
        self.spec = spec
        self.host = host
        self.port = port
        self.out_dir = out_dir
        self.session = ScenarioSession(spec, settings=settings, base_dir=base_dir, ndt_map=ndt_map)
        setup = self.session.setup
        self.pose_source: Optional[PoseSource] = None
        if spec.localization.mode == "ndt":
            assert setup.ndt_map is not None
            self.pose_source = PoseSource(
                setup.route, "ndt", on_lost=spec.localization.on_lost,
                localizer=NdtLocalizer(setup.ndt_map, Extrinsic(setup.lidar.mount_pose),
                                       downsample_radius=spec.localization.downsample_radius),
            )
        self.commands_received = 0
        self.outcome: Optional[ScenarioOutcome] = None
        self._out = _Sequencer()
        self._last_client_seq = -1

    async def serve(self, *, task_status: anyio.abc.TaskStatus[int] = anyio.TASK_STATUS_IGNORED) -> ScenarioOutcome:
        """Accept one client, run the session in lockstep with it and return the outcome."""
        listener = await anyio.create_tcp_listener(local_host=self.host, local_port=self.port)
        async with listener:
            sock = listener.listeners[0]
            port = sock.extra(SocketAttribute.local_port)
            logger.info("Bridge for %s listening on %s:%d", self.spec.name, self.host, port)
            task_status.started(port)
            stream = await sock.accept()
        async with stream:
            self.outcome = await self._run(stream)
        return self.outcome

    async def _send(self, stream: SocketStream, topic: str, stamp: float, data: dict[str, Any]) -> None:
        await stream.send(self._out.message(topic, stamp, data).to_line())

    async def _run(self, stream: SocketStream) -> ScenarioOutcome:
        session = self.session
        reader = BufferedByteReceiveStream(stream)
        partial_run, aborted = False, None
        try:
            await self._send(stream, "hello", 0.0, {
                "version": FORMAT_VERSION,
                "dt": self.spec.dt,
                "topics": list(TOPICS),
                "scenario": self.spec.model_dump(mode="json"),
            })
            while not session.finished:
                obs = session.observe()
                estimate, localized = self._localize(obs)
                for topic, data in encode_observation(obs, pose_estimate=estimate, localized=localized):
                    await self._send(stream, topic, obs.time, data)
                result = await self._await_command(reader, stream, obs)
                session.advance(result)
            await self._send(stream, "bye", session.state.time, {"ticks": session.state.tick,
                                                                 "completed": session.completed})
        except (anyio.EndOfStream, anyio.IncompleteRead, anyio.BrokenResourceError, anyio.ClosedResourceError):
            partial_run, aborted = True, "client_disconnected"
            logger.warning("Bridge client disconnected at tick %d", session.state.tick)
        except ProtocolError as e:
            partial_run, aborted = True, "protocol_error"
            logger.error("Bridge session aborted at tick %d: %s", session.state.tick, e)
        return session.close(self.out_dir, partial=partial_run, aborted=aborted)

    def _localize(self, obs: EgoObservation) -> tuple[Optional[Pose], bool]:
        """Server-side pose for the `pose_estimate` topic; localizer events are logged, not traced."""
        if self.pose_source is None:
            return None, True
        events: list = []
        estimate = self.pose_source.update(obs, events)
        for kind, data in events:
            logger.warning("Bridge localizer at tick %d: %s %s", obs.tick, kind, dict(data))
        return estimate, estimate is not None

    async def _reply_error(self, stream: SocketStream, stamp: float, reason: str, **extra: Any) -> None:
        logger.warning("Bridge protocol error: %s", reason)
        await self._send(stream, "error", stamp, {"reason": reason, **extra})

    async def _await_command(self, reader: BufferedByteReceiveStream, stream: SocketStream, obs: EgoObservation) -> EgoStep:
        while True:
            try:
                line = await reader.receive_until(b"\n", MAX_LINE_BYTES)
            except anyio.DelimiterNotFound as e:
                await self._reply_error(stream, obs.time, "line too long")
                raise ProtocolError("Message exceeds the line limit") from e
            try:
                msg = parse_message(line)
            except ProtocolError as e:
                await self._reply_error(stream, obs.time, "malformed", detail=str(e))
                raise
            if msg.topic != "ctrl_cmd":
                await self._reply_error(stream, obs.time, "unexpected topic", topic=msg.topic)
                continue
            if msg.seq <= self._last_client_seq:
                await self._reply_error(stream, obs.time, "seq not increasing", seq=msg.seq)
                continue
            self._last_client_seq = msg.seq
            try:
                cmd = CtrlCmd.model_validate(msg.data)
            except ValidationError as e:
                await self._reply_error(stream, obs.time, "invalid ctrl_cmd", detail=str(e.errors()[0]["msg"]))
                continue
            if cmd.tick != obs.tick:
                reason = "duplicate ctrl_cmd" if cmd.tick < obs.tick else "ctrl_cmd for a future tick"
                await self._reply_error(stream, obs.time, reason, tick=cmd.tick, expected=obs.tick)
                continue
            self.commands_received += 1
            rejected = sorted({kind for kind, _ in cmd.events if kind not in CONTROLLER_EVENT_KINDS})
            if rejected:
                await self._reply_error(stream, obs.time, "event kind not allowed", tick=cmd.tick, kinds=rejected)
            return self._to_step(cmd)

    def _to_step(self, cmd: CtrlCmd) -> EgoStep:
        params = self.session.setup.params
        raw = ControlCommand(cmd.steering_target, cmd.accel, cmd.emergency_brake)
        clamped = raw.clamped(params)
        events = [(kind, data) for kind, data in cmd.events if kind in CONTROLLER_EVENT_KINDS]
        if clamped != raw:
            logger.warning(
                "Clamped ctrl_cmd at tick %d: steering %.3f -> %.3f, accel %.3f -> %.3f",
                cmd.tick, raw.steering_target, clamped.steering_target, raw.accel, clamped.accel,
            )
            events.append(("command_clamped", {
                "steering_target": raw.steering_target, "accel": raw.accel,
            }))
        detections = tuple((agent, (float(p[0]), float(p[1]))) for agent, p in cmd.detections)
        return EgoStep(command=clamped, events=tuple(events), detections=detections)


def serve_scenario(spec: ScenarioSpec, **kwargs: Any) -> ScenarioOutcome:
    """Blocking bridge session (see BridgeServer for the keyword arguments)."""
    server = BridgeServer(spec, **kwargs)
    return anyio.run(server.serve)


# ---------------------------------------------------------------------------
# Client
# ---------------------------------------------------------------------------


@dataclass
class BridgeClient:
    host: str
    port: int
    attempts: int = 50
    retry_wait: float = 0.1
    _stream: Optional[SocketStream] = field(default=None, init=False, repr=False)
    _reader: Optional[BufferedByteReceiveStream] = field(default=None, init=False, repr=False)
    _out: _Sequencer = field(default_factory=_Sequencer, init=False, repr=False)

    async def connect(self) -> None:
        async for attempt in AsyncRetrying(
            stop=stop_after_attempt(self.attempts),
            wait=wait_fixed(self.retry_wait),
            retry=retry_if_exception_type(OSError),
            reraise=True,
        ):
            with attempt:
                self._stream = await anyio.connect_tcp(self.host, self.port)
        self._reader = BufferedByteReceiveStream(self._stream)

    async def receive(self) -> Optional[BridgeMessage]:
        """Next message, or None once the server has closed the connection."""
        assert self._reader is not None
        try:
            line = await self._reader.receive_until(b"\n", MAX_LINE_BYTES)
        except (anyio.EndOfStream, anyio.IncompleteRead):
            return None
        return parse_message(line)

    async def send(self, topic: str, stamp: float, data: dict[str, Any]) -> None:
        assert self._stream is not None
        await self._stream.send(self._out.message(topic, stamp, data).to_line())

    async def send_raw(self, line: bytes) -> None:
        assert self._stream is not None
        await self._stream.send(line)

    async def aclose(self) -> None:
        if self._stream is not None:
            await self._stream.aclose()
            self._stream = None

    async def __aenter__(self) -> BridgeClient:
        await self.connect()
        return self

    async def __aexit__(self, *exc: Any) -> None:
        await self.aclose()


async def guidance_client(
    host: str,
    port: int,
    *,
    settings: Optional[Settings] = None,
    base_dir: Optional[Path] = None,
    ndt_map: Optional[NdtMap] = None,
) -> int:
    """
    External controller running the in-process autonomy chain on the bridged
    topics. Returns the number of commands sent.
    """
    async with BridgeClient(host, port) as client:
        hello = await client.receive()
        if hello is None or hello.topic != "hello":
            raise ProtocolError("Expected hello from the bridge server")
        if hello.data.get("version") != FORMAT_VERSION:
            raise ProtocolError(f"Unsupported bridge version {hello.data.get('version')!r}")
        spec = ScenarioSpec.model_validate(hello.data["scenario"])
        controller = make_ego_controller(prepare(spec, settings=settings, base_dir=base_dir, ndt_map=ndt_map))
        batch: dict[str, dict[str, Any]] = {}
        sent = 0
        while True:
            msg = await client.receive()
            if msg is None or msg.topic == "bye":
                break
            if msg.topic == "error":
                logger.warning("Bridge server error: %s", msg.data.get("reason"))
                continue
            batch[msg.topic] = msg.data
            if msg.topic != "traffic_rules":
                continue
            obs = decode_observation(batch)
            batch = {}
            await client.send("ctrl_cmd", obs.time, encode_command(obs.tick, controller.step(obs)))
            sent += 1
        logger.info("Guidance client done after %d commands", sent)
        return sent


def run_guidance_client(host: str, port: int, **kwargs: Any) -> int:
    return anyio.run(partial(guidance_client, host, port, **kwargs))
