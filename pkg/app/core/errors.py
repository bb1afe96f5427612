from __future__ import annotations

from typing import Iterable, Optional


class TestbedError(Exception):
    """Base class for every failure the testbed reports as a domain error."""

    __test__ = False


class OsmParseError(TestbedError):
    def __init__(self, message: str, *, line: Optional[int] = None) -> None:
        self.line = line
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"{message}{where}")


class DanglingReferenceError(TestbedError):
    def __init__(self, missing_ids: Iterable[int]) -> None:
        self.missing_ids = sorted(set(missing_ids))
        ids = ", ".join(str(i) for i in self.missing_ids)
        super().__init__(f"Way references unknown node ids: {ids}")


class ProjectionDomainError(TestbedError):
    pass


class EmptyNetworkError(TestbedError):
    pass


class EmptyMapError(TestbedError):
    pass


class NoOverlapError(TestbedError):
    """No scan point lands in a populated NDT cell; tracking is lost."""


class OffRouteError(TestbedError):
    def __init__(self, offset: float, limit: float) -> None:
        self.offset = offset
        self.limit = limit
        super().__init__(f"Ego is {offset:.2f} m from the route (limit {limit:.2f} m)")


class RouteTooShortError(TestbedError):
    pass


class IntegrityFault(TestbedError):
    def __init__(self, message: str, *, tick: int, field: str) -> None:
        self.tick = tick
        self.field = field
        super().__init__(f"Integrity fault at tick {tick} in {field}: {message}")


class ProtocolError(TestbedError):
    pass


class FormatError(TestbedError):
    pass
