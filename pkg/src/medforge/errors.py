"""Exception types shared across the toolkit.

Errors that carry structured context (line numbers, department names,
request digests) expose them as attributes so callers and the CLI can
report them without parsing messages.
"""

from __future__ import annotations


class ForgeError(Exception):
    """Base class for all toolkit errors."""


class RecordParseError(ForgeError):
    """A line in a record file failed to parse."""

    def __init__(self, path: str, line_no: int, reason: str):
        super().__init__(f"{path}:{line_no}: {reason}")
        self.path = path
        self.line_no = line_no
        self.reason = reason


class SampleValidationError(ForgeError):
    """A dialogue sample violates one or more datamodel invariants."""

    def __init__(self, sample_id: str, violations: list):
        detail = "; ".join(str(v) for v in violations)
        super().__init__(f"sample {sample_id!r}: {detail}")
        self.sample_id = sample_id
        self.violations = violations


class UnknownDepartmentError(ForgeError):
    """One or more department labels could not be resolved in the taxonomy."""

    def __init__(self, labels: list[str]):
        super().__init__(f"unknown department labels: {sorted(set(labels))}")
        self.labels = list(labels)


class StratumShortfallError(ForgeError):
    """A stratified draw asked for more items than a stratum holds."""

    def __init__(self, department: str, requested: int, available: int):
        super().__init__(
            f"stratum {department!r}: requested {requested}, available {available} "
            f"(deficit {requested - available})"
        )
        self.department = department
        self.requested = requested
        self.available = available
        self.deficit = requested - available


class DuplicateBackendError(ForgeError):
    """A backend id was registered twice."""


class ReplayMissError(ForgeError):
    """Strict replay found no cached response for a request digest."""

    def __init__(self, request_tag: str, digest: str):
        super().__init__(f"replay miss for request tagged {request_tag!r} (digest {digest})")
        self.request_tag = request_tag
        self.digest = digest


class TransportError(ForgeError):
    """An HTTP backend kept failing after exhausting its retries."""


class GenerationError(ForgeError):
    """A backend response failed its parse contract after the allowed retry.

    Carries the raw response and prompt digest so the failed item can be
    quarantined with full context.
    """

    def __init__(self, message: str, raw_response: str = "", prompt_hash: str = ""):
        super().__init__(message)
        self.raw_response = raw_response
        self.prompt_hash = prompt_hash


class StateMachineError(ForgeError):
    """An illegal curation state transition was attempted."""

    def __init__(self, item_id: str, current: str, attempted: str):
        super().__init__(
            f"item {item_id!r}: illegal transition {current} -> {attempted}"
        )
        self.item_id = item_id
        self.current = current
        self.attempted = attempted


class LeakError(ForgeError):
    """Ids crossed an isolation boundary (stage1/stage2, shots/benchmark)."""

    def __init__(self, context: str, ids: list[str]):
        shown = sorted(ids)[:10]
        super().__init__(f"{context}: {len(ids)} overlapping ids, e.g. {shown}")
        self.context = context
        self.ids = list(ids)


class ManifestMismatchError(ForgeError):
    """A component file's sample count does not match its manifest entry."""

    def __init__(self, component: str, expected: int, actual: int):
        super().__init__(
            f"component {component!r}: manifest says {expected}, file has {actual} "
            f"(delta {actual - expected})"
        )
        self.component = component
        self.expected = expected
        self.actual = actual
        self.delta = actual - expected


class StageError(ForgeError):
    """A pipeline stage aborted; carries partial-output locations for audit."""

    def __init__(self, stage: str, reason: str, partial_outputs: list[str] | None = None):
        super().__init__(f"stage {stage!r} failed: {reason}")
        self.stage = stage
        self.reason = reason
        self.partial_outputs = list(partial_outputs or [])
