"""Human-guided curation of the behavioral-preference training set.

Candidates are drawn from source pools never used for stage-1 training
(enforced, not assumed), reviewed through a small state machine, and the
best items become few-shot exemplars for generating the final preference
samples. Generated samples re-enter the queue as pending: nothing reaches
the exported stage-2 set without an accept decision.

The store is an append-only audit log plus a snapshot; replaying the log
reproduces the state exactly, which doubles as the concurrency oracle.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

from .datamodel import (
    DialogueSample,
    PipelineStep,
    ProvenanceRecord,
    QuarantineEntry,
    Role,
    Source,
    StageTag,
    Turn,
    validate_sample,
)
from .errors import GenerationError, LeakError, StateMachineError
from .gateway import (
    ChatRequest,
    Gateway,
    Message,
    MsgRole,
    TAG_PREFERENCE,
    format_block,
    text_digest,
)
from .reconstruct import chat_with_retry, dialogue_block, parse_turn_lines
from .sampling import SeededRng, apportion_capped


class CurationState(str, Enum):
    PENDING = "pending"
    ACCEPTED = "accepted"
    EDITED = "edited"
    REJECTED = "rejected"
    PROMOTED_EXEMPLAR = "promoted_exemplar"


TRANSITIONS: dict[CurationState, set[CurationState]] = {
    CurationState.PENDING: {CurationState.ACCEPTED, CurationState.EDITED, CurationState.REJECTED},
    CurationState.ACCEPTED: {CurationState.PROMOTED_EXEMPLAR},
    CurationState.EDITED: {CurationState.PROMOTED_EXEMPLAR},
    CurationState.REJECTED: set(),
    CurationState.PROMOTED_EXEMPLAR: set(),
}

ACTION_TO_STATE = {
    "accept": CurationState.ACCEPTED,
    "edit": CurationState.EDITED,
    "reject": CurationState.REJECTED,
    "promote": CurationState.PROMOTED_EXEMPLAR,
}


@dataclass(frozen=True)
class CurationItem:
    id: str
    candidate: DialogueSample
    state: CurationState = CurationState.PENDING
    original: DialogueSample | None = None
    edited_version: DialogueSample | None = None
    reviewer: str = ""
    decided_at: float | None = None
    notes: str = ""

    def effective_sample(self) -> DialogueSample:
        return self.edited_version if self.edited_version is not None else self.candidate

    def to_record(self) -> dict:
        rec: dict = {
            "id": self.id,
            "state": self.state.value,
            "candidate": self.candidate.to_record(),
        }
        if self.original is not None:
            rec["original"] = self.original.to_record()
        if self.edited_version is not None:
            rec["edited_version"] = self.edited_version.to_record()
        rec["reviewer"] = self.reviewer
        if self.decided_at is not None:
            rec["decided_at"] = self.decided_at
        rec["notes"] = self.notes
        return rec

    @classmethod
    def from_record(cls, rec: Mapping) -> "CurationItem":
        return cls(
            id=rec["id"],
            candidate=DialogueSample.from_record(rec["candidate"]),
            state=CurationState(rec["state"]),
            original=DialogueSample.from_record(rec["original"]) if "original" in rec else None,
            edited_version=DialogueSample.from_record(rec["edited_version"]) if "edited_version" in rec else None,
            reviewer=rec.get("reviewer", ""),
            decided_at=rec.get("decided_at"),
            notes=rec.get("notes", ""),
        )


def _turn_bucket(sample: DialogueSample) -> str:
    rounds = sample.rounds()
    if rounds <= 1:
        return "1"
    if rounds <= 3:
        return "2-3"
    return ">=4"


def select_candidates(
    pools: Sequence[DialogueSample],
    exclusion_ids: set[str],
    target: int,
    seed: int,
) -> list[CurationItem]:
    """Pick diverse pending candidates, hard-rejecting any overlap with
    data already used for stage-1 training.

    Diversity is a seeded stratification over (department, round-count
    bucket); strata quotas follow pool frequencies with largest-remainder
    apportionment.
    """
    leaked = [
        s.id for s in pools
        if s.id in exclusion_ids or (s.provenance.origin_record_id or "") in exclusion_ids
    ]
    if leaked:
        raise LeakError("candidate pool overlaps stage-1 exclusions", leaked)
    if target > len(pools):
        raise ValueError(f"target {target} exceeds pool size {len(pools)}")

    strata: dict[str, list[int]] = {}
    for idx, sample in enumerate(pools):
        key = f"{sample.department or 'unknown'}|{_turn_bucket(sample)}"
        strata.setdefault(key, []).append(idx)

    weights = {key: len(idxs) / len(pools) for key, idxs in strata.items()}
    caps = {key: len(idxs) for key, idxs in strata.items()}
    counts, _ = apportion_capped(weights, target, caps, seed)

    rng = SeededRng(seed).derive("select_candidates")
    chosen: list[int] = []
    for key in sorted(counts):
        quota = counts[key]
        if quota == 0:
            continue
        stratum = strata[key]
        sub = rng.derive(key)
        chosen.extend(stratum[i] for i in sub.sample_indices(len(stratum), quota))
    chosen.sort()
    return [
        CurationItem(id=f"cur:{pools[i].id}", candidate=pools[i], original=pools[i])
        for i in chosen
    ]


class CurationStore:
    """Single-writer curation state backed by an append-only audit log.

    Every mutation appends one event before updating memory; ``snapshot``
    persists the materialized state for fast reopening. Reads are
    lock-free copies.
    """

    AUDIT_FILE = "audit.jsonl"
    SNAPSHOT_FILE = "snapshot.json"

    def __init__(self, directory: str | Path, target: int = 2000):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.target = target
        self._items: dict[str, CurationItem] = {}
        self._order: list[str] = []
        self._lock = threading.Lock()
        self._audit_path = self.directory / self.AUDIT_FILE
        self._replay_existing()

    # -- persistence -------------------------------------------------------

    def _replay_existing(self) -> None:
        snapshot_path = self.directory / self.SNAPSHOT_FILE
        replayed_events = 0
        if snapshot_path.exists():
            with snapshot_path.open("r", encoding="utf-8") as fh:
                snap = json.load(fh)
            for rec in snap["items"]:
                item = CurationItem.from_record(rec)
                self._items[item.id] = item
                self._order.append(item.id)
            replayed_events = snap["audit_offset"]
        if self._audit_path.exists():
            with self._audit_path.open("r", encoding="utf-8") as fh:
                for i, line in enumerate(fh):
                    if i < replayed_events or not line.strip():
                        continue
                    self._apply_event(json.loads(line))
                    replayed_events += 1
        self._event_count = replayed_events

    def _append_event(self, event: dict) -> None:
        with self._audit_path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(event, ensure_ascii=False) + "\n")
        self._event_count += 1

    def snapshot(self) -> None:
        with self._lock:
            snap = {
                "audit_offset": self._event_count,
                "items": [self._items[item_id].to_record() for item_id in self._order],
            }
            tmp = (self.directory / self.SNAPSHOT_FILE).with_suffix(".tmp")
            with tmp.open("w", encoding="utf-8") as fh:
                json.dump(snap, fh, ensure_ascii=False)
            tmp.replace(self.directory / self.SNAPSHOT_FILE)

    def _apply_event(self, event: dict) -> None:
        kind = event["event"]
        if kind == "add":
            item = CurationItem.from_record(event["item"])
            self._items[item.id] = item
            self._order.append(item.id)
        elif kind == "decision":
            item = self._items[event["item_id"]]
            self._items[event["item_id"]] = self._decided(
                item,
                action=event["action"],
                reviewer=event["reviewer"],
                edited=DialogueSample.from_record(event["edited"]) if event.get("edited") else None,
                notes=event.get("notes", ""),
                decided_at=event["at"],
            )
        else:
            raise ValueError(f"unknown audit event {kind!r}")

    @staticmethod
    def _decided(item, action, reviewer, edited, notes, decided_at) -> CurationItem:
        new_state = ACTION_TO_STATE[action]
        return replace(
            item,
            state=new_state,
            edited_version=edited if action == "edit" else item.edited_version,
            reviewer=reviewer,
            decided_at=decided_at,
            notes=notes or item.notes,
        )

    # -- mutations -----------------------------------------------------------

    def add_pending(self, items: Sequence[CurationItem]) -> None:
        with self._lock:
            for item in items:
                if item.id in self._items:
                    raise ValueError(f"curation item {item.id!r} already in store")
                if item.state is not CurationState.PENDING:
                    raise ValueError(f"new item {item.id!r} must be pending")
                self._append_event({"event": "add", "at": time.time(), "item": item.to_record()})
                self._items[item.id] = item
                self._order.append(item.id)

    def submit_decision(
        self,
        item_id: str,
        action: str,
        reviewer: str,
        edited: DialogueSample | None = None,
        notes: str = "",
    ) -> CurationItem:
        """Apply one reviewer decision atomically; illegal transitions and
        invalid edits leave the store unchanged."""
        if action not in ACTION_TO_STATE:
            raise ValueError(f"unknown action {action!r}")
        with self._lock:
            item = self._items.get(item_id)
            if item is None:
                raise KeyError(f"no curation item {item_id!r}")
            new_state = ACTION_TO_STATE[action]
            if new_state not in TRANSITIONS[item.state]:
                raise StateMachineError(item_id, item.state.value, new_state.value)
            if action == "edit":
                if edited is None:
                    raise ValueError("edit decision requires the edited sample")
                violations = validate_sample(edited)
                if violations:
                    raise ValueError(f"edited sample invalid: {violations[0]}")
            decided_at = time.time()
            self._append_event(
                {
                    "event": "decision",
                    "at": decided_at,
                    "item_id": item_id,
                    "action": action,
                    "reviewer": reviewer,
                    "notes": notes,
                    "edited": edited.to_record() if edited is not None else None,
                }
            )
            updated = self._decided(item, action, reviewer, edited, notes, decided_at)
            self._items[item_id] = updated
            return updated

    # -- queries -------------------------------------------------------------

    def get(self, item_id: str) -> CurationItem:
        with self._lock:
            return self._items[item_id]

    def items(self, state: CurationState | None = None, department: str | None = None) -> list[CurationItem]:
        with self._lock:
            out = [self._items[i] for i in self._order]
        if state is not None:
            out = [i for i in out if i.state is state]
        if department is not None:
            out = [i for i in out if i.candidate.department == department]
        return out

    def exemplars(self) -> list[CurationItem]:
        return self.items(state=CurationState.PROMOTED_EXEMPLAR)

    def stats(self) -> dict:
        with self._lock:
            items = [self._items[i] for i in self._order]
        counts = {state.value: 0 for state in CurationState}
        for item in items:
            counts[item.state.value] += 1
        decided = [i.decided_at for i in items if i.decided_at is not None]
        now = time.time()
        accepted_like = counts["accepted"] + counts["edited"] + counts["promoted_exemplar"]
        return {
            "counts": counts,
            "total": len(items),
            "decided": len(decided),
            "decisions_last_hour": sum(1 for t in decided if now - t < 3600),
            "target": self.target,
            "remaining_to_target": max(self.target - accepted_like, 0),
        }

    def export_stage2(self, stage1_ids: set[str]) -> list[DialogueSample]:
        """All accepted/edited items, edited version substituted; refuses
        to export anything whose id or origin appears in stage-1 data."""
        exported: list[DialogueSample] = []
        for item in self.items():
            if item.state in (CurationState.ACCEPTED, CurationState.EDITED):
                exported.append(item.effective_sample())
        leaked = [
            s.id for s in exported
            if s.id in stage1_ids or (s.provenance.origin_record_id or "") in stage1_ids
        ]
        if leaked:
            raise LeakError("stage-2 export overlaps stage-1 ids", leaked)
        return exported

    @classmethod
    def replay_log(cls, directory: str | Path) -> dict[str, CurationItem]:
        """Rebuild state purely from the audit log (the testing oracle)."""
        store = object.__new__(cls)
        store._items = {}
        store._order = []
        audit = Path(directory) / cls.AUDIT_FILE
        if audit.exists():
            with audit.open("r", encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        store._apply_event(json.loads(line))
        return dict(store._items)


def generate_preference_set(
    store: CurationStore,
    seeds: Sequence[CurationItem],
    gateway: Gateway,
    backend_id: str,
    target: int,
    fewshot_k: int = 3,
    seed: int = 0,
    temperature: float = 0.8,
) -> tuple[list[CurationItem], list[QuarantineEntry]]:
    """Few-shot generation of preference samples under human supervision.

    Every prompt pairs ``fewshot_k`` seeded-chosen exemplars with one seed
    candidate plus a variation nonce (so prompts stay cache-distinct).
    Outputs are validated and enter the store as pending for review.
    """
    exemplars = store.exemplars()
    if not exemplars:
        raise ValueError("no promoted exemplars: promote at least one item first")
    if target == 0:
        return [], []
    if not seeds:
        raise ValueError("no seed candidates given")

    rng = SeededRng(seed).derive("preference_generation")
    created: list[CurationItem] = []
    quarantined: list[QuarantineEntry] = []
    for i in range(target):
        sub = rng.derive(str(i))
        k = min(fewshot_k, len(exemplars))
        picked = [exemplars[j] for j in sub.sample_indices(len(exemplars), k)]
        seed_item = seeds[i % len(seeds)]
        sample_id = f"pref:{seed}:{i:06d}"
        try:
            sample = _generate_one(picked, seed_item, gateway, backend_id, sample_id, i, temperature)
            created.append(
                CurationItem(id=f"cur:{sample.id}", candidate=sample, original=seed_item.candidate)
            )
        except GenerationError as exc:
            quarantined.append(
                QuarantineEntry(
                    item_id=sample_id,
                    step_name=TAG_PREFERENCE,
                    reason=str(exc),
                    raw_response=exc.raw_response,
                    prompt_hash=exc.prompt_hash,
                )
            )
    store.add_pending(created)
    return created, quarantined


def _generate_one(
    exemplars: Sequence[CurationItem],
    seed_item: CurationItem,
    gateway: Gateway,
    backend_id: str,
    sample_id: str,
    nonce: int,
    temperature: float,
) -> DialogueSample:
    exemplar_blocks = "\n\n".join(
        format_block(f"EXEMPLAR_{i + 1}", _sample_block(e.effective_sample()))
        for i, e in enumerate(exemplars)
    )
    seed_sample = seed_item.effective_sample()
    user = (
        "The exemplars below show the tone and behavior we want from an AI doctor: "
        "thorough, empathetic, and structured. Rewrite the seed conversation in that "
        "style (variation {nonce}). Keep the patient turns unchanged.\n"
        "Answer with one line per turn starting with \"PATIENT: \" or \"DOCTOR: \", "
        "then a line containing only END.\n\n"
        "{exemplars}\n\n{seed}"
    ).format(
        nonce=nonce,
        exemplars=exemplar_blocks,
        seed=format_block("SEED", _sample_block(seed_sample)),
    )
    request = ChatRequest(
        backend_id=backend_id,
        messages=(Message(MsgRole.USER, user),),
        temperature=temperature,
        max_tokens=2048,
        request_tag=TAG_PREFERENCE,
    )

    def parse(content: str) -> tuple[tuple[Role, str], ...]:
        return tuple(parse_turn_lines(content))

    turns, response, prompt_hash = chat_with_retry(gateway, request, parse)
    sample = DialogueSample(
        id=sample_id,
        source=Source.PREFERENCE,
        department=seed_sample.department,
        stage_tag=StageTag.STAGE2,
        turns=tuple(Turn(role, text) for role, text in turns),
        provenance=ProvenanceRecord(
            origin_record_id=seed_sample.provenance.origin_record_id or seed_sample.id,
            pipeline_steps=(
                PipelineStep(
                    step_name=TAG_PREFERENCE,
                    backend_id=backend_id,
                    prompt_hash=prompt_hash,
                    response_hash=text_digest(response.content),
                    timestamp=response.timestamp,
                ),
            ),
        ),
    )
    violations = validate_sample(sample)
    if violations:
        raise GenerationError(
            f"generated preference sample invalid: {violations[0]}",
            raw_response=response.content,
            prompt_hash=prompt_hash,
        )
    return sample


def _sample_block(sample: DialogueSample) -> str:
    return dialogue_block([(t.role, t.content) for t in sample.turns if t.role is not Role.SYSTEM])
