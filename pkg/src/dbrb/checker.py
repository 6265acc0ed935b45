"""Mechanical trace checker for the broadcast and reconfiguration guarantees.

Pure over a finished trace: the same trace and scenario always yield the
same verdicts.  Eventual properties are judged at quiescence and come
back Inconclusive when the run was truncated; safety properties are
judged unconditionally.  Byzantine processes carry no obligations and
their callbacks are ignored.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Optional

from .simnet import Scenario, Trace
from .views import View, comparable, seq_key, view_from_canon_str

PROPERTIES = (
    "Validity",
    "Totality",
    "NoDuplication",
    "Integrity",
    "Consistency",
    "Liveness",
    "NonTriviality",
    "InstalledViewsChain",
    "ValidViewsComparable",
    "ConvergedTotalOrder",
)

PASS = "Pass"
FAIL = "Fail"
INCONCLUSIVE = "Inconclusive"


@dataclass
class Verdict:
    prop: str
    status: str
    evidence: list[int] = field(default_factory=list)
    detail: str = ""

    def __str__(self) -> str:
        extra = f" [{self.detail}]" if self.detail else ""
        ev = f" evidence steps {self.evidence}" if self.evidence else ""
        return f"{self.prop}: {self.status}{extra}{ev}"


class MalformedTrace(ValueError):
    pass


_INSTALL_ACCEPT = re.compile(
    r"install-accepted omega=(?P<omega>[^ ]*) v=(?P<v>[^ ]*) seq=(?P<seq>.*)$")
_CONVERGED_ON = re.compile(r"converged-on v=(?P<v>[^ ]*) seq=(?P<seq>.*)$")
_COMMIT_ACCEPT = re.compile(r"commit-accepted v_cer=(?P<vcer>[^ ]*)")


def _parse_seq(text: str) -> list[View]:
    if not text:
        return []
    return [view_from_canon_str(part) for part in text.split("|")]


@dataclass
class _NodeTimeline:
    joined_at: Optional[int] = None
    join_invoked_at: Optional[int] = None
    leave_invoked_at: Optional[int] = None
    leave_done_at: Optional[int] = None
    broadcasts: list[tuple[int, str]] = field(default_factory=list)
    deliveries: list[tuple[int, str]] = field(default_factory=list)
    sends: list[int] = field(default_factory=list)


def check(trace: Trace, scenario: Scenario) -> list[Verdict]:
    events = trace.events
    for i, e in enumerate(events):
        if e.get("step") != i or "kind" not in e or "actor" not in e:
            raise MalformedTrace(f"bad event at line {i}")

    byzantine = scenario.byzantine()
    correct = [p for p in scenario.universe if p not in byzantine]
    timelines = {p: _NodeTimeline() for p in scenario.universe}
    for p in scenario.initial_members:
        timelines[p].joined_at = 0

    installs: list[tuple[int, str, View]] = []
    valid_views: list[tuple[int, View]] = []
    converged: dict[bytes, list[tuple[int, frozenset[View]]]] = {}

    for e in events:
        actor = e["actor"]
        tl = timelines.get(actor)
        if tl is None:
            raise MalformedTrace(f"unknown actor {actor} at step {e['step']}")
        kind = e["kind"]
        detail = e.get("detail") or ""
        if kind == "Invoke":
            if detail == "join":
                tl.join_invoked_at = e["step"]
            elif detail == "leave":
                tl.leave_invoked_at = e["step"]
            elif detail == "broadcast":
                tl.broadcasts.append((e["step"], e.get("payload_digest")))
        elif kind == "Callback":
            if detail == "Delivered":
                tl.deliveries.append((e["step"], e.get("payload_digest")))
            elif detail == "JoinComplete":
                tl.joined_at = e["step"]
            elif detail == "LeaveComplete":
                tl.leave_done_at = e["step"]
        elif kind == "Send":
            tl.sends.append(e["step"])
        elif actor in byzantine:
            continue
        elif kind == "Install":
            installs.append((e["step"], actor, view_from_canon_str(detail)))
        elif kind == "StateNote":
            m = _INSTALL_ACCEPT.search(detail)
            if m:
                omega = view_from_canon_str(m.group("omega"))
                v = view_from_canon_str(m.group("v"))
                seq = frozenset(_parse_seq(m.group("seq")))
                valid_views.append((e["step"], omega))
                valid_views.append((e["step"], v))
                for w in seq:
                    valid_views.append((e["step"], w))
                converged.setdefault(v.digest, []).append((e["step"], seq))
                continue
            m = _CONVERGED_ON.search(detail)
            if m:
                v = view_from_canon_str(m.group("v"))
                seq = frozenset(_parse_seq(m.group("seq")))
                converged.setdefault(v.digest, []).append((e["step"], seq))
                continue
            m = _COMMIT_ACCEPT.search(detail)
            if m:
                valid_views.append((e["step"], view_from_canon_str(m.group("vcer"))))

    verdicts = [
        _check_validity(trace, correct, timelines, scenario),
        _check_totality(trace, correct, timelines),
        _check_no_duplication(correct, timelines),
        _check_integrity(correct, timelines, scenario, byzantine),
        _check_consistency(correct, timelines),
        _check_liveness(trace, correct, timelines, scenario),
        _check_non_triviality(correct, timelines, scenario),
        _check_installed_chain(installs),
        _check_valid_comparable(valid_views),
        _check_converged_order(converged),
    ]
    return verdicts


def _eventual(trace: Trace, prop: str) -> Optional[Verdict]:
    if trace.truncated:
        return Verdict(prop, INCONCLUSIVE, detail="trace truncated")
    return None


def _participant_at_or_after(tl: _NodeTimeline, t: int) -> bool:
    """Was this process a participant at some time >= t?"""
    if tl.joined_at is None:
        return False
    left = tl.leave_invoked_at
    if left is None:
        return True
    return left > t  # participant throughout [joined_at, leave) intersecting [t, inf)


def _check_validity(trace, correct, timelines, scenario) -> Verdict:
    early = _eventual(trace, "Validity")
    if early:
        return early
    if scenario.sender not in correct:
        return Verdict("Validity", PASS, detail="sender byzantine; vacuous")
    s = timelines[scenario.sender]
    if not s.broadcasts:
        return Verdict("Validity", PASS, detail="no broadcast; vacuous")
    t, digest = s.broadcasts[0]
    for p in correct:
        tl = timelines[p]
        if tl.leave_invoked_at is not None:
            continue  # leavers are exempt here; totality handles them
        if not _participant_at_or_after(tl, t):
            continue
        if not any(d == digest for _, d in tl.deliveries):
            return Verdict("Validity", FAIL, evidence=[t],
                           detail=f"{p} is a never-leaving participant without delivery")
    return Verdict("Validity", PASS)


def _check_totality(trace, correct, timelines) -> Verdict:
    early = _eventual(trace, "Totality")
    if early:
        return early
    for p in correct:
        for t, digest in timelines[p].deliveries:
            for q in correct:
                tq = timelines[q]
                if not _participant_at_or_after(tq, t):
                    continue
                if not any(d == digest for _, d in tq.deliveries):
                    return Verdict("Totality", FAIL, evidence=[t],
                                   detail=f"{q} was a participant after {p}'s delivery "
                                          f"but never delivered")
    return Verdict("Totality", PASS)


def _check_no_duplication(correct, timelines) -> Verdict:
    for p in correct:
        if len(timelines[p].deliveries) > 1:
            steps = [s for s, _ in timelines[p].deliveries]
            return Verdict("NoDuplication", FAIL, evidence=steps[:2],
                           detail=f"{p} delivered more than once")
    return Verdict("NoDuplication", PASS)


def _check_integrity(correct, timelines, scenario, byzantine) -> Verdict:
    if scenario.sender in byzantine:
        return Verdict("Integrity", PASS, detail="sender byzantine; vacuous")
    sent = {d for _, d in timelines[scenario.sender].broadcasts}
    for p in correct:
        for step, digest in timelines[p].deliveries:
            if digest not in sent:
                return Verdict("Integrity", FAIL, evidence=[step],
                               detail=f"{p} delivered a payload the sender never broadcast")
    return Verdict("Integrity", PASS)


def _check_consistency(correct, timelines) -> Verdict:
    seen: dict[str, tuple[str, int]] = {}
    for p in correct:
        for step, digest in timelines[p].deliveries:
            for other_digest, (q, other_step) in seen.items():
                if other_digest != digest:
                    return Verdict("Consistency", FAIL, evidence=[other_step, step],
                                   detail=f"{q} delivered {other_digest}, {p} delivered {digest}")
            seen.setdefault(digest, (p, step))
    return Verdict("Consistency", PASS)


def _check_liveness(trace, correct, timelines, scenario) -> Verdict:
    early = _eventual(trace, "Liveness")
    if early:
        return early
    for p in correct:
        tl = timelines[p]
        if tl.join_invoked_at is not None and tl.joined_at is None:
            return Verdict("Liveness", FAIL, evidence=[tl.join_invoked_at],
                           detail=f"{p} invoked join but never completed")
        if tl.leave_invoked_at is not None and tl.leave_done_at is None:
            return Verdict("Liveness", FAIL, evidence=[tl.leave_invoked_at],
                           detail=f"{p} invoked leave but never completed")
        for step, digest in tl.broadcasts:
            if not any(d == digest for _, d in tl.deliveries):
                return Verdict("Liveness", FAIL, evidence=[step],
                               detail=f"{p} broadcast but never delivered its own message")
    return Verdict("Liveness", PASS)


def _check_non_triviality(correct, timelines, scenario) -> Verdict:
    for p in correct:
        tl = timelines[p]
        window_start = 0 if p in scenario.initial_members else tl.join_invoked_at
        for step in tl.sends:
            if window_start is None or step < window_start:
                return Verdict("NonTriviality", FAIL, evidence=[step],
                               detail=f"{p} sent before joining")
            if tl.leave_done_at is not None and step > tl.leave_done_at:
                return Verdict("NonTriviality", FAIL, evidence=[step],
                               detail=f"{p} sent after leaving")
    return Verdict("NonTriviality", PASS)


def _check_installed_chain(installs) -> Verdict:
    for i, (step_a, pa, va) in enumerate(installs):
        for step_b, pb, vb in installs[i + 1:]:
            if not comparable(va, vb):
                return Verdict("InstalledViewsChain", FAIL, evidence=[step_a, step_b],
                               detail=f"incomparable installed views at {pa} and {pb}")
    return Verdict("InstalledViewsChain", PASS)


def _check_valid_comparable(valid_views) -> Verdict:
    uniq: dict[bytes, tuple[int, View]] = {}
    for step, v in valid_views:
        uniq.setdefault(v.digest, (step, v))
    items = list(uniq.values())
    for i, (step_a, va) in enumerate(items):
        for step_b, vb in items[i + 1:]:
            if not comparable(va, vb):
                return Verdict("ValidViewsComparable", FAIL, evidence=[step_a, step_b],
                               detail="incomparable views in accepted installs/commits")
    return Verdict("ValidViewsComparable", PASS)


def _check_converged_order(converged) -> Verdict:
    for digest, entries in converged.items():
        uniq: dict[bytes, tuple[int, frozenset[View]]] = {}
        for step, seq in entries:
            uniq.setdefault(seq_key(seq), (step, seq))
        items = list(uniq.values())
        for i, (step_a, sa) in enumerate(items):
            for step_b, sb in items[i + 1:]:
                if not (sa <= sb or sb <= sa):
                    return Verdict("ConvergedTotalOrder", FAIL, evidence=[step_a, step_b],
                                   detail="converged sequences not inclusion-ordered")
    return Verdict("ConvergedTotalOrder", PASS)


def summarize(verdicts: list[Verdict]) -> tuple[int, int, int]:
    """Counts of (pass, fail, inconclusive)."""
    p = sum(1 for v in verdicts if v.status == PASS)
    f = sum(1 for v in verdicts if v.status == FAIL)
    i = sum(1 for v in verdicts if v.status == INCONCLUSIVE)
    return p, f, i


def exit_code(verdicts: list[Verdict]) -> int:
    _, fails, inconclusive = summarize(verdicts)
    if fails:
        return 1
    if inconclusive:
        return 3
    return 0
