"""Arm-level binomial network data: domain types, validation, file I/O.

The canonical interchange format is a flat CSV with header
``study,treatment,events,total`` and one row per trial arm.  A JSON mirror
carries explicit treatment labels:

    {"treatments": [...], "studies": [{"id": ..., "arms": [...]}]}

Treatment identifiers from either format are remapped to contiguous integer
indices 1..K.  If every token in a CSV parses as a positive integer, the
numeric order is taken as the intended ordering; otherwise first appearance
wins.  Treatment 1 is the global reference.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence


class DatasetError(ValueError):
    """Raised for malformed or inconsistent network data."""


class DisconnectedNetworkError(DatasetError):
    """Raised when the treatment comparison graph is not connected."""

    def __init__(self, components: list[set[int]], labels: Sequence[str] | None = None):
        self.components = components
        if labels:
            shown = [sorted(labels[t - 1] for t in comp) for comp in components]
        else:
            shown = [sorted(comp) for comp in components]
        super().__init__(f"comparison network is disconnected; components: {shown}")


@dataclass(frozen=True)
class Arm:
    """One trial arm: ``events`` out of ``total`` on ``treatment``."""

    treatment: int
    events: int
    total: int

    def __post_init__(self) -> None:
        if self.total < 1:
            raise DatasetError(f"arm total must be >= 1, got {self.total}")
        if not 0 <= self.events <= self.total:
            raise DatasetError(
                f"events must satisfy 0 <= events <= total, got {self.events}/{self.total}"
            )
        if self.treatment < 1:
            raise DatasetError(f"treatment index must be >= 1, got {self.treatment}")

    @property
    def proportion(self) -> float:
        return self.events / self.total


@dataclass(frozen=True)
class Study:
    """A single trial comparing two or more treatments.

    The study baseline is the lowest treatment index present; relative
    effects within the study are expressed against it.
    """

    id: str
    arms: tuple[Arm, ...]

    def __post_init__(self) -> None:
        if len(self.arms) < 1:
            raise DatasetError(f"study {self.id!r} has no arms")
        treatments = [a.treatment for a in self.arms]
        if len(set(treatments)) != len(treatments):
            raise DatasetError(f"study {self.id!r} has duplicate treatment arms")

    @property
    def baseline(self) -> int:
        return min(a.treatment for a in self.arms)

    @property
    def treatments(self) -> tuple[int, ...]:
        return tuple(a.treatment for a in self.arms)


@dataclass(frozen=True)
class ConnectivityResult:
    connected: bool
    components: tuple[frozenset[int], ...]


@dataclass(frozen=True)
class NetworkDataset:
    """A connected network of studies over treatments 1..K."""

    studies: tuple[Study, ...]
    num_treatments: int
    treatment_labels: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        for s in self.studies:
            for a in s.arms:
                if a.treatment > self.num_treatments:
                    raise DatasetError(
                        f"study {s.id!r} uses treatment {a.treatment} > K={self.num_treatments}"
                    )
        if self.treatment_labels is not None and len(self.treatment_labels) != self.num_treatments:
            raise DatasetError("treatment_labels length must equal num_treatments")
        ids = [s.id for s in self.studies]
        if len(set(ids)) != len(ids):
            raise DatasetError("duplicate study ids")

    @property
    def n_studies(self) -> int:
        return len(self.studies)

    @property
    def n_arms(self) -> int:
        return sum(len(s.arms) for s in self.studies)

    def study(self, study_id: str) -> Study:
        for s in self.studies:
            if s.id == str(study_id):
                return s
        raise KeyError(f"no study with id {study_id!r}")

    def study_index(self, study_id: str) -> int:
        for i, s in enumerate(self.studies):
            if s.id == str(study_id):
                return i
        raise KeyError(f"no study with id {study_id!r}")

    def label(self, treatment: int) -> str:
        if self.treatment_labels is not None:
            return self.treatment_labels[treatment - 1]
        return str(treatment)

    def iter_arms(self) -> Iterator[tuple[Study, Arm]]:
        for s in self.studies:
            for a in s.arms:
                yield s, a

    def validate(self) -> None:
        """Full NMA validity: >=1 study, two-arm minimum, connected network."""
        if not self.studies:
            raise DatasetError("dataset contains no studies")
        for s in self.studies:
            if len(s.arms) < 2:
                raise DatasetError(f"study {s.id!r} has fewer than two arms")
        res = connectivity_check(self)
        if not res.connected:
            raise DisconnectedNetworkError(
                [set(c) for c in res.components], self.treatment_labels
            )

    def without_studies(self, study_ids: set[str] | Sequence[str]) -> "NetworkDataset":
        drop = {str(x) for x in study_ids}
        unknown = drop - {s.id for s in self.studies}
        if unknown:
            raise KeyError(f"unknown study ids: {sorted(unknown)}")
        kept = tuple(s for s in self.studies if s.id not in drop)
        return NetworkDataset(kept, self.num_treatments, self.treatment_labels)


@dataclass(frozen=True)
class ObservedProportions:
    """Flat per-arm event proportions, in study order then arm order."""

    values: tuple[tuple[str, int, float], ...] = field(default_factory=tuple)

    def pool(self) -> list[float]:
        return [x for _, _, x in self.values]

    def for_study(self, study_id: str) -> list[float]:
        sid = str(study_id)
        return [x for s, _, x in self.values if s == sid]


def observed_proportions(ds: NetworkDataset) -> ObservedProportions:
    vals = tuple((s.id, a.treatment, a.events / a.total) for s, a in ds.iter_arms())
    return ObservedProportions(vals)


def connectivity_check(ds: NetworkDataset) -> ConnectivityResult:
    """BFS over the comparison graph; nodes are treatments observed in arms."""
    nodes: set[int] = set()
    adj: dict[int, set[int]] = {}
    for s in ds.studies:
        ts = s.treatments
        nodes.update(ts)
        for a in ts:
            adj.setdefault(a, set())
            for b in ts:
                if b != a:
                    adj[a].add(b)
    components: list[frozenset[int]] = []
    unseen = set(nodes)
    while unseen:
        root = min(unseen)
        comp = {root}
        frontier = [root]
        while frontier:
            nxt = frontier.pop()
            for nb in adj.get(nxt, ()):
                if nb not in comp:
                    comp.add(nb)
                    frontier.append(nb)
        components.append(frozenset(comp))
        unseen -= comp
    components.sort(key=min)
    return ConnectivityResult(connected=len(components) == 1, components=tuple(components))


def _remap_treatments(tokens: list[str]) -> dict[str, int]:
    """Token -> 1..K.  All-integer token sets sort numerically, else by
    first appearance."""
    seen: list[str] = []
    for t in tokens:
        if t not in seen:
            seen.append(t)
    try:
        ordered = sorted(seen, key=lambda t: int(t))
        if any(int(t) < 1 for t in ordered):
            raise ValueError
    except ValueError:
        ordered = seen
    return {t: i + 1 for i, t in enumerate(ordered)}


def _build(rows: list[tuple[str, str, int, int]], labels: Sequence[str] | None) -> NetworkDataset:
    if not rows:
        raise DatasetError("no arm rows found")
    if labels is not None:
        mapping = {str(lbl): i + 1 for i, lbl in enumerate(labels)}
        # allow 1-based positional references alongside label references
        for i in range(len(labels)):
            mapping.setdefault(str(i + 1), i + 1)
        label_tuple = tuple(str(x) for x in labels)
    else:
        mapping = _remap_treatments([t for _, t, _, _ in rows])
        inverse = {v: k for k, v in mapping.items()}
        label_tuple = tuple(inverse[i] for i in range(1, len(mapping) + 1))

    seen_pairs: set[tuple[str, str]] = set()
    by_study: dict[str, list[Arm]] = {}
    for sid, tok, events, total in rows:
        if (sid, tok) in seen_pairs:
            raise DatasetError(f"duplicate (study, treatment) row: ({sid!r}, {tok!r})")
        seen_pairs.add((sid, tok))
        if tok not in mapping:
            raise DatasetError(f"unknown treatment {tok!r} in study {sid!r}")
        by_study.setdefault(sid, []).append(Arm(mapping[tok], events, total))

    studies = tuple(Study(sid, tuple(arms)) for sid, arms in by_study.items())
    ds = NetworkDataset(studies, num_treatments=len(label_tuple), treatment_labels=label_tuple)
    ds.validate()
    return ds


def load_dataset(path: str | Path, format: str | None = None) -> NetworkDataset:
    """Load and validate a network dataset from CSV or JSON.

    Raises DatasetError on parse failures, count violations, duplicate arms
    and DisconnectedNetworkError (with the component partition) when the
    comparison graph is not connected.
    """
    path = Path(path)
    if format is None:
        format = "json" if path.suffix.lower() == ".json" else "csv"
    if format not in ("csv", "json"):
        raise ValueError(f"format must be 'csv' or 'json', got {format!r}")

    if format == "csv":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            required = {"study", "treatment", "events", "total"}
            if reader.fieldnames is None or not required.issubset(reader.fieldnames):
                raise DatasetError(
                    f"CSV must have header study,treatment,events,total; got {reader.fieldnames}"
                )
            rows = []
            for lineno, rec in enumerate(reader, start=2):
                try:
                    rows.append(
                        (
                            rec["study"].strip(),
                            rec["treatment"].strip(),
                            int(rec["events"]),
                            int(rec["total"]),
                        )
                    )
                except (TypeError, ValueError, AttributeError) as exc:
                    raise DatasetError(f"{path}:{lineno}: malformed row: {exc}") from exc
        return _build(rows, labels=None)

    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{path}: invalid JSON: {exc}") from exc
    try:
        labels = [str(x) for x in doc["treatments"]]
        rows = []
        for st in doc["studies"]:
            sid = str(st["id"])
            for arm in st["arms"]:
                rows.append((sid, str(arm["treatment"]), int(arm["events"]), int(arm["total"])))
    except (KeyError, TypeError) as exc:
        raise DatasetError(f"{path}: malformed JSON document: {exc}") from exc
    return _build(rows, labels=labels)


def write_dataset(ds: NetworkDataset, path: str | Path, format: str | None = None) -> None:
    """Write in the canonical row order (round-trips through load_dataset)."""
    path = Path(path)
    if format is None:
        format = "json" if path.suffix.lower() == ".json" else "csv"
    if format == "csv":
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["study", "treatment", "events", "total"])
            for s, a in ds.iter_arms():
                writer.writerow([s.id, ds.label(a.treatment), a.events, a.total])
    elif format == "json":
        doc = {
            "treatments": list(
                ds.treatment_labels or [str(i) for i in range(1, ds.num_treatments + 1)]
            ),
            "studies": [
                {
                    "id": s.id,
                    "arms": [
                        {"treatment": ds.label(a.treatment), "events": a.events, "total": a.total}
                        for a in s.arms
                    ],
                }
                for s in ds.studies
            ],
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2)
            fh.write("\n")
    else:
        raise ValueError(f"format must be 'csv' or 'json', got {format!r}")
