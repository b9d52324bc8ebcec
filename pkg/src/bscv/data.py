"""Longitudinal dose/observation datasets with per-subject covariates.

The on-disk format is a plain CSV with columns ID, TIME, AMT, DV, DVID,
WT, AGE, SEX (headers case-insensitive, "." marks a missing value).
Rows carrying an AMT become dosing events, rows carrying a DV become
observations on channel DVID (1 = concentration, 2 = response).
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Mapping, Optional, Sequence


class DatasetError(ValueError):
    pass


class MissingColumn(DatasetError):
    pass


class NonNumericField(DatasetError):
    def __init__(self, row: int, col: str, raw: str):
        super().__init__(f"row {row}: column {col!r} has non-numeric value {raw!r}")
        self.row = row
        self.col = col


class UnknownChannel(DatasetError):
    pass


class EmptyDataset(DatasetError):
    pass


class NonPositiveInput(ValueError):
    pass


class Channel(Enum):
    """Observation channel: 1 = concentration (PK), 2 = response (PD)."""

    Y1_PK = 1
    Y2_PD = 2


MISSING = "."

#: logical field -> default CSV header
DEFAULT_SCHEMA: Mapping[str, str] = {
    "id": "ID",
    "time": "TIME",
    "amt": "AMT",
    "dv": "DV",
    "dvid": "DVID",
    "wt": "WT",
    "age": "AGE",
    "sex": "SEX",
}

_REQUIRED_FIELDS = ("id", "time", "amt", "dv", "dvid")


def _check_finite(name: str, value: float) -> None:
    if not math.isfinite(value):
        raise DatasetError(f"{name} must be finite, got {value!r}")


@dataclass(frozen=True)
class DoseEvent:
    time: float
    amount: float

    def __post_init__(self):
        _check_finite("dose time", self.time)
        _check_finite("dose amount", self.amount)
        if self.time < 0:
            raise DatasetError(f"dose time must be >= 0, got {self.time}")
        if self.amount <= 0:
            raise DatasetError(f"dose amount must be > 0, got {self.amount}")


@dataclass(frozen=True)
class Observation:
    time: float
    value: float
    channel: Channel

    def __post_init__(self):
        _check_finite("observation time", self.time)
        _check_finite("observation value", self.value)
        if self.time < 0:
            raise DatasetError(f"observation time must be >= 0, got {self.time}")


@dataclass(frozen=True)
class Covariates:
    weight: Optional[float] = None
    age: Optional[float] = None
    sex: str = "unknown"

    def __post_init__(self):
        for name, value in (("weight", self.weight), ("age", self.age)):
            if value is not None:
                _check_finite(name, value)
                if value <= 0:
                    raise DatasetError(f"{name} must be > 0 when present, got {value}")
        if self.sex not in ("M", "F", "unknown"):
            raise DatasetError(f"sex must be M, F or unknown, got {self.sex!r}")


@dataclass(frozen=True)
class Subject:
    """One individual: dosing history, observations and covariates.

    ``origin`` is set on bootstrap copies and points back at the source
    subject id; it is None for subjects parsed from data.
    """

    id: str
    doses: tuple[DoseEvent, ...]
    observations: tuple[Observation, ...]
    covariates: Covariates = field(default_factory=Covariates)
    origin: Optional[str] = None

    def __post_init__(self):
        # canonical order: by channel, then time (stable for replicates)
        obs = tuple(
            sorted(self.observations, key=lambda o: (o.channel.value, o.time))
        )
        object.__setattr__(self, "doses", tuple(self.doses))
        object.__setattr__(self, "observations", obs)

    def observations_for(self, channel: Channel) -> tuple[Observation, ...]:
        return tuple(o for o in self.observations if o.channel is channel)

    @property
    def origin_id(self) -> str:
        return self.origin if self.origin is not None else self.id


@dataclass(frozen=True)
class Dataset:
    subjects: tuple[Subject, ...]
    provenance: str = ""

    def __post_init__(self):
        object.__setattr__(self, "subjects", tuple(self.subjects))
        if not self.subjects:
            raise EmptyDataset("a dataset needs at least one subject")
        ids = [s.id for s in self.subjects]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise DatasetError(f"duplicate subject ids: {dupes}")

    @property
    def subject_ids(self) -> tuple[str, ...]:
        return tuple(s.id for s in self.subjects)

    def subject(self, subject_id: str) -> Subject:
        for s in self.subjects:
            if s.id == subject_id:
                return s
        raise KeyError(subject_id)

    def n_observations(self, channel: Optional[Channel] = None) -> int:
        if channel is None:
            return sum(len(s.observations) for s in self.subjects)
        return sum(len(s.observations_for(channel)) for s in self.subjects)


def transform_covariate(value: float, reference: float) -> float:
    """Centered-log transform log(value/reference), e.g. log(weight/70)."""
    if value <= 0 or reference <= 0:
        raise NonPositiveInput(
            f"covariate transform needs positive inputs, got ({value}, {reference})"
        )
    return math.log(value / reference)


def _parse_float(raw: str, row: int, col: str) -> Optional[float]:
    raw = raw.strip()
    if raw == "" or raw == MISSING:
        return None
    try:
        return float(raw)
    except ValueError:
        raise NonNumericField(row, col, raw) from None


def _parse_sex(raw: str) -> str:
    raw = raw.strip()
    if raw.upper() in ("M", "F"):
        return raw.upper()
    return "unknown"


def parse_dataset(
    text: str,
    schema: Optional[Mapping[str, str]] = None,
    provenance: str = "",
) -> Dataset:
    """Parse CSV content into a Dataset.

    ``schema`` maps logical fields (id, time, amt, dv, dvid, wt, age, sex)
    to the actual column headers; headers resolve case-insensitively.
    """
    schema = dict(DEFAULT_SCHEMA, **(schema or {}))
    reader = csv.reader(io.StringIO(text))
    rows = [r for r in reader if any(cell.strip() for cell in r)]
    if not rows:
        raise EmptyDataset("no rows in input")

    header = [h.strip().lower() for h in rows[0]]
    col_index: dict[str, int] = {}
    for logical, col_name in schema.items():
        try:
            col_index[logical] = header.index(col_name.lower())
        except ValueError:
            if logical in _REQUIRED_FIELDS:
                raise MissingColumn(f"required column {col_name!r} not found") from None

    order: list[str] = []
    doses: dict[str, list[DoseEvent]] = {}
    obs: dict[str, list[Observation]] = {}
    covs: dict[str, Covariates] = {}

    def cell(row: Sequence[str], logical: str) -> str:
        idx = col_index.get(logical)
        if idx is None or idx >= len(row):
            return MISSING
        return row[idx]

    for rownum, row in enumerate(rows[1:], start=2):
        sid = cell(row, "id").strip()
        if sid == "" or sid == MISSING:
            raise DatasetError(f"row {rownum}: missing subject id")
        time = _parse_float(cell(row, "time"), rownum, schema["time"])
        if time is None:
            raise DatasetError(f"row {rownum}: missing time")
        if sid not in order:
            order.append(sid)
            doses[sid] = []
            obs[sid] = []
            covs[sid] = Covariates(
                weight=_parse_float(cell(row, "wt"), rownum, schema["wt"]),
                age=_parse_float(cell(row, "age"), rownum, schema["age"]),
                sex=_parse_sex(cell(row, "sex")),
            )
        amt = _parse_float(cell(row, "amt"), rownum, schema["amt"])
        if amt is not None:
            doses[sid].append(DoseEvent(time=time, amount=amt))
        dv = _parse_float(cell(row, "dv"), rownum, schema["dv"])
        if dv is not None:
            dvid = _parse_float(cell(row, "dvid"), rownum, schema["dvid"])
            if dvid is None or int(dvid) not in (1, 2) or dvid != int(dvid):
                raise UnknownChannel(
                    f"row {rownum}: DVID must be 1 or 2 for observation rows, "
                    f"got {cell(row, 'dvid')!r}"
                )
            obs[sid].append(
                Observation(time=time, value=dv, channel=Channel(int(dvid)))
            )

    subjects = tuple(
        Subject(id=sid, doses=tuple(doses[sid]), observations=tuple(obs[sid]), covariates=covs[sid])
        for sid in order
    )
    if not subjects:
        raise EmptyDataset("no subjects in input")
    return Dataset(subjects=subjects, provenance=provenance)


def _fmt(value: Optional[float]) -> str:
    return MISSING if value is None else repr(value)


def serialize_dataset(dataset: Dataset) -> str:
    """Write a Dataset back to the canonical CSV schema.

    Dose rows precede observation rows per subject; floats use shortest
    round-trip formatting so parse(serialize(d)) == d.
    """
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(list(DEFAULT_SCHEMA.values()))
    for s in dataset.subjects:
        cov = s.covariates
        sex = cov.sex if cov.sex != "unknown" else MISSING
        tail = [_fmt(cov.weight), _fmt(cov.age), sex]
        for d in s.doses:
            writer.writerow([s.id, repr(d.time), repr(d.amount), MISSING, MISSING] + tail)
        for o in s.observations:
            writer.writerow(
                [s.id, repr(o.time), MISSING, repr(o.value), str(o.channel.value)] + tail
            )
    return out.getvalue()


def fingerprint(dataset: Dataset) -> str:
    """Content hash of a dataset (covariates, doses, observations)."""
    return hashlib.sha256(serialize_dataset(dataset).encode("utf-8")).hexdigest()


def relabel(subject: Subject, new_id: str, origin: Optional[str] = None) -> Subject:
    return replace(subject, id=new_id, origin=origin)
