"""Event log ingestion, prefix encoding, standardization and temporal splitting."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np
import pandas as pd

from . import _io

TEMPORAL_FEATURES = (
    "time_since_case_start",
    "time_since_last_event",
    "time_since_midnight",
    "month",
    "weekday",
    "hour",
    "time_since_first_case",
)

ACTIVITY_ATTR = "activity"


class EventLogError(ValueError):
    """Base class for malformed event log input."""


class MissingColumn(EventLogError):
    pass


class TimestampParseError(EventLogError):
    pass


class NonBinaryTreatment(EventLogError):
    pass


class NonBinaryOutcome(EventLogError):
    pass


class EmptyLog(EventLogError):
    pass


class DimensionMismatch(ValueError):
    pass


@dataclass(frozen=True)
class LogSchema:
    """Column mapping of a CSV event log."""

    case_id_col: str
    activity_col: str
    timestamp_col: str
    treatment_col: str
    outcome_col: str
    timestamp_format: str | None = None
    static_cols: tuple[str, ...] = ()
    dynamic_cols: tuple[str, ...] = ()

    @classmethod
    def from_dict(cls, doc: Mapping) -> "LogSchema":
        doc = dict(doc)
        doc["static_cols"] = tuple(doc.get("static_cols", ()))
        doc["dynamic_cols"] = tuple(doc.get("dynamic_cols", ()))
        return cls(**doc)

    @classmethod
    def from_json(cls, path: str | Path) -> "LogSchema":
        return cls.from_dict(_io.read_json(path))

    def to_dict(self) -> dict:
        return {
            "case_id_col": self.case_id_col,
            "activity_col": self.activity_col,
            "timestamp_col": self.timestamp_col,
            "timestamp_format": self.timestamp_format,
            "treatment_col": self.treatment_col,
            "outcome_col": self.outcome_col,
            "static_cols": list(self.static_cols),
            "dynamic_cols": list(self.dynamic_cols),
        }


@dataclass(frozen=True)
class Event:
    activity: str
    case_id: str
    timestamp: datetime
    attrs: Mapping[str, float | str | None] = field(default_factory=dict)

    def __post_init__(self):
        if not self.activity:
            raise EventLogError(f"empty activity in case {self.case_id!r}")
        if self.timestamp.tzinfo is None:
            raise EventLogError("event timestamps must be timezone-aware (UTC)")


@dataclass(frozen=True)
class Trace:
    case_id: str
    events: tuple[Event, ...]
    treatment: int
    outcome: int

    def __post_init__(self):
        if not self.events:
            raise EventLogError(f"trace {self.case_id!r} has no events")
        if any(e.case_id != self.case_id for e in self.events):
            raise EventLogError(f"trace {self.case_id!r} mixes case identifiers")
        times = [e.timestamp for e in self.events]
        if any(b < a for a, b in zip(times, times[1:])):
            raise EventLogError(f"trace {self.case_id!r} is not time-sorted")
        if self.treatment not in (0, 1):
            raise NonBinaryTreatment(f"case {self.case_id!r}: treatment {self.treatment!r}")
        if self.outcome not in (0, 1):
            raise NonBinaryOutcome(f"case {self.case_id!r}: outcome {self.outcome!r}")

    def __len__(self) -> int:
        return len(self.events)

    @property
    def start_time(self) -> datetime:
        return self.events[0].timestamp

    @property
    def end_time(self) -> datetime:
        return self.events[-1].timestamp


@dataclass(frozen=True)
class EventLog:
    traces: tuple[Trace, ...]
    attr_schema: Mapping[str, str]  # attribute -> "numeric" | "categorical"
    static_attrs: tuple[str, ...] = ()
    dynamic_attrs: tuple[str, ...] = ()

    def __post_init__(self):
        declared = set(self.static_attrs) | set(self.dynamic_attrs)
        if declared != set(self.attr_schema):
            raise EventLogError("attribute schema does not match declared static/dynamic attributes")

    def __len__(self) -> int:
        return len(self.traces)

    def __iter__(self) -> Iterator[Trace]:
        return iter(self.traces)

    @property
    def case_ids(self) -> list[str]:
        return [t.case_id for t in self.traces]

    def with_traces(self, traces: Sequence[Trace]) -> "EventLog":
        return replace(self, traces=tuple(traces))


def _to_binary(values: pd.Series, name: str, exc: type[EventLogError]) -> np.ndarray:
    num = pd.to_numeric(values.str.strip(), errors="coerce")
    bad = num.isna() | ~num.isin([0, 1])
    if bad.any():
        raise exc(f"column {name!r} has non-binary value {values[bad].iloc[0]!r}")
    return num.to_numpy(dtype=np.int64)


def _infer_attr_type(values: pd.Series) -> str:
    present = values[values.str.strip() != ""]
    if present.empty:
        return "numeric"
    return "numeric" if pd.to_numeric(present, errors="coerce").notna().all() else "categorical"


def _parse_attr(raw: str, kind: str) -> float | str | None:
    raw = raw.strip()
    if raw == "":
        return None
    return float(raw) if kind == "numeric" else raw


def ingest_csv(path: str | Path, schema: LogSchema) -> EventLog:
    """Read a CSV event log into traces grouped by case and sorted by time.

    Treatment of a case is 1 if any of its rows carries treatment 1; the case
    outcome is taken from its last event. Events with equal timestamps keep
    their file order.
    """
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    required = [schema.case_id_col, schema.activity_col, schema.timestamp_col,
                schema.treatment_col, schema.outcome_col, *schema.static_cols, *schema.dynamic_cols]
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise MissingColumn(f"missing required column(s): {missing}")
    if frame.empty:
        raise EmptyLog(f"{path} has no rows")

    try:
        ts = pd.to_datetime(frame[schema.timestamp_col], format=schema.timestamp_format, utc=True)
    except (ValueError, TypeError) as exc:
        raise TimestampParseError(f"cannot parse column {schema.timestamp_col!r}: {exc}") from exc
    if ts.isna().any():
        raise TimestampParseError(f"unparseable timestamp in column {schema.timestamp_col!r}")
    ts = ts.dt.floor("s")

    treatment = _to_binary(frame[schema.treatment_col], schema.treatment_col, NonBinaryTreatment)
    outcome = _to_binary(frame[schema.outcome_col], schema.outcome_col, NonBinaryOutcome)
    attr_cols = list(schema.static_cols) + list(schema.dynamic_cols)
    attr_schema = {c: _infer_attr_type(frame[c]) for c in attr_cols}

    frame = frame.assign(_ts=ts, _t=treatment, _y=outcome, _row=np.arange(len(frame)))
    traces = []
    for case_id, rows in frame.groupby(schema.case_id_col, sort=False):
        rows = rows.sort_values(["_ts", "_row"], kind="mergesort")
        events = tuple(
            Event(
                activity=str(r[schema.activity_col]),
                case_id=str(case_id),
                timestamp=r["_ts"].to_pydatetime(),
                attrs={c: _parse_attr(r[c], attr_schema[c]) for c in attr_cols},
            )
            for _, r in rows.iterrows()
        )
        traces.append(Trace(str(case_id), events, int(rows["_t"].max()), int(rows["_y"].iloc[-1])))
    traces.sort(key=lambda t: (t.start_time, t.case_id))
    return EventLog(tuple(traces), attr_schema, tuple(schema.static_cols), tuple(schema.dynamic_cols))


def log_to_frame(log: EventLog, schema: LogSchema) -> pd.DataFrame:
    """Flatten a log back into the row layout ``ingest_csv`` reads."""
    fmt = schema.timestamp_format or "%Y-%m-%d %H:%M:%S"
    rows = []
    for tr in log:
        for e in tr.events:
            row = {
                schema.case_id_col: tr.case_id,
                schema.activity_col: e.activity,
                schema.timestamp_col: e.timestamp.strftime(fmt),
                schema.treatment_col: tr.treatment,
                schema.outcome_col: tr.outcome,
            }
            for c in (*schema.static_cols, *schema.dynamic_cols):
                v = e.attrs.get(c)
                row[c] = "" if v is None else v
            rows.append(row)
    return pd.DataFrame(rows)


@dataclass(frozen=True)
class PrefixSample:
    case_id: str
    numeric_case_id: int
    k: int
    features: np.ndarray
    treatment: int
    outcome: int
    case_end_time: datetime


@dataclass(frozen=True)
class PrefixDataset:
    """Column store of encoded prefixes; row ``i`` is one :class:`PrefixSample`."""

    X: np.ndarray
    treatment: np.ndarray
    outcome: np.ndarray
    k: np.ndarray
    case_id: np.ndarray
    numeric_case_id: np.ndarray
    case_end_time: np.ndarray  # epoch seconds
    feature_names: tuple[str, ...]

    def __post_init__(self):
        n = self.X.shape[0]
        for name in ("treatment", "outcome", "k", "case_id", "numeric_case_id", "case_end_time"):
            if len(getattr(self, name)) != n:
                raise DimensionMismatch(f"column {name} has length {len(getattr(self, name))}, expected {n}")
        if self.X.ndim != 2 or self.X.shape[1] != len(self.feature_names):
            raise DimensionMismatch("feature matrix does not match feature names")

    def __len__(self) -> int:
        return self.X.shape[0]

    def __getitem__(self, i: int) -> PrefixSample:
        return PrefixSample(
            case_id=str(self.case_id[i]),
            numeric_case_id=int(self.numeric_case_id[i]),
            k=int(self.k[i]),
            features=self.X[i],
            treatment=int(self.treatment[i]),
            outcome=int(self.outcome[i]),
            case_end_time=datetime.fromtimestamp(int(self.case_end_time[i]), tz=timezone.utc),
        )

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "PrefixDataset":
        return PrefixDataset(
            self.X[idx], self.treatment[idx], self.outcome[idx], self.k[idx],
            self.case_id[idx], self.numeric_case_id[idx], self.case_end_time[idx],
            self.feature_names,
        )

    def with_features(self, X: np.ndarray) -> "PrefixDataset":
        return replace(self, X=X)

    def feature_index(self, name: str) -> int:
        return self.feature_names.index(name)

    def to_frame(self) -> pd.DataFrame:
        meta = pd.DataFrame({
            "case_id": self.case_id,
            "numeric_case_id": self.numeric_case_id,
            "k": self.k,
            "treatment": self.treatment,
            "outcome": self.outcome,
            "case_end_time": self.case_end_time,
        })
        feats = pd.DataFrame(self.X, columns=[f"f:{n}" for n in self.feature_names])
        return pd.concat([meta, feats], axis=1)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> "PrefixDataset":
        fcols = [c for c in frame.columns if c.startswith("f:")]
        return cls(
            X=frame[fcols].to_numpy(dtype=float),
            treatment=frame["treatment"].to_numpy(dtype=np.int64),
            outcome=frame["outcome"].to_numpy(dtype=np.int64),
            k=frame["k"].to_numpy(dtype=np.int64),
            case_id=frame["case_id"].astype(str).to_numpy(dtype=object),
            numeric_case_id=frame["numeric_case_id"].to_numpy(dtype=np.int64),
            case_end_time=frame["case_end_time"].to_numpy(dtype=np.int64),
            feature_names=tuple(c[2:] for c in fcols),
        )


def _epoch(dt: datetime) -> int:
    return int(dt.timestamp())


@dataclass(frozen=True)
class PrefixEncoder:
    """Last-state prefix encoder with a vocabulary fixed at fit time.

    Categorical attributes (and the activity label) are one-hot encoded, numeric
    attributes carry the most recent non-missing value within the prefix.
    ``month``, ``weekday`` and ``hour`` are plain integers.
    """

    vocab: Mapping[str, tuple[str, ...]]
    numeric_attrs: tuple[str, ...]
    categorical_attrs: tuple[str, ...]
    first_case_time: int
    max_k: int

    @classmethod
    def fit(cls, log: EventLog, max_k: int | None = None) -> "PrefixEncoder":
        if len(log) == 0:
            raise EmptyLog("cannot encode an empty log")
        attrs = (*log.static_attrs, *log.dynamic_attrs)
        categorical = tuple(a for a in attrs if log.attr_schema[a] == "categorical")
        numeric = tuple(a for a in attrs if log.attr_schema[a] == "numeric")
        seen: dict[str, set[str]] = {a: set() for a in (ACTIVITY_ATTR, *categorical)}
        for tr in log:
            for e in tr.events:
                seen[ACTIVITY_ATTR].add(e.activity)
                for a in categorical:
                    if e.attrs.get(a) is not None:
                        seen[a].add(str(e.attrs[a]))
        if max_k is None:
            max_k = default_max_k(log)
        first = min(_epoch(t.start_time) for t in log)
        return cls(
            vocab={a: tuple(sorted(v)) for a, v in seen.items()},
            numeric_attrs=numeric,
            categorical_attrs=categorical,
            first_case_time=first,
            max_k=int(max_k),
        )

    @property
    def feature_names(self) -> tuple[str, ...]:
        names = [f"{a}={v}" for a in (ACTIVITY_ATTR, *self.categorical_attrs) for v in self.vocab[a]]
        names += list(self.numeric_attrs)
        names += list(TEMPORAL_FEATURES)
        names += ["prefix_k", "numeric_case_id"]
        return tuple(names)

    def transform(self, log: EventLog) -> PrefixDataset:
        if len(log) == 0:
            raise EmptyLog("cannot encode an empty log")
        names = self.feature_names
        p = len(names)
        col = {n: i for i, n in enumerate(names)}
        onehot_attrs = (ACTIVITY_ATTR, *self.categorical_attrs)
        num_ids = _numeric_case_ids(log)

        rows, meta = [], []
        for tr in log:
            start = _epoch(tr.start_time)
            end = _epoch(tr.end_time)
            state: dict[str, float | str | None] = {}
            prev = start
            for k, e in enumerate(tr.events[: self.max_k], start=1):
                for a, v in e.attrs.items():
                    if v is not None:
                        state[a] = v
                state[ACTIVITY_ATTR] = e.activity
                x = np.zeros(p)
                for a in onehot_attrs:
                    v = state.get(a)
                    j = col.get(f"{a}={v}") if v is not None else None
                    if j is not None:
                        x[j] = 1.0
                for a in self.numeric_attrs:
                    v = state.get(a)
                    x[col[a]] = 0.0 if v is None else float(v)
                ts = e.timestamp
                now = _epoch(ts)
                x[col["time_since_case_start"]] = now - start
                x[col["time_since_last_event"]] = now - prev
                x[col["time_since_midnight"]] = ts.hour * 3600 + ts.minute * 60 + ts.second
                x[col["month"]] = ts.month
                x[col["weekday"]] = ts.weekday()
                x[col["hour"]] = ts.hour
                x[col["time_since_first_case"]] = start - self.first_case_time
                x[col["prefix_k"]] = k
                x[col["numeric_case_id"]] = num_ids[tr.case_id]
                prev = now
                rows.append(x)
                meta.append((tr.case_id, num_ids[tr.case_id], k, tr.treatment, tr.outcome, end))

        case_id, ncid, ks, t, y, ends = zip(*meta)
        return PrefixDataset(
            X=np.vstack(rows),
            treatment=np.asarray(t, dtype=np.int64),
            outcome=np.asarray(y, dtype=np.int64),
            k=np.asarray(ks, dtype=np.int64),
            case_id=np.asarray(case_id, dtype=object),
            numeric_case_id=np.asarray(ncid, dtype=np.int64),
            case_end_time=np.asarray(ends, dtype=np.int64),
            feature_names=names,
        )

    def to_dict(self) -> dict:
        return {
            "vocab": {a: list(v) for a, v in self.vocab.items()},
            "numeric_attrs": list(self.numeric_attrs),
            "categorical_attrs": list(self.categorical_attrs),
            "first_case_time": self.first_case_time,
            "max_k": self.max_k,
            "feature_names": list(self.feature_names),
            "integer_encoded": ["month", "weekday", "hour"],
            "time_unit": "seconds",
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "PrefixEncoder":
        return cls(
            vocab={a: tuple(v) for a, v in doc["vocab"].items()},
            numeric_attrs=tuple(doc["numeric_attrs"]),
            categorical_attrs=tuple(doc["categorical_attrs"]),
            first_case_time=int(doc["first_case_time"]),
            max_k=int(doc["max_k"]),
        )


def _numeric_case_ids(log: EventLog) -> dict[str, int]:
    # rank by (start time, case id) so simultaneous starts still get distinct ids
    order = sorted(log, key=lambda t: (t.start_time, t.case_id))
    return {t.case_id: i + 1 for i, t in enumerate(order)}


def default_max_k(log: EventLog) -> int:
    lengths = np.array([len(t) for t in log])
    return max(1, int(math.ceil(np.percentile(lengths, 90))))


def encode_prefixes(
    log: EventLog, max_k: int | None = None, encoder: PrefixEncoder | None = None
) -> tuple[PrefixDataset, PrefixEncoder]:
    """Encode every k-prefix (k <= max_k) of every trace.

    Pass a previously fitted ``encoder`` to reuse its vocabulary; unseen
    categories then encode as all zeros.
    """
    if len(log) == 0:
        raise EmptyLog("cannot encode an empty log")
    if encoder is None:
        encoder = PrefixEncoder.fit(log, max_k)
    elif max_k is not None and max_k != encoder.max_k:
        encoder = replace(encoder, max_k=int(max_k))
    return encoder.transform(log), encoder


@dataclass(frozen=True)
class StandardizationStats:
    mean: np.ndarray
    std: np.ndarray
    fit_id: str

    @property
    def constant(self) -> np.ndarray:
        return self.std <= 1e-12 * np.maximum(1.0, np.abs(self.mean))

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "constant": self.constant.tolist(),
            "fit_id": self.fit_id,
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "StandardizationStats":
        return cls(np.asarray(doc["mean"], dtype=float), np.asarray(doc["std"], dtype=float), doc["fit_id"])


def _apply_stats(X: np.ndarray, stats: StandardizationStats) -> np.ndarray:
    if X.shape[1] != stats.mean.shape[0]:
        raise DimensionMismatch(f"data has {X.shape[1]} features, stats have {stats.mean.shape[0]}")
    out = X.astype(float, copy=True)
    live = ~stats.constant
    out[:, live] = (X[:, live] - stats.mean[live]) / stats.std[live]
    return out


def standardize(
    data: PrefixDataset | np.ndarray, stats: StandardizationStats | None = None
) -> tuple[PrefixDataset | np.ndarray, StandardizationStats]:
    """Z-score features using ``stats`` or, if absent, statistics of ``data`` itself."""
    X = data.X if isinstance(data, PrefixDataset) else np.asarray(data, dtype=float)
    if stats is None:
        fit_id = hashlib.sha1(np.ascontiguousarray(X).tobytes()).hexdigest()[:12]
        stats = StandardizationStats(X.mean(axis=0), X.std(axis=0), fit_id)
    Z = _apply_stats(X, stats)
    if isinstance(data, PrefixDataset):
        return data.with_features(Z), stats
    return Z, stats


def temporal_split(log: EventLog, fraction: float = 0.5) -> tuple[EventLog, EventLog]:
    """Split cases by start time; drop training cases that overlap the later set.

    The later log is returned ordered by case end time.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    if len(log) < 2:
        raise EmptyLog("need at least two cases to split")
    by_start = sorted(log, key=lambda t: (t.start_time, t.case_id))
    n_train = min(max(int(round(fraction * len(by_start))), 1), len(by_start) - 1)
    train, later = by_start[:n_train], by_start[n_train:]
    boundary = min(t.start_time for t in later)
    train = [t for t in train if t.end_time < boundary]
    later.sort(key=lambda t: (t.end_time, t.case_id))
    return log.with_traces(train), log.with_traces(later)


def save_dataset(
    path: str | Path,
    data: PrefixDataset,
    encoder: PrefixEncoder | None = None,
    stats: StandardizationStats | None = None,
) -> Path:
    """Write the encoded dataset as CSV plus a ``.meta.json`` sidecar."""
    path = Path(path)
    _io.write_csv(path, data.to_frame())
    _io.write_json(
        path.with_suffix(".meta.json"),
        {
            "kind": "encoded_dataset",
            "version": _io.FORMAT_VERSION,
            "encoder": encoder.to_dict() if encoder else None,
            "standardization": stats.to_dict() if stats else None,
        },
    )
    return path


def load_dataset(path: str | Path) -> tuple[PrefixDataset, PrefixEncoder | None, StandardizationStats | None]:
    path = Path(path)
    data = PrefixDataset.from_frame(pd.read_csv(path, keep_default_na=False, dtype={"case_id": str}))
    meta_path = path.with_suffix(".meta.json")
    if not meta_path.exists():
        return data, None, None
    meta = json.loads(meta_path.read_text())
    _io.check_version(meta, "encoded_dataset")
    enc = PrefixEncoder.from_dict(meta["encoder"]) if meta.get("encoder") else None
    stats = StandardizationStats.from_dict(meta["standardization"]) if meta.get("standardization") else None
    return data, enc, stats
