"""On-disk formats: field dumps, checkpoints, time-series CSV, JSON.

Field dump layout
-----------------
One line of JSON (the preamble, UTF-8, terminated by ``\\n``) followed by raw
little-endian float64 arrays.  For every name in ``preamble["fields"]`` the
full atlas vector is written in chart order: the core block
(``n_core x n_core``, index ``[i, k]`` at ``(x_i, y_k) = (i, k) / n_core``,
row-major) and then one block per end (``n_s x n_theta``, index ``[k, m]``
at ``(s_k, theta_m)``, row-major).  ``preamble["charts"]`` lists the shapes,
coordinate bounds and offsets.  Hole nodes of the core hold filler values.
"""

from __future__ import annotations

import csv
import io as _io
import json
import math
from pathlib import Path

import numpy as np

from .atlas import Discretization, SurfaceSpec, build_atlas
from .diagnostics import CSV_VERSION, TimeSeriesRecord
from .geometry import ConformalMetric, build_background
from .operators import ScalarField

FIELD_FORMAT = "cuspflow-field"
FIELD_VERSION = 1
DTYPE = np.dtype("<f8")


class ArtifactError(ValueError):
    """An artifact on disk is missing, truncated or malformed."""


# ------------------------------------------------------------------ json
def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def dumps_json(obj, indent: int | None = 2) -> str:
    """Deterministic JSON: sorted keys, shortest round-trip floats, ``null`` for non-finite."""
    return json.dumps(_jsonable(obj), sort_keys=True, indent=indent, allow_nan=False)


def write_json(path: Path, obj) -> None:
    Path(path).write_text(dumps_json(obj) + "\n")


def read_json(path: Path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArtifactError(f"{path}: {exc}") from exc


# ------------------------------------------------------------ field dump
def chart_layout(atlas) -> list[dict]:
    n = atlas.n
    charts = [{"name": "core", "shape": [n, n], "offset": 0,
               "bounds": [[0.0, 1.0 - 1.0 / n], [0.0, 1.0 - 1.0 / n]],
               "axes": ["x", "y"]}]
    for j, c in enumerate(atlas.cusps):
        charts.append({
            "name": f"end{j}", "shape": [c.n_s, c.n_theta], "offset": atlas.offsets[j],
            "bounds": [[c.s_lo, c.s_hi], [0.0, 2 * np.pi * (1 - 1 / c.n_theta)]],
            "axes": ["s", "theta"], "center": list(c.center),
        })
    return charts


def geometry_header(atlas) -> dict:
    return {"surface": {"punctures": [list(p) for p in atlas.spec.punctures],
                        "sigma": list(atlas.spec.sigma), "mu": atlas.spec.mu},
            "discretization": {k: v for k, v in vars(atlas.disc).items()}}


def encode_fields(atlas, fields: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    names = list(fields)
    pre = {"format": FIELD_FORMAT, "version": FIELD_VERSION, "endianness": "little",
           "dtype": "float64", "size": atlas.size, "fields": names,
           "charts": chart_layout(atlas), "meta": meta or {}}
    pre.update(geometry_header(atlas))
    head = dumps_json(pre, indent=None).encode() + b"\n"
    body = b"".join(np.ascontiguousarray(fields[k], dtype=DTYPE).tobytes() for k in names)
    for k in names:
        if np.asarray(fields[k]).shape != (atlas.size,):
            raise ValueError(f"field {k!r} has the wrong size")
    return head + body


def write_fields(path: Path, atlas, fields: dict[str, np.ndarray], meta: dict | None = None) -> None:
    Path(path).write_bytes(encode_fields(atlas, fields, meta))


def read_fields(path: Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse a field dump into ``(preamble, {name: vector})``."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise ArtifactError(f"{path}: {exc}") from exc
    nl = raw.find(b"\n")
    if nl < 0:
        raise ArtifactError(f"{path}: missing preamble")
    try:
        pre = json.loads(raw[:nl])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ArtifactError(f"{path}: bad preamble: {exc}") from exc
    if pre.get("format") != FIELD_FORMAT or pre.get("version") != FIELD_VERSION:
        raise ArtifactError(f"{path}: not a version-{FIELD_VERSION} field dump")
    size = int(pre["size"])
    names = pre["fields"]
    body = raw[nl + 1:]
    if len(body) != 8 * size * len(names):
        raise ArtifactError(f"{path}: expected {8 * size * len(names)} data bytes, found {len(body)}")
    data = np.frombuffer(body, dtype=DTYPE).reshape(len(names), size)
    return pre, {k: data[i].astype(float) for i, k in enumerate(names)}


def atlas_from_header(pre: dict):
    s = pre["surface"]
    spec = SurfaceSpec(tuple(tuple(p) for p in s["punctures"]), tuple(s["sigma"]), s["mu"])
    disc = Discretization(**pre["discretization"])
    atlas = build_atlas(spec, disc)
    if atlas.size != pre["size"]:
        raise ArtifactError("field size does not match the rebuilt atlas")
    return atlas


# ------------------------------------------------------------ checkpoints
def checkpoint_bytes(state) -> bytes:
    """Serialize a :class:`~cuspflow.flow.FlowState` (factor, potential, clocks)."""
    fields = {"u": state.metric.u.values}
    if state.f is not None:
        fields["f"] = state.f.values
    rho = None if math.isnan(state.rho) else state.rho
    meta = {"kind": "checkpoint", "t": state.t, "rho": rho, "lam": list(state.lam),
            "dt_next": state.dt_next}
    return encode_fields(state.atlas, fields, meta)


def save_checkpoint(path: Path, state) -> None:
    Path(path).write_bytes(checkpoint_bytes(state))


def metric_checkpoint_bytes(metric: ConformalMetric, t: float = 0.0, rho: float | None = None) -> bytes:
    meta = {"kind": "checkpoint", "t": t, "rho": rho, "lam": list(metric.end_limits),
            "dt_next": 0.0}
    return encode_fields(metric.atlas, {"u": metric.u.values}, meta)


def load_checkpoint(path: Path, background=None):
    """Rebuild a :class:`~cuspflow.flow.FlowState` and return it with the preamble.

    A checkpoint written without ``rho`` (a bare metric) loads with
    ``rho = nan``.  Saving the loaded state reproduces the file byte for byte.
    """
    from .flow import FlowState

    pre, fields = read_fields(path)
    meta = pre.get("meta", {})
    if meta.get("kind") != "checkpoint" or "u" not in fields:
        raise ArtifactError(f"{path}: not a checkpoint")
    if background is None:
        atlas = atlas_from_header(pre)
        background = build_background(atlas.spec, atlas)
    atlas = background.atlas
    u = ScalarField(atlas, fields["u"].copy())
    phi = np.zeros(atlas.size)
    act = atlas.active_mask
    phi[act] = np.log(u.values[act])
    f = ScalarField(atlas, fields["f"].copy()) if "f" in fields else None
    rho = meta.get("rho")
    st = FlowState(float(meta["t"]), ScalarField(atlas, phi), background,
                   float("nan") if rho is None else float(rho),
                   tuple(float(x) for x in meta["lam"]), f)
    st.dt_next = float(meta.get("dt_next", 0.0))
    # keep the stored factor bit-exact rather than exp(log u)
    st._metric = ConformalMetric(background, u, st.lam)
    return st, pre


# ------------------------------------------------------------------- csv
def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    return repr(x) if math.isfinite(x) else "nan"


def csv_header_line(n_ends: int) -> str:
    cols = TimeSeriesRecord.columns(n_ends)
    return f"# cuspflow timeseries v{CSV_VERSION}; n_ends={n_ends}; columns: {' '.join(cols)}"


def timeseries_csv(records, n_ends: int) -> str:
    cols = TimeSeriesRecord.columns(n_ends)
    buf = _io.StringIO()
    buf.write(csv_header_line(n_ends) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in records:
        flat = r.flat()
        w.writerow([_fmt(flat[c]) for c in cols])
    return buf.getvalue()


def write_timeseries(path: Path, records, n_ends: int) -> None:
    Path(path).write_text(timeseries_csv(records, n_ends))


def read_timeseries(path: Path) -> tuple[list[str], dict[str, np.ndarray]]:
    """Columns and float arrays of a time-series CSV; checks the version line."""
    try:
        lines = Path(path).read_text().splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise ArtifactError(f"{path}: {exc}") from exc
    if not lines or not lines[0].startswith(f"# cuspflow timeseries v{CSV_VERSION};"):
        raise ArtifactError(f"{path}: missing or unsupported version header")
    rows = list(csv.reader(lines[1:]))
    if not rows:
        raise ArtifactError(f"{path}: missing column row")
    cols = rows[0]
    declared = lines[0].split("columns:", 1)[-1].split()
    if declared != cols:
        raise ArtifactError(f"{path}: column row disagrees with the header line")
    try:
        data = np.array([[float(x) for x in r] for r in rows[1:]], dtype=float)
    except ValueError as exc:
        raise ArtifactError(f"{path}: {exc}") from exc
    if data.size == 0:
        data = np.zeros((0, len(cols)))
    if data.shape[1] != len(cols):
        raise ArtifactError(f"{path}: ragged rows")
    return cols, {c: data[:, i] for i, c in enumerate(cols)}
