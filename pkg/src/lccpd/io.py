"""File formats: region datasets, class libraries, references, truth sidecars, run configs.

Dataset text format (``.csv``)::

    # lccpd-dataset 1
    # B=7
    # T=19
    # J=10
    # scale=1.0
    # missing=NA
    # bands=b1,b2,...          (optional)
    # grid=50x50               (optional)
    pixel_id,row,col,y1_b1_t1,y1_b1_t2,...
    p0,0,0,1234.0,NA,...

Values are listed year by year, band by band, time by time (the ``(J, B, T)``
C-order flattening). Stored numbers equal model values times ``scale``.

Dataset binary format (``.lcb``, little endian)::

    b"LCCPDBIN" | u8 version | u32 header length | header JSON (utf-8)
    per pixel: u16 id length | id (utf-8) | i32 row | i32 col
               | f64[J*B*T] values | packed missing bitmask (ceil(J*B*T/8) bytes)
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import Background, ChangeClass, ChangeConfig, ClassLibrary, Hyperparams, PixelSeries

__all__ = [
    "RegionDataset",
    "RunConfig",
    "SchemaError",
    "load_dataset",
    "load_library",
    "load_references",
    "read_config_file",
    "read_truth",
    "save_dataset",
    "save_library",
    "save_references",
    "write_truth",
]

TEXT_MAGIC = "lccpd-dataset 1"
BINARY_MAGIC = b"LCCPDBIN"
BINARY_VERSION = 1
LIBRARY_FORMAT = "lccpd-class-library"


class SchemaError(ValueError):
    """Malformed input file; the message names the file and record."""


@dataclass(eq=False)
class RegionDataset:
    """Pixels of a region in stored units.

    ``values`` has shape ``(N, J, B, T)`` with NaN wherever ``mask`` is True.
    ``positions`` holds optional ``(row, col)`` grid coordinates (-1 if unset).
    """

    pixel_ids: list[str]
    values: np.ndarray
    mask: np.ndarray
    scale: float = 1.0
    band_labels: list[str] | None = None
    grid: tuple[int, int] | None = None
    positions: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.ndim != 4:
            raise SchemaError(f"dataset values must have shape (N, J, B, T), got {self.values.shape}")
        if self.mask.shape != self.values.shape:
            raise SchemaError("mask shape does not match values shape")
        self.pixel_ids = [str(p) for p in self.pixel_ids]
        if len(self.pixel_ids) != self.values.shape[0]:
            raise SchemaError(f"{len(self.pixel_ids)} ids for {self.values.shape[0]} pixels")
        if len(set(self.pixel_ids)) != len(self.pixel_ids):
            raise SchemaError("pixel ids must be unique")
        if not self.scale > 0:
            raise SchemaError("scale must be positive")
        if self.positions is None:
            self.positions = np.full((len(self.pixel_ids), 2), -1, dtype=int)
        self.positions = np.asarray(self.positions, dtype=int).reshape(len(self.pixel_ids), 2)
        self.values = np.where(self.mask, np.nan, self.values)
        if np.isnan(self.values[~self.mask]).any():
            raise SchemaError("observed cells must not be NaN")
        if self.band_labels is not None and len(self.band_labels) != self.B:
            raise SchemaError(f"{len(self.band_labels)} band labels for B={self.B}")

    @property
    def N(self) -> int:
        return self.values.shape[0]

    @property
    def J(self) -> int:
        return self.values.shape[1]

    @property
    def B(self) -> int:
        return self.values.shape[2]

    @property
    def T(self) -> int:
        return self.values.shape[3]

    def pixels(self) -> list[PixelSeries]:
        """Pixels in model units (stored values divided by ``scale``)."""
        return [PixelSeries(pid, self.values[k] / self.scale, self.mask[k]) for k, pid in enumerate(self.pixel_ids)]

    @classmethod
    def from_pixels(cls, pixels: Sequence[PixelSeries], scale: float = 1.0, **kwargs) -> "RegionDataset":
        if not pixels:
            raise SchemaError("no pixels")
        values = np.stack([p.values for p in pixels]) * scale
        mask = np.stack([p.mask for p in pixels])
        return cls([p.pixel_id for p in pixels], values, mask, scale=scale, **kwargs)

    def header(self) -> dict:
        out = {"B": self.B, "T": self.T, "J": self.J, "scale": self.scale}
        if self.band_labels is not None:
            out["bands"] = list(self.band_labels)
        if self.grid is not None:
            out["grid"] = list(self.grid)
        return out

    def mask_whole_time_points(self) -> "RegionDataset":
        """Copy in which a time point missing in any band is missing in every band."""
        any_band = self.mask.any(axis=2, keepdims=True)
        mask = np.broadcast_to(any_band, self.mask.shape).copy()
        return RegionDataset(list(self.pixel_ids), self.values, mask, self.scale, self.band_labels, self.grid,
                             self.positions.copy())

    def equals(self, other: "RegionDataset") -> bool:
        return (
            self.pixel_ids == other.pixel_ids
            and np.array_equal(self.mask, other.mask)
            and np.array_equal(self.values, other.values, equal_nan=True)
            and self.scale == other.scale
            and self.band_labels == other.band_labels
            and self.grid == other.grid
            and np.array_equal(self.positions, other.positions)
        )


def _is_binary(path: Path) -> bool:
    return path.suffix.lower() == ".lcb"


def save_dataset(dataset: RegionDataset, path, missing: str = "NA") -> None:
    path = Path(path)
    if _is_binary(path):
        _save_binary(dataset, path)
    else:
        _save_text(dataset, path, missing)


def load_dataset(path) -> RegionDataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if _is_binary(path):
        return _load_binary(path)
    return _load_text(path)


def _fmt(x: float) -> str:
    return repr(float(x))


def _save_text(ds: RegionDataset, path: Path, missing: str) -> None:
    J, B, T = ds.J, ds.B, ds.T
    lines = [f"# {TEXT_MAGIC}", f"# B={B}", f"# T={T}", f"# J={J}", f"# scale={_fmt(ds.scale)}", f"# missing={missing}"]
    if ds.band_labels is not None:
        lines.append("# bands=" + ",".join(ds.band_labels))
    if ds.grid is not None:
        lines.append(f"# grid={ds.grid[0]}x{ds.grid[1]}")
    cols = ["pixel_id", "row", "col"] + [
        f"y{j + 1}_b{b + 1}_t{t + 1}" for j in range(J) for b in range(B) for t in range(T)
    ]
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for k, pid in enumerate(ds.pixel_ids):
            row, col = ds.positions[k]
            flat_v = ds.values[k].ravel()
            flat_m = ds.mask[k].ravel()
            cells = [missing if m else _fmt(v) for v, m in zip(flat_v, flat_m)]
            writer.writerow([pid, "" if row < 0 else row, "" if col < 0 else col] + cells)


def _parse_header(lines: Iterable[str], path) -> dict:
    header = {}
    for lineno, line in lines:
        body = line[1:].strip()
        if body == TEXT_MAGIC or not body:
            continue
        if "=" not in body:
            raise SchemaError(f"{path}:{lineno}: malformed header line {line!r}")
        key, value = (s.strip() for s in body.split("=", 1))
        header[key] = value
    return header


def _load_text(path: Path) -> RegionDataset:
    with open(path, newline="") as fh:
        raw = fh.read().splitlines()
    if not raw or raw[0].strip() != f"# {TEXT_MAGIC}":
        raise SchemaError(f"{path}:1: missing '# {TEXT_MAGIC}' signature")
    head = [(i + 1, line) for i, line in enumerate(raw) if line.startswith("#")]
    body_start = len(head)
    header = _parse_header(head, path)
    try:
        B, T, J = int(header["B"]), int(header["T"]), int(header["J"])
        scale = float(header.get("scale", "1"))
    except (KeyError, ValueError) as exc:
        raise SchemaError(f"{path}: header must define integer B, T, J and numeric scale ({exc})") from exc
    missing = header.get("missing", "NA")
    bands = header["bands"].split(",") if "bands" in header else None
    grid = None
    if "grid" in header:
        try:
            r, c = header["grid"].lower().split("x")
            grid = (int(r), int(c))
        except ValueError as exc:
            raise SchemaError(f"{path}: bad grid specification {header['grid']!r}") from exc
    width = J * B * T
    reader = csv.reader(raw[body_start:])
    try:
        columns = next(reader)
    except StopIteration:
        raise SchemaError(f"{path}: no column header line") from None
    if len(columns) != 3 + width or columns[0] != "pixel_id":
        raise SchemaError(
            f"{path}:{body_start + 1}: expected pixel_id,row,col plus {width} value columns, got {len(columns)} columns"
        )
    ids, positions, values, masks = [], [], [], []
    for offset, rec in enumerate(reader):
        lineno = body_start + 2 + offset
        if not rec:
            continue
        if len(rec) != 3 + width:
            raise SchemaError(f"{path}:{lineno}: record has {len(rec)} fields, expected {3 + width}")
        ids.append(rec[0])
        try:
            positions.append([int(rec[1]) if rec[1] else -1, int(rec[2]) if rec[2] else -1])
        except ValueError as exc:
            raise SchemaError(f"{path}:{lineno}: bad row/col ({exc})") from exc
        m = np.array([cell == missing for cell in rec[3:]])
        try:
            v = np.array([math.nan if cell == missing else float(cell) for cell in rec[3:]])
        except ValueError as exc:
            raise SchemaError(f"{path}:{lineno}: non-numeric value ({exc})") from exc
        if np.isnan(v[~m]).any():
            raise SchemaError(f"{path}:{lineno}: NaN in an observed cell; use the missing sentinel {missing!r}")
        values.append(v.reshape(J, B, T))
        masks.append(m.reshape(J, B, T))
    if not ids:
        raise SchemaError(f"{path}: no pixel records")
    return RegionDataset(ids, np.stack(values), np.stack(masks), scale, bands, grid, np.array(positions))


def _save_binary(ds: RegionDataset, path: Path) -> None:
    header = dict(ds.header(), n_pixels=ds.N)
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(BINARY_MAGIC + struct.pack("<BI", BINARY_VERSION, len(blob)) + blob)
        for k, pid in enumerate(ds.pixel_ids):
            raw_id = pid.encode()
            fh.write(struct.pack("<H", len(raw_id)) + raw_id)
            fh.write(struct.pack("<ii", *(int(x) for x in ds.positions[k])))
            fh.write(np.where(ds.mask[k], 0.0, ds.values[k]).astype("<f8").tobytes())
            fh.write(np.packbits(ds.mask[k].ravel()).tobytes())


def _load_binary(path: Path) -> RegionDataset:
    data = path.read_bytes()
    if not data.startswith(BINARY_MAGIC):
        raise SchemaError(f"{path}: not an lccpd binary dataset")
    pos = len(BINARY_MAGIC)
    version, hlen = struct.unpack_from("<BI", data, pos)
    if version != BINARY_VERSION:
        raise SchemaError(f"{path}: unsupported binary version {version}")
    pos += 5
    try:
        header = json.loads(data[pos : pos + hlen])
        B, T, J, n = int(header["B"]), int(header["T"]), int(header["J"]), int(header["n_pixels"])
    except (ValueError, KeyError) as exc:
        raise SchemaError(f"{path}: bad header ({exc})") from exc
    pos += hlen
    width = J * B * T
    mbytes = (width + 7) // 8
    ids, positions, values, masks = [], [], [], []
    for k in range(n):
        try:
            (ilen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            ids.append(data[pos : pos + ilen].decode())
            pos += ilen
            positions.append(struct.unpack_from("<ii", data, pos))
            pos += 8
            v = np.frombuffer(data, dtype="<f8", count=width, offset=pos).astype(float)
            pos += 8 * width
            m = np.unpackbits(np.frombuffer(data, dtype=np.uint8, count=mbytes, offset=pos))[:width].astype(bool)
            pos += mbytes
        except (struct.error, ValueError) as exc:
            raise SchemaError(f"{path}: truncated record {k}") from exc
        values.append(v.reshape(J, B, T))
        masks.append(m.reshape(J, B, T))
    if pos != len(data):
        raise SchemaError(f"{path}: {len(data) - pos} trailing bytes after {n} records")
    grid = tuple(header["grid"]) if "grid" in header else None
    return RegionDataset(
        ids, np.stack(values), np.stack(masks), float(header["scale"]), header.get("bands"), grid, np.array(positions)
    )


# ---- class libraries ----------------------------------------------------------------------


def _mat(a) -> list:
    return np.asarray(a, dtype=float).tolist()


def save_library(library: ClassLibrary, path) -> None:
    """Write a library as JSON; matrices are nested row-major lists."""
    bg = library.background
    background = {"id": bg.class_id, "label": bg.label, "mean": _mat(bg.mean)}
    if bg.cov is not None:
        background["cov"] = _mat(bg.cov)
    else:
        background["temporal_cov"] = _mat(bg.temporal_cov)
    doc = {
        "format": LIBRARY_FORMAT,
        "version": 1,
        "B": library.B,
        "T": library.T,
        "layout": "means are length B*T vectors indexed band*T + time; covariance of a class is kron(spectral_cov, temporal_cov)",
        "normalization": "trace(spectral_cov) = B when estimated by train-classes",
        "spectral_cov": _mat(library.spectral_cov),
        "background": background,
        "classes": [
            {"id": c.class_id, "label": c.label, "mean": _mat(c.mean), "temporal_cov": _mat(c.temporal_cov)}
            for c in library.classes
        ],
    }
    if library.ridge_spectral is not None:
        doc["ridge_spectral"] = _mat(library.ridge_spectral)
        doc["compression"] = library.compression
    Path(path).write_text(json.dumps(doc, indent=1))


def load_library(path) -> ClassLibrary:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc})") from exc
    if doc.get("format") != LIBRARY_FORMAT:
        raise SchemaError(f"{path}: not a class library (format={doc.get('format')!r})")
    try:
        bg = doc["background"]
        background = Background(
            int(bg["id"]),
            str(bg.get("label", bg["id"])),
            np.array(bg["mean"], dtype=float),
            cov=np.array(bg["cov"], dtype=float) if "cov" in bg else None,
            temporal_cov=np.array(bg["temporal_cov"], dtype=float) if "temporal_cov" in bg else None,
        )
        classes = tuple(
            ChangeClass(int(c["id"]), str(c.get("label", c["id"])), np.array(c["mean"], dtype=float),
                        np.array(c["temporal_cov"], dtype=float))
            for c in doc["classes"]
        )
        library = ClassLibrary(
            np.array(doc["spectral_cov"], dtype=float),
            background,
            classes,
            ridge_spectral=np.array(doc["ridge_spectral"], dtype=float) if "ridge_spectral" in doc else None,
            compression=doc.get("compression"),
        )
    except KeyError as exc:
        raise SchemaError(f"{path}: missing field {exc}") from exc
    if (library.B, library.T) != (int(doc["B"]), int(doc["T"])):
        raise SchemaError(f"{path}: declared dims {(doc['B'], doc['T'])} do not match matrices")
    return library


# ---- reference fractions and truth ------------------------------------------------------


def save_references(path, fractions: dict, percent: bool = False) -> None:
    J = len(next(iter(fractions.values())))
    with open(path, "w", newline="") as fh:
        fh.write(f"# percent={'true' if percent else 'false'}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["pixel_id"] + [f"f{j + 1}" for j in range(J)])
        for pid, f in fractions.items():
            writer.writerow([pid] + [_fmt(x) for x in f])


def load_references(path) -> dict[str, np.ndarray]:
    """Per-pixel yearly change fractions in [0, 1].

    A ``# percent=true`` header line marks values given in percent.
    """
    path = Path(path)
    lines = path.read_text().splitlines()
    head = [(i + 1, line) for i, line in enumerate(lines) if line.startswith("#")]
    header = _parse_header(head, path)
    percent = header.get("percent", "false").lower() in ("1", "true", "yes")
    rows = list(csv.reader(lines[len(head):]))
    if not rows or rows[0][0] != "pixel_id":
        raise SchemaError(f"{path}: expected a 'pixel_id,f1,...' column header")
    out = {}
    for k, rec in enumerate(rows[1:]):
        if not rec:
            continue
        try:
            f = np.array([float(x) for x in rec[1:]])
        except ValueError as exc:
            raise SchemaError(f"{path}:{len(head) + 2 + k}: {exc}") from exc
        if percent:
            f = f / 100.0
        if np.any((f < 0) | (f > 1)):
            raise SchemaError(f"{path}:{len(head) + 2 + k}: fractions outside [0, 1]")
        out[rec[0]] = f
    return out


def write_truth(path, labeled) -> None:
    """JSON-lines sidecar: one ``{pixel_id, rho1, rho2, class_id}`` object per pixel."""
    with open(path, "w") as fh:
        for lp in labeled:
            rec = {"pixel_id": lp.series.pixel_id, "rho1": lp.truth.rho1, "rho2": lp.truth.rho2, "class_id": lp.class_id}
            fh.write(json.dumps(rec) + "\n")


def read_truth(path) -> dict[str, ChangeConfig]:
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out[str(rec["pixel_id"])] = ChangeConfig(int(rec["rho1"]), int(rec["rho2"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise SchemaError(f"{path}:{lineno}: bad truth record ({exc})") from exc
    return out


# ---- run configuration ------------------------------------------------------------------


@dataclass
class RunConfig:
    """Everything a CLI run needs; validated before any computation."""

    library: str | None = None
    dataset: str | None = None
    reference: str | None = None
    truth: str | None = None
    output: str | None = None
    pi0: float = 1e-10
    piR: float = 0.01
    kappa0: float = 5e4
    kappac: float = 5e4
    dirichlet: tuple[float, ...] | None = None
    epsilon: float = 1e-6
    K: int | None = None
    whiten: bool = False
    jitter: float = 1e-8
    seed: int = 0
    threads: int = 1
    max_iters: int = 200
    extra: dict = field(default_factory=dict)

    def hyperparams(self) -> Hyperparams:
        return Hyperparams(
            pi0=self.pi0, piR=self.piR, kappa0=self.kappa0, kappac=self.kappac, dirichlet=self.dirichlet,
            epsilon=self.epsilon, K=self.K, whiten=self.whiten, jitter=self.jitter,
        )

    def validate(self) -> "RunConfig":
        self.hyperparams()
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        return self

    def as_dict(self) -> dict:
        d = asdict(self)
        if d["dirichlet"] is not None:
            d["dirichlet"] = list(d["dirichlet"])
        return d

    def model_hash(self, library_digest: str = "") -> str:
        """Hash of the settings that determine fit results (excludes paths and thread count)."""
        keys = ("pi0", "piR", "kappa0", "kappac", "dirichlet", "epsilon", "K", "whiten", "jitter", "max_iters")
        d = self.as_dict()
        payload = json.dumps({k: d[k] for k in keys} | {"library": library_digest}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


_CONFIG_TYPES = {f.name: f.type for f in fields(RunConfig)}


def coerce_config_value(key: str, raw: str):
    key = key.replace("-", "_")
    if key not in _CONFIG_TYPES or key == "extra":
        raise SchemaError(f"unknown config key {key!r}")
    text = raw.strip()
    if key == "dirichlet":
        return tuple(float(x) for x in text.split(",")) if text.lower() not in ("", "none") else None
    if key == "K":
        return None if text.lower() in ("", "none", "off") else int(text)
    if key == "whiten":
        return text.lower() in ("1", "true", "yes", "on")
    if key in ("seed", "threads", "max_iters"):
        return int(text)
    if key in ("pi0", "piR", "kappa0", "kappac", "epsilon", "jitter"):
        return float(text)
    return text


def read_config_file(path) -> dict:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SchemaError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            out[key.replace("-", "_")] = coerce_config_value(key, value)
        except ValueError as exc:
            raise SchemaError(f"{path}:{lineno}: bad value for {key!r} ({exc})") from exc
    return out


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]
