"""Gait data ingestion, stratified splitting and the synthetic generator.

Loaders turn files into :class:`SampleWindow` objects whose ``features`` are
flat row-major ``K x T`` grids: rows are signal channels (or coordinates),
columns are time steps.
"""

from __future__ import annotations

import csv
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .spatiotemporal import WindowLayout
from .tensor import L2_EPS, Rng

log = logging.getLogger(__name__)

SKELETON_COLUMNS = 63
IMAGE_SIDE = 50


class DataError(ValueError):
    """Input data is malformed or inconsistent with the configured layout."""


@dataclass
class SampleWindow:
    features: np.ndarray  # (N,)
    label: int
    subject: str = ""
    modality: str = "timeseries"
    source: str = ""
    index: int = 0


@dataclass
class DatasetSpec:
    layout: WindowLayout
    n_classes: int
    label_map: dict[str, int] = field(default_factory=dict)
    modality: str = "timeseries"


def l2_normalize_np(x: np.ndarray) -> np.ndarray:
    return x / max(float(np.sqrt((x * x).sum())), L2_EPS)


# --------------------------------------------------------------------------
# text parsing


def _split_cells(line: str) -> list[str]:
    if "," in line:
        return [c.strip() for c in line.split(",")]
    return line.split()


def _read_numeric_rows(path: Path, allow_header: bool = True) -> np.ndarray:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            cells = _split_cells(line.strip())
            if "" in cells:
                raise DataError(f"{path}: row {lineno}, column {cells.index('') + 1}: empty cell")
            try:
                rows.append([float(c) for c in cells])
            except ValueError:
                if allow_header and not rows and _is_header(cells):
                    continue
                bad = next(col for col, c in enumerate(cells, 1) if not _is_number(c))
                raise DataError(f"{path}: row {lineno}, column {bad}: non-numeric cell {cells[bad - 1]!r}") from None
    widths = {len(r) for r in rows}
    if len(widths) > 1:
        raise DataError(f"{path}: rows have differing column counts {sorted(widths)}")
    arr = np.array(rows, dtype=np.float64).reshape(len(rows), -1)
    if not np.isfinite(arr).all():
        raise DataError(f"{path}: non-finite values")
    return arr


def _is_number(c: str) -> bool:
    try:
        float(c)
    except ValueError:
        return False
    return True


def _is_header(cells) -> bool:
    return all(c and not _is_number(c) for c in cells)


def read_manifest(path: str | Path) -> list[tuple[Path, str]]:
    """``path,class_name`` rows; relative paths resolve against the manifest."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["path", "class_name"]:
            raise DataError(f"{path}: manifest header must be 'path,class_name'")
        entries = []
        for lineno, row in enumerate(reader, start=2):
            if not row or not "".join(row).strip():
                continue
            if len(row) != 2:
                raise DataError(f"{path}: row {lineno}: expected 2 fields, got {len(row)}")
            entries.append(((path.parent / row[0].strip()).resolve(), row[1].strip()))
    if not entries:
        raise DataError(f"{path}: manifest lists no files")
    return entries


# --------------------------------------------------------------------------
# loaders


def load_timeseries(path: str | Path, layout: WindowLayout, label: int = 0,
                    stride: int | None = None, skip_timestamp: bool = False,
                    subject: str | None = None) -> list[SampleWindow]:
    """Slide a ``layout.T``-row window over a ``layout.K``-channel recording."""
    path = Path(path)
    stride = layout.T if stride is None else stride
    if stride < 1:
        raise ValueError("stride must be positive")
    rows = _read_numeric_rows(path)
    if skip_timestamp:
        rows = rows[:, 1:]
    if rows.shape[1] != layout.K:
        raise DataError(f"{path}: expected {layout.K} signal columns, found {rows.shape[1]}")
    if len(rows) < layout.T:
        log.warning("%s: %d rows is shorter than one window of %d; skipped", path, len(rows), layout.T)
        return []
    windows = []
    for i, start in enumerate(range(0, len(rows) - layout.T + 1, stride)):
        grid = rows[start:start + layout.T].T  # (K, T)
        windows.append(SampleWindow(l2_normalize_np(grid.reshape(-1)), label,
                                    subject or path.stem, "timeseries", str(path), i))
    return windows


def load_skeleton(path: str | Path, layout: WindowLayout, label: int = 0,
                  subject: str | None = None) -> list[SampleWindow]:
    """Group 63-coordinate frames into non-overlapping ``layout.T``-frame windows.

    Each window is a (63, T) grid: one column per frame. Trailing frames that
    do not fill a window are dropped.
    """
    path = Path(path)
    if layout.K != SKELETON_COLUMNS:
        raise DataError(f"skeleton layout needs K={SKELETON_COLUMNS}, got {layout.K}")
    frames = _read_numeric_rows(path)
    if frames.size and frames.shape[1] != SKELETON_COLUMNS:
        raise DataError(f"{path}: expected {SKELETON_COLUMNS} columns per frame, found {frames.shape[1]}")
    windows = []
    for i in range(len(frames) // layout.T):
        grid = frames[i * layout.T:(i + 1) * layout.T].T
        windows.append(SampleWindow(l2_normalize_np(grid.reshape(-1)), label,
                                    subject or path.stem, "skeleton", str(path), i))
    return windows


def _pgm_tokens(raw: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 2
    while len(tokens) < count:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError("truncated PGM header")
        tokens.append(raw[start:pos])
    return tokens, pos


def read_pgm(raw: bytes) -> tuple[np.ndarray, float]:
    magic = raw[:2]
    if magic == b"P2":
        body = re.sub(rb"#[^\n]*", b"", raw[2:]).split()
        w, h, maxval = (int(t) for t in body[:3])
        values = body[3:3 + w * h]
        if len(values) != w * h:
            raise DataError("truncated P2 image")
        return np.array([float(v) for v in values]).reshape(h, w), float(maxval)
    if magic == b"P5":
        (w, h, maxval), pos = _pgm_tokens(raw, 3)
        w, h, maxval = int(w), int(h), int(maxval)
        dtype = ">u1" if maxval < 256 else ">u2"
        data = raw[pos + 1:]
        need = w * h * np.dtype(dtype).itemsize
        if len(data) < need:
            raise DataError("truncated P5 image")
        return np.frombuffer(data[:need], dtype=dtype).astype(np.float64).reshape(h, w), float(maxval)
    raise DataError(f"unsupported image format magic {magic!r}")


def bilinear_resize(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Half-pixel-centre bilinear resampling with edge clamping."""
    h, w = img.shape
    if (h, w) == (height, width):
        return img.copy()

    def coords(n_out, n_in):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = coords(height, h)
    x0, x1, fx = coords(width, w)
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bottom = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy)[:, None] + bottom * fy[:, None]


def load_image_grid(path: str | Path, label: int = 0, side: int = IMAGE_SIDE,
                    subject: str | None = None) -> SampleWindow:
    """Read a PGM (P2/P5) or numeric CSV grid, resize to ``side`` squared, scale to [0, 1].

    PGM values are divided by the header maxval; CSV grids by their largest
    absolute value.
    """
    path = Path(path)
    raw = path.read_bytes()
    if raw[:1] == b"P" and raw[1:2].isdigit():
        img, maxval = read_pgm(raw)
    else:
        try:
            img = _read_numeric_rows(path, allow_header=False)
        except (DataError, UnicodeDecodeError) as exc:
            raise DataError(f"{path}: unsupported image format ({exc})") from None
        maxval = float(np.abs(img).max()) if img.size else 0.0
    if img.ndim != 2 or img.size == 0:
        raise DataError(f"{path}: empty image")
    scaled = img / maxval if maxval > 0 else img
    resized = bilinear_resize(scaled, side, side)
    return SampleWindow(resized.reshape(-1), label, subject or path.stem, "image", str(path), 0)


def load_manifest_dataset(manifest: str | Path, modality: str, layout: WindowLayout,
                          stride: int | None = None, skip_timestamp: bool = False,
                          data_root: str | Path | None = None) -> tuple[list[SampleWindow], DatasetSpec]:
    """Load every file listed in a manifest; classes are indexed in sorted name order."""
    entries = read_manifest(manifest)
    if data_root is not None:
        base = Path(manifest).resolve().parent
        entries = [(Path(data_root).resolve() / p.relative_to(base), c) for p, c in entries]
    names = sorted({c for _, c in entries})
    label_map = {n: i for i, n in enumerate(names)}
    windows: list[SampleWindow] = []
    for path, cname in sorted(entries):
        if not path.is_file():
            raise DataError(f"data file not found: {path}")
        label = label_map[cname]
        if modality == "timeseries":
            windows.extend(load_timeseries(path, layout, label, stride, skip_timestamp))
        elif modality == "skeleton":
            windows.extend(load_skeleton(path, layout, label))
        elif modality == "image":
            if layout.N != IMAGE_SIDE * IMAGE_SIDE:
                raise DataError(f"image layout must be {IMAGE_SIDE}x{IMAGE_SIDE}")
            windows.append(load_image_grid(path, label))
        else:
            raise DataError(f"unknown modality {modality!r}")
    windows.sort(key=lambda w: (w.source, w.index))
    return windows, DatasetSpec(layout, len(names), label_map, modality)


# --------------------------------------------------------------------------
# splitting


def split(windows: Sequence[SampleWindow], train_fraction: float,
          rng: Rng) -> tuple[list[SampleWindow], list[SampleWindow]]:
    """Stratified, seeded split; each class keeps at least one window per side."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be strictly between 0 and 1")
    by_class: dict[int, list[int]] = {}
    for i, w in enumerate(windows):
        by_class.setdefault(w.label, []).append(i)
    train_idx, test_idx = [], []
    for label in sorted(by_class):
        idx = by_class[label]
        if len(idx) < 2:
            raise DataError(f"class {label} has {len(idx)} window(s); need at least 2 to split")
        order = [idx[j] for j in rng.permutation(len(idx))]
        n_train = min(max(math.floor(train_fraction * len(idx) + 0.5), 1), len(idx) - 1)
        train_idx.extend(order[:n_train])
        test_idx.extend(order[n_train:])
    return [windows[i] for i in sorted(train_idx)], [windows[i] for i in sorted(test_idx)]


# --------------------------------------------------------------------------
# synthetic data


def synth_generate(n_classes: int, windows_per_class: int, layout: WindowLayout,
                   noise_sigma: float, rng: Rng) -> list[SampleWindow]:
    """Class-coded sinusoid banks plus Gaussian noise.

    For class ``c``, channel ``k``, time step ``t`` and window ``w``::

        f   = 0.5 + 0.5 * ((c + k) mod n_classes)        # cycles per window
        phi = pi * c / n_classes + 0.3 * k
        d_w = 0.25 * pi * w / windows_per_class          # phase schedule
        x   = sin(2 pi f t / T + phi + d_w) + noise_sigma * N(0, 1)

    Noise is drawn window by window, class-major, as one (K, T) block each.
    Values are not normalised; the model scales its input itself.
    """
    if n_classes < 2:
        raise ValueError("synthetic data needs at least two classes")
    if windows_per_class < 1:
        raise ValueError("windows_per_class must be positive")
    K, Tn = layout.K, layout.T
    k = np.arange(K)[:, None]
    t = np.arange(Tn)[None, :]
    windows = []
    for c in range(n_classes):
        freq = 0.5 + 0.5 * ((c + k) % n_classes)
        phase = math.pi * c / n_classes + 0.3 * k
        for w in range(windows_per_class):
            shift = 0.25 * math.pi * w / windows_per_class
            grid = np.sin(2.0 * math.pi * freq * t / Tn + phase + shift)
            grid = grid + noise_sigma * rng.normal(1.0, (K, Tn))
            windows.append(SampleWindow(grid.reshape(-1), c, f"synth-{c}", "timeseries",
                                        f"synthetic/c{c}", w))
    return windows


def write_synthetic(out_dir: str | Path, windows: Sequence[SampleWindow], layout: WindowLayout) -> Path:
    """One text file per window (T rows of K values) plus ``manifest.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for w in windows:
        name = f"class{w.label}_w{w.index:05d}.txt"
        grid = w.features.reshape(layout.K, layout.T).T
        with open(out_dir / name, "w") as fh:
            for row in grid:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")
        rows.append((name, f"class{w.label}"))
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "class_name"])
        writer.writerows(rows)
    return manifest


def nearest_centroid_accuracy(train: Sequence[SampleWindow], test: Sequence[SampleWindow]) -> float:
    """Accuracy of classifying ``test`` by the closest class mean of ``train``."""
    labels = sorted({w.label for w in train})
    X = np.stack([w.features for w in train])
    y = np.array([w.label for w in train])
    centroids = np.stack([X[y == c].mean(axis=0) for c in labels])
    Xt = np.stack([w.features for w in test])
    d = ((Xt[:, None, :] - centroids[None]) ** 2).sum(axis=2)
    pred = np.array(labels)[d.argmin(axis=1)]
    return float((pred == np.array([w.label for w in test])).mean())
