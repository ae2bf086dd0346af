"""Ingestion: DICOM-subset parsing, HU windowing, resizing, and batching.

The DICOM support is deliberately narrow: explicit-VR little-endian,
uncompressed 16-bit monochrome pixel data, which is what CT head series
look like once pulled from an archive. Anything else is rejected loudly
rather than guessed at. Images move through the pipeline as float arrays
in [0, 1]; on disk they live in a flat `.sfi` container (magic "SFI1",
u32 height/width/channels, then little-endian float32 pixels) next to a
JSON-lines manifest with one {"id", "path", "labels"} object per line.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

EXPLICIT_VR_LE = "1.2.840.10008.1.2.1"

TAG_TRANSFER_SYNTAX = (0x0002, 0x0010)
TAG_SOP_INSTANCE = (0x0008, 0x0018)
TAG_ROWS = (0x0028, 0x0010)
TAG_COLS = (0x0028, 0x0011)
TAG_BITS_ALLOCATED = (0x0028, 0x0100)
TAG_PIXEL_REPRESENTATION = (0x0028, 0x0103)
TAG_RESCALE_INTERCEPT = (0x0028, 0x1052)
TAG_RESCALE_SLOPE = (0x0028, 0x1053)
TAG_PIXEL_DATA = (0x7FE0, 0x0010)

# VRs whose length field is 4 bytes after a 2-byte reserved gap
_LONG_VRS = {b"OB", b"OW", b"OF", b"SQ", b"UT", b"UN"}


class DicomFormatError(ValueError):
    """The byte stream is not in the supported DICOM subset."""


class DicomCorruptionError(ValueError):
    """The stream claims the subset format but its structure is broken."""


@dataclass
class CtSlice:
    rows: int
    cols: int
    pixel_values: np.ndarray  # flat, length rows*cols, raw stored integers
    rescale_slope: float
    rescale_intercept: float
    source_id: str = ""
    warnings: Tuple[str, ...] = ()

    def __post_init__(self):
        if self.pixel_values.size != self.rows * self.cols:
            raise ValueError(
                f"{self.rows}x{self.cols} slice needs {self.rows * self.cols} "
                f"pixels, got {self.pixel_values.size}")
        if self.rescale_slope == 0:
            raise ValueError("rescale slope must be nonzero")

    @property
    def grid(self) -> np.ndarray:
        return self.pixel_values.reshape(self.rows, self.cols)

    def hounsfield(self) -> np.ndarray:
        return self.rescale_slope * self.pixel_values.astype(np.float64) \
            + self.rescale_intercept


def _iter_elements(data: bytes):
    off = 132
    n = len(data)
    while off < n:
        if off + 8 > n:
            raise DicomCorruptionError(
                f"element header truncated at byte offset {off} (file length {n})")
        group, elem = struct.unpack_from("<HH", data, off)
        vr = data[off + 4:off + 6]
        if not (vr.isalpha() and vr.isupper()):
            raise DicomFormatError(
                f"tag ({group:04X},{elem:04X}) at offset {off} has no explicit VR; "
                f"implicit-VR streams are unsupported")
        if vr in _LONG_VRS:
            (length,) = struct.unpack_from("<I", data, off + 8)
            header = 12
        else:
            (length,) = struct.unpack_from("<H", data, off + 6)
            header = 8
        start = off + header
        if start + length > n:
            raise DicomCorruptionError(
                f"tag ({group:04X},{elem:04X}) value truncated: {length} bytes "
                f"declared at offset {start}, file ends at {n}")
        yield (group, elem), vr, data[start:start + length]
        off = start + length


def _decode_us(value: bytes, tag) -> int:
    if len(value) != 2:
        raise DicomCorruptionError(f"tag {tag} should be a 2-byte unsigned short")
    return struct.unpack("<H", value)[0]


def _decode_ds(value: bytes) -> float:
    return float(value.decode("ascii").strip("\x00 "))


def parse_dicom_lite(data: bytes) -> CtSlice:
    """Parse the supported DICOM subset into a CtSlice.

    Missing rescale slope/intercept default to 1/0 and set a warning flag;
    anything outside the subset (wrong magic, compressed or implicit
    transfer syntax, non-16-bit pixels) raises DicomFormatError, and
    structurally broken streams raise DicomCorruptionError.
    """
    if len(data) < 132:
        raise DicomFormatError(
            f"stream is {len(data)} bytes, shorter than preamble + magic (132)")
    if data[128:132] != b"DICM":
        raise DicomFormatError('missing "DICM" magic at byte offset 128')

    elements: Dict[tuple, bytes] = {}
    for tag, vr, value in _iter_elements(data):
        elements[tag] = value

    if TAG_TRANSFER_SYNTAX in elements:
        syntax = elements[TAG_TRANSFER_SYNTAX].decode("ascii").strip("\x00 ")
        if syntax != EXPLICIT_VR_LE:
            raise DicomFormatError(
                f"transfer syntax {syntax} unsupported (need {EXPLICIT_VR_LE}; "
                f"compressed and implicit-VR streams are out of scope)")

    for tag, name in ((TAG_ROWS, "Rows"), (TAG_COLS, "Columns"),
                      (TAG_BITS_ALLOCATED, "BitsAllocated"),
                      (TAG_PIXEL_DATA, "PixelData")):
        if tag not in elements:
            raise DicomFormatError(
                f"required tag ({tag[0]:04X},{tag[1]:04X}) {name} is missing")

    rows = _decode_us(elements[TAG_ROWS], TAG_ROWS)
    cols = _decode_us(elements[TAG_COLS], TAG_COLS)
    bits = _decode_us(elements[TAG_BITS_ALLOCATED], TAG_BITS_ALLOCATED)
    if bits != 16:
        raise DicomFormatError(f"only 16-bit pixel data is supported, got {bits}")
    signed = 0
    if TAG_PIXEL_REPRESENTATION in elements:
        signed = _decode_us(elements[TAG_PIXEL_REPRESENTATION],
                            TAG_PIXEL_REPRESENTATION)

    raw = elements[TAG_PIXEL_DATA]
    expected = rows * cols * 2
    if len(raw) != expected:
        raise DicomCorruptionError(
            f"PixelData holds {len(raw)} bytes but {rows}x{cols} 16-bit pixels "
            f"need {expected}")
    pixels = np.frombuffer(raw, dtype="<i2" if signed else "<u2").copy()

    warnings: List[str] = []
    slope, intercept = 1.0, 0.0
    if TAG_RESCALE_SLOPE in elements and TAG_RESCALE_INTERCEPT in elements:
        slope = _decode_ds(elements[TAG_RESCALE_SLOPE])
        intercept = _decode_ds(elements[TAG_RESCALE_INTERCEPT])
    else:
        warnings.append("missing rescale tags, defaulting slope=1 intercept=0")

    source_id = ""
    if TAG_SOP_INSTANCE in elements:
        source_id = elements[TAG_SOP_INSTANCE].decode("ascii").strip("\x00 ")

    return CtSlice(rows=rows, cols=cols, pixel_values=pixels,
                   rescale_slope=slope, rescale_intercept=intercept,
                   source_id=source_id, warnings=tuple(warnings))


def _element(tag: tuple, vr: bytes, value: bytes) -> bytes:
    if len(value) % 2:
        value += b" " if vr == b"DS" else b"\x00"
    head = struct.pack("<HH", *tag) + vr
    if vr in _LONG_VRS:
        return head + b"\x00\x00" + struct.pack("<I", len(value)) + value
    return head + struct.pack("<H", len(value)) + value


def write_dicom_lite(pixels: np.ndarray, slope: float = 1.0,
                     intercept: float = 0.0, source_id: str = "",
                     include_rescale: bool = True,
                     transfer_syntax: str = EXPLICIT_VR_LE) -> bytes:
    """Serialize a 2-D integer array as a subset DICOM stream.

    This is the fixture writer the parser tests round-trip against; the
    transfer_syntax override exists to fabricate unsupported files.
    """
    arr = np.asarray(pixels)
    if arr.ndim != 2:
        raise ValueError(f"pixels must be 2-D, got shape {arr.shape}")
    signed = bool(np.issubdtype(arr.dtype, np.signedinteger) or (arr < 0).any())
    payload = arr.astype("<i2" if signed else "<u2").tobytes()

    out = [b"\x00" * 128, b"DICM"]
    out.append(_element(TAG_TRANSFER_SYNTAX, b"UI", transfer_syntax.encode("ascii")))
    if source_id:
        out.append(_element(TAG_SOP_INSTANCE, b"UI", source_id.encode("ascii")))
    out.append(_element(TAG_ROWS, b"US", struct.pack("<H", arr.shape[0])))
    out.append(_element(TAG_COLS, b"US", struct.pack("<H", arr.shape[1])))
    out.append(_element(TAG_BITS_ALLOCATED, b"US", struct.pack("<H", 16)))
    out.append(_element(TAG_PIXEL_REPRESENTATION, b"US",
                        struct.pack("<H", 1 if signed else 0)))
    if include_rescale:
        out.append(_element(TAG_RESCALE_INTERCEPT, b"DS", repr(intercept).encode()))
        out.append(_element(TAG_RESCALE_SLOPE, b"DS", repr(slope).encode()))
    out.append(_element(TAG_PIXEL_DATA, b"OW", payload))
    return b"".join(out)


@dataclass(frozen=True)
class WindowSpec:
    center: float
    width: float

    def __post_init__(self):
        if self.width <= 0:
            raise ValueError(f"window width must be positive, got {self.width}")


DEFAULT_WINDOWS = (WindowSpec(40, 80),     # brain
                   WindowSpec(80, 200),    # subdural
                   WindowSpec(40, 380))    # soft tissue


def hu_window_stack(ct: CtSlice,
                    windows: Sequence[WindowSpec] = DEFAULT_WINDOWS) -> np.ndarray:
    """Map a slice to rows x cols x len(windows), one clamped window per channel."""
    hu = ct.hounsfield().reshape(ct.rows, ct.cols)
    chans = [np.clip((hu - (w.center - w.width / 2.0)) / w.width, 0.0, 1.0)
             for w in windows]
    return np.stack(chans, axis=-1)


def resize_bilinear(img: np.ndarray, out_hw: Tuple[int, int]) -> np.ndarray:
    """Bilinear resample with half-pixel centers, channels-last."""
    if img.ndim == 2:
        return resize_bilinear(img[:, :, None], out_hw)[:, :, 0]
    H, W, _ = img.shape
    Ho, Wo = out_hw
    if Ho < 1 or Wo < 1:
        raise ValueError(f"output extents must be >= 1, got {out_hw}")

    def axis_coords(n_in: int, n_out: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis_coords(H, Ho)
    x0, x1, fx = axis_coords(W, Wo)
    top = img[y0][:, x0] * (1 - fx)[None, :, None] + img[y0][:, x1] * fx[None, :, None]
    bot = img[y1][:, x0] * (1 - fx)[None, :, None] + img[y1][:, x1] * fx[None, :, None]
    return top * (1 - fy)[:, None, None] + bot * fy[:, None, None]


# -- .sfi image container ------------------------------------------------------

SFI_MAGIC = b"SFI1"


def write_sfi(path: Union[str, Path], img: np.ndarray) -> None:
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim != 3:
        raise ValueError(f"sfi images are H x W x C, got shape {arr.shape}")
    H, W, C = arr.shape
    with open(path, "wb") as fh:
        fh.write(SFI_MAGIC)
        fh.write(struct.pack("<III", H, W, C))
        fh.write(arr.astype("<f4").tobytes())


def read_sfi(path: Union[str, Path]) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != SFI_MAGIC:
        raise ValueError(f"{path}: not an SFI file (magic {blob[:4]!r})")
    if len(blob) < 16:
        raise ValueError(f"{path}: header truncated at {len(blob)} bytes")
    H, W, C = struct.unpack_from("<III", blob, 4)
    need = 16 + H * W * C * 4
    if len(blob) != need:
        raise ValueError(f"{path}: expected {need} bytes for {H}x{W}x{C}, got {len(blob)}")
    flat = np.frombuffer(blob, dtype="<f4", offset=16)
    return flat.reshape(H, W, C).astype(np.float64)


# -- manifest ------------------------------------------------------------------

@dataclass
class Sample:
    image: np.ndarray
    labels: np.ndarray
    id: str

    def __post_init__(self):
        if self.image.min() < 0.0 or self.image.max() > 1.0:
            raise ValueError(f"sample {self.id}: image values outside [0, 1]")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError(f"sample {self.id}: labels must be 0/1")


def write_manifest(path: Union[str, Path], records: Sequence[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps({"id": rec["id"], "path": rec["path"],
                                 "labels": [int(v) for v in rec["labels"]]}))
            fh.write("\n")


def read_manifest(path: Union[str, Path]) -> List[dict]:
    records = []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            for key in ("id", "path", "labels"):
                if key not in rec:
                    raise ValueError(f"{path}:{ln}: manifest record missing {key!r}")
            labels = rec["labels"]
            if len(labels) != 6 or any(v not in (0, 1) for v in labels):
                raise ValueError(f"{path}:{ln}: labels must be six 0/1 values, got {labels}")
            records.append(rec)
    return records


# -- synthetic corpus ----------------------------------------------------------

# Per-subtype ellipse signature: center (fractions of the image), base radius
# fraction, affected channel. Chosen to keep the five subtypes spatially and
# chromatically separable at small sizes.
_SIGNATURES = {
    1: ((0.30, 0.30), 0.16, 0),
    2: ((0.70, 0.30), 0.16, 1),
    3: ((0.30, 0.70), 0.16, 2),
    4: ((0.70, 0.70), 0.16, 0),
    5: ((0.50, 0.50), 0.13, 1),
}
SUBTYPE_P = 0.3


def synth_sample(size: int, seed: int, index: int) -> Sample:
    """One deterministic sample; index seeds independently of corpus size."""
    rng = np.random.default_rng([seed, index])
    labels = np.zeros(6, dtype=np.int64)
    labels[1:] = rng.random(5) < SUBTYPE_P
    labels[0] = 1 if labels[1:].any() else 0

    img = rng.uniform(0.0, 0.30, (size, size, 3))
    yy, xx = np.mgrid[0:size, 0:size]
    for l in range(1, 6):
        (cy, cx), rad, chan = _SIGNATURES[l]
        jitter = rng.uniform(-0.03, 0.03, 2)
        ry = size * (rad + rng.uniform(-0.02, 0.02))
        rx = size * (rad + rng.uniform(-0.02, 0.02))
        gain = rng.uniform(0.55, 0.90)
        if labels[l]:
            mask = (((yy - (cy + jitter[0]) * size) / ry) ** 2
                    + ((xx - (cx + jitter[1]) * size) / rx) ** 2) <= 1.0
            img[..., chan] += gain * mask
    img = np.clip(img, 0.0, 1.0)
    return Sample(image=img, labels=labels, id=f"synth-{seed}-{index:05d}")


def synth_generate(count: int, size: int, seed: int,
                   out_dir: Union[str, Path]) -> Path:
    """Write a labeled corpus of .sfi files plus its manifest; returns the
    manifest path. Fully determined by (count, size, seed)."""
    if size < 16:
        raise ValueError(f"size must be >= 16, got {size}")
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(count):
        sample = synth_sample(size, seed, i)
        fname = f"{sample.id}.sfi"
        write_sfi(out / fname, sample.image.astype(np.float32))
        records.append({"id": sample.id, "path": fname,
                        "labels": sample.labels.tolist()})
    manifest = out / "manifest.jsonl"
    write_manifest(manifest, records)
    return manifest


# -- batching ------------------------------------------------------------------

@dataclass
class Batch:
    images: np.ndarray   # B x H x W x C, float64 in [0, 1]
    labels: np.ndarray   # B x 6, float64 in {0, 1}
    ids: List[str]


def epoch_order(n: int, shuffle_seed: int, epoch: int) -> np.ndarray:
    """The deterministic sample permutation for one epoch."""
    return np.random.default_rng([shuffle_seed, epoch]).permutation(n)


def load_batch(records: Sequence[dict], indices: Sequence[int],
               root: Optional[Union[str, Path]] = None) -> Batch:
    """Materialize the given manifest rows, resolving paths against root."""
    base = Path(root) if root is not None else Path(".")
    images, labels, ids = [], [], []
    for i in indices:
        rec = records[int(i)]
        path = Path(rec["path"])
        if not path.is_absolute():
            path = base / path
        if not path.exists():
            raise FileNotFoundError(f"sample {rec['id']}: file {path} is missing")
        images.append(read_sfi(path))
        labels.append(rec["labels"])
        ids.append(rec["id"])
    return Batch(images=np.stack(images),
                 labels=np.asarray(labels, dtype=np.float64),
                 ids=ids)


def batch_iter(manifest: Union[str, Path, Sequence[dict]], batch_size: int,
               shuffle_seed: int = 0, epoch: int = 0,
               root: Optional[Union[str, Path]] = None) -> Iterator[Batch]:
    """Yield shuffled batches for one epoch; the short tail batch is kept.

    Relative sample paths resolve against `root`, defaulting to the
    manifest's own directory.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if isinstance(manifest, (str, Path)):
        records = read_manifest(manifest)
        base = Path(root) if root is not None else Path(manifest).parent
    else:
        records = list(manifest)
        base = Path(root) if root is not None else Path(".")

    order = epoch_order(len(records), shuffle_seed, epoch)
    for lo in range(0, len(records), batch_size):
        yield load_batch(records, order[lo:lo + batch_size], base)
