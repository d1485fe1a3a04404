"""On-disk containers for frozen-encoder features and grounding labels.

Two surfaces live here: the binary R2FT tensor container (bit-exact round
trips, CRC-protected) and the JSONL manifest carrying per-sample label
records. A synthetic generator plants query-aligned moments into pure-noise
features so learning can be verified without any real encoder.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import CounterRng

MAGIC = b"R2FT"
VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODE_FOR_DTYPE = {np.dtype("float64"): 0, np.dtype("float32"): 1}


class FormatError(ValueError):
    """A container or manifest violates the documented format."""


class SynthSpecError(ValueError):
    """A synthetic-data request cannot be satisfied."""


# ---------------------------------------------------------------------------
# R2FT binary container
#
# magic "R2FT" | u16 version | u8 dtype code (0=f64, 1=f32) | u8 tensor count
# then per tensor: u8 rank | rank x u64 extents | row-major LE payload
# finally: u32 CRC32 of every preceding byte.
# ---------------------------------------------------------------------------


def write_container(path, arrays, dtype=np.float64) -> None:
    """Serialize a sequence of arrays into one R2FT container."""
    dtype = np.dtype(dtype)
    if dtype not in _CODE_FOR_DTYPE:
        raise FormatError(f"unsupported dtype {dtype}; use float64 or float32")
    arrays = [np.asarray(a) for a in arrays]  # note: tobytes() emits C order
    if len(arrays) > 255:
        raise FormatError(f"too many tensors for one container: {len(arrays)}")
    le = dtype.newbyteorder("<")
    parts = [MAGIC, struct.pack("<H", VERSION)]
    parts.append(struct.pack("<BB", _CODE_FOR_DTYPE[dtype], len(arrays)))
    for a in arrays:
        if a.ndim > 255:
            raise FormatError(f"rank too large: {a.ndim}")
        parts.append(struct.pack("<B", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(a.astype(le, copy=False).tobytes())
    body = b"".join(parts)
    crc = zlib.crc32(body) & 0xFFFFFFFF
    Path(path).write_bytes(body + struct.pack("<I", crc))


def read_container(path):
    """Load an R2FT container, returning (list of arrays, dtype)."""
    raw = Path(path).read_bytes()
    return parse_container(raw)


def parse_container(raw: bytes):
    if len(raw) < 12:
        raise FormatError("container truncated: shorter than fixed header")
    if raw[:4] != MAGIC:
        raise FormatError(f"bad magic: expected {MAGIC!r}, got {raw[:4]!r}")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version: {version} (expected {VERSION})")
    code, count = struct.unpack_from("<BB", raw, 6)
    if code not in _DTYPE_CODES:
        raise FormatError(f"unknown dtype code: {code}")
    dtype = _DTYPE_CODES[code]
    stored_crc = struct.unpack_from("<I", raw, len(raw) - 4)[0]
    actual_crc = zlib.crc32(raw[:-4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise FormatError(
            f"crc mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}"
        )
    offset = 8
    end = len(raw) - 4
    arrays = []
    for i in range(count):
        if offset + 1 > end:
            raise FormatError(f"tensor {i}: rank field truncated")
        (rank,) = struct.unpack_from("<B", raw, offset)
        offset += 1
        if offset + 8 * rank > end:
            raise FormatError(f"tensor {i}: extents truncated")
        shape = struct.unpack_from(f"<{rank}Q", raw, offset)
        offset += 8 * rank
        n = int(np.prod(shape)) if rank else 1
        nbytes = n * dtype.itemsize
        if offset + nbytes > end:
            raise FormatError(
                f"tensor {i}: payload size disagreement "
                f"(need {nbytes} bytes for shape {tuple(shape)})"
            )
        arr = np.frombuffer(raw, dtype=dtype, count=n, offset=offset)
        arrays.append(arr.reshape(shape).astype(dtype.newbyteorder("=")))
        offset += nbytes
    if offset != end:
        raise FormatError(f"trailing bytes after last tensor: {end - offset}")
    return arrays, np.dtype(dtype.newbyteorder("="))


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass
class LayerFeatureSet:
    """Multi-layer frozen-encoder features for one video-query pair.

    ``visual`` is [N_layers, T, P+1, D_v] with the global summary token at
    patch index 0; ``query`` is [N_layers, L, D_q]. ``layer_indices`` records
    which encoder layer each slab came from, last layer first (strictly
    decreasing).
    """

    visual: np.ndarray
    query: np.ndarray
    query_mask: np.ndarray
    frame_rate: float = 1.0
    layer_indices: np.ndarray | None = None

    def __post_init__(self):
        self.visual = np.asarray(self.visual)
        self.query = np.asarray(self.query)
        self.query_mask = np.asarray(self.query_mask, dtype=bool)
        if self.visual.ndim != 4:
            raise ValueError(f"visual must be rank 4, got shape {self.visual.shape}")
        if self.query.ndim != 3:
            raise ValueError(f"query must be rank 3, got shape {self.query.shape}")
        if self.visual.shape[0] != self.query.shape[0]:
            raise ValueError(
                "visual and query disagree on layer count: "
                f"{self.visual.shape[0]} vs {self.query.shape[0]}"
            )
        if self.query_mask.shape != (self.query.shape[1],):
            raise ValueError(
                f"query_mask shape {self.query_mask.shape} does not cover "
                f"L={self.query.shape[1]}"
            )
        if not self.query_mask.any():
            raise ValueError("query_mask must have at least one true entry")
        if self.layer_indices is None:
            self.layer_indices = np.arange(self.n_layers, 0, -1)
        self.layer_indices = np.asarray(self.layer_indices, dtype=int)
        if self.layer_indices.shape != (self.n_layers,):
            raise ValueError("layer_indices must have one entry per layer")
        if self.n_layers > 1 and not np.all(np.diff(self.layer_indices) < 0):
            raise ValueError(
                "layer_indices must be strictly decreasing (last encoder layer first)"
            )

    @property
    def n_layers(self) -> int:
        return self.visual.shape[0]

    @property
    def num_frames(self) -> int:
        return self.visual.shape[1]

    @property
    def num_tokens(self) -> int:
        return self.query.shape[1]


@dataclass
class GroundingLabels:
    """Per-frame targets: moment intervals plus optional saliency/summary."""

    moments: list = field(default_factory=list)
    saliency: np.ndarray | None = None
    summary: np.ndarray | None = None
    annotators: list | None = None  # per-annotator shot ratings (summarization)

    def validate(self, num_frames: int) -> None:
        for start, end in self.moments:
            if not (0 <= start <= end < num_frames):
                raise ValueError(
                    f"moment ({start}, {end}) outside [0, {num_frames}) or inverted"
                )
        for name in ("saliency", "summary"):
            arr = getattr(self, name)
            if arr is not None and len(arr) != num_frames:
                raise ValueError(f"{name} length {len(arr)} != T={num_frames}")

    def effective_saliency(self, num_frames: int) -> np.ndarray:
        """Label saliency, or moment membership when no curve was annotated."""
        if self.saliency is not None:
            return np.asarray(self.saliency, dtype=float)
        s = np.zeros(num_frames)
        for start, end in self.moments:
            s[int(math.ceil(start)) : int(math.floor(end)) + 1] = 1.0
        return s

    def frame_displacements(self, frame: float):
        """(frame - start, end - frame) for the moment containing ``frame``,
        or None when the frame is outside every moment."""
        for start, end in self.moments:
            if start <= frame <= end:
                return frame - start, end - frame
        return None


@dataclass
class SampleRecord:
    sample_id: str
    features_path: str
    labels: GroundingLabels
    num_frames: int
    num_tokens: int
    frame_rate: float = 1.0


@dataclass
class Manifest:
    dataset: str
    samples: list
    unit: str = "frames"
    extractor_note: str = ""
    saliency_positive_threshold: float = 0.8

    def sample_ids(self):
        return [s.sample_id for s in self.samples]


def _labels_to_json(labels: GroundingLabels) -> dict:
    rec = {"moments": [[float(a), float(b)] for a, b in labels.moments]}
    if labels.saliency is not None:
        rec["saliency"] = [float(v) for v in labels.saliency]
    if labels.summary is not None:
        rec["summary"] = [int(v) for v in labels.summary]
    if labels.annotators is not None:
        rec["annotators"] = [[float(v) for v in a] for a in labels.annotators]
    return rec


def _labels_from_json(rec: dict) -> GroundingLabels:
    return GroundingLabels(
        moments=[tuple(m) for m in rec.get("moments", [])],
        saliency=np.asarray(rec["saliency"]) if "saliency" in rec else None,
        summary=np.asarray(rec["summary"], dtype=int) if "summary" in rec else None,
        annotators=[np.asarray(a) for a in rec["annotators"]]
        if "annotators" in rec
        else None,
    )


def write_manifest(manifest: Manifest, path) -> None:
    """One JSON header line, then one JSON record per sample."""
    ids = manifest.sample_ids()
    if len(set(ids)) != len(ids):
        raise FormatError("manifest sample ids must be unique")
    with open(path, "w") as fh:
        header = {
            "dataset": manifest.dataset,
            "unit": manifest.unit,
            "extractor_note": manifest.extractor_note,
            "saliency_positive_threshold": manifest.saliency_positive_threshold,
        }
        fh.write(json.dumps(header) + "\n")
        for s in manifest.samples:
            rec = {
                "sample_id": s.sample_id,
                "features_path": s.features_path,
                "num_frames": s.num_frames,
                "num_tokens": s.num_tokens,
                "frame_rate": s.frame_rate,
                "labels": _labels_to_json(s.labels),
            }
            fh.write(json.dumps(rec) + "\n")


def load_manifest(path, features_dir=None, check_files: bool = True) -> Manifest:
    """Read a manifest; feature paths resolve against ``features_dir``
    (default: the manifest's own directory)."""
    path = Path(path)
    base = Path(features_dir) if features_dir is not None else path.parent
    lines = path.read_text().splitlines()
    if not lines:
        raise FormatError("manifest is empty: missing header line")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest header is not valid JSON: {exc}") from exc
    samples = []
    seen = set()
    for i, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"manifest line {i} is not valid JSON: {exc}") from exc
        sid = rec["sample_id"]
        if sid in seen:
            raise FormatError(f"duplicate sample id: {sid}")
        seen.add(sid)
        fpath = str(base / rec["features_path"])
        if check_files and not Path(fpath).exists():
            raise FormatError(f"referenced feature file missing: {fpath}")
        labels = _labels_from_json(rec["labels"])
        labels.validate(rec["num_frames"])
        samples.append(
            SampleRecord(
                sample_id=sid,
                features_path=fpath,
                labels=labels,
                num_frames=rec["num_frames"],
                num_tokens=rec["num_tokens"],
                frame_rate=rec.get("frame_rate", 1.0),
            )
        )
    return Manifest(
        dataset=header.get("dataset", ""),
        samples=samples,
        unit=header.get("unit", "frames"),
        extractor_note=header.get("extractor_note", ""),
        saliency_positive_threshold=header.get("saliency_positive_threshold", 0.8),
    )


def write_features(fs: LayerFeatureSet, path, dtype=np.float64) -> None:
    """Fixed tensor order: visual, query, query_mask, frame_rate, layer_indices."""
    write_container(
        path,
        [
            fs.visual,
            fs.query,
            fs.query_mask.astype(float),
            np.array([fs.frame_rate]),
            fs.layer_indices.astype(float),
        ],
        dtype=dtype,
    )


def load_features(path) -> LayerFeatureSet:
    arrays, _ = read_container(path)
    if len(arrays) != 5:
        raise FormatError(
            f"feature container must hold 5 tensors "
            f"(visual, query, query_mask, frame_rate, layer_indices), got {len(arrays)}"
        )
    visual, query, mask, rate, layers = arrays
    return LayerFeatureSet(
        visual=visual,
        query=query,
        query_mask=mask > 0.5,
        frame_rate=float(rate[0]),
        layer_indices=np.round(layers).astype(int),
    )


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------


@dataclass
class SynthSpec:
    """Dimensions and planting parameters for one synthetic sample.

    ``granularity`` controls which feature slab carries the planted concept:
    "coarse" injects into the latest encoder layer (slab 0), "fine" into the
    earliest of the first ``refine_depth`` slabs. ``snr`` is signal amplitude
    over noise amplitude; ``inf`` means noise-free.
    """

    n_layers: int = 4
    num_frames: int = 16
    num_tokens: int = 8
    num_patches: int = 4
    d_v: int = 32
    d_q: int = 24
    num_moments: int = 1
    snr: float = 2.0
    granularity: str = "fine"
    refine_depth: int | None = None
    min_moment_len: int = 3
    max_moment_len: int = 8
    frame_rate: float = 1.0
    strong_tokens: int = 2
    patch_fraction: float = 0.5

    def __post_init__(self):
        if self.granularity not in ("coarse", "fine"):
            raise SynthSpecError(f"unknown granularity: {self.granularity!r}")
        if self.refine_depth is None:
            self.refine_depth = self.n_layers
        if not 1 <= self.refine_depth <= self.n_layers:
            raise SynthSpecError(
                f"refine_depth {self.refine_depth} outside [1, {self.n_layers}]"
            )
        if self.min_moment_len < 2:
            raise SynthSpecError("moments must span at least 2 frames")
        need = self.num_moments * self.min_moment_len + (self.num_moments - 1)
        if need > self.num_frames:
            raise SynthSpecError(
                f"{self.num_moments} moments of length >= {self.min_moment_len} "
                f"cannot fit in T={self.num_frames} frames"
            )


def _draw_concept(spec: SynthSpec, rng: CounterRng):
    d0 = min(spec.d_v, spec.d_q)
    c = rng.normal((d0,))
    c /= np.linalg.norm(c)
    pv = np.linalg.qr(rng.normal((spec.d_v, d0)))[0].T  # [d0, D_v]
    pq = np.linalg.qr(rng.normal((spec.d_q, d0)))[0].T  # [d0, D_q]
    return c, pv, pq


def concept_projections(spec: SynthSpec, seed: int):
    """Replay the generator's concept vector and modality projections.

    Returns (c, P_v, P_q) where rows of P_v/P_q are orthonormal, so latent
    coordinates of a visual vector v are ``P_v @ v``. Tests use these to
    probe the planted signal without touching the model.
    """
    return _draw_concept(spec, CounterRng(seed))


def _place_moments(spec: SynthSpec, rng: CounterRng):
    # Draw lengths against the remaining budget so every request that passed
    # the SynthSpec feasibility check places successfully.
    m = spec.num_moments
    budget = spec.num_frames - (m - 1)  # one separating frame between moments
    lengths = []
    for i in range(m):
        available = budget - sum(lengths) - (m - 1 - i) * spec.min_moment_len
        hi = min(spec.max_moment_len, available)
        if hi < spec.min_moment_len:
            raise SynthSpecError(
                f"{m} moments of length >= {spec.min_moment_len} cannot fit "
                f"in T={spec.num_frames} frames"
            )
        lengths.append(int(rng.integers(spec.min_moment_len, hi + 1)))
    slack = budget - sum(lengths)
    gaps = np.zeros(m + 1, dtype=int)
    for _ in range(slack):
        gaps[int(rng.integers(0, m + 1))] += 1
    moments = []
    cursor = 0
    for i, length in enumerate(lengths):
        cursor += gaps[i] + (1 if i > 0 else 0)
        moments.append((float(cursor), float(cursor + length - 1)))
        cursor += length
    return moments


def generate_synthetic(spec: SynthSpec, seed: int):
    """Build one (LayerFeatureSet, GroundingLabels) pair, deterministic in
    (spec, seed).

    Frames inside planted moments receive the concept vector on a random
    subset of patches of the injected slab; the summary token is the patch
    mean, so it inherits the signal. Saliency labels are the per-frame
    injected energy normalized to [0, 1].
    """
    rng = CounterRng(seed)
    c, pv, pq = _draw_concept(spec, rng)  # replayable via concept_projections
    c_v = c @ pv
    c_q = c @ pq

    noise = 0.0 if math.isinf(spec.snr) else 1.0 / spec.snr
    n, t, p = spec.n_layers, spec.num_frames, spec.num_patches
    inject_slab = 0 if spec.granularity == "coarse" else spec.refine_depth - 1

    moments = _place_moments(spec, rng)
    inside = np.zeros(t, dtype=bool)
    for a, b in moments:
        inside[int(a) : int(b) + 1] = True

    patches = rng.normal((n, t, p, spec.d_v), scale=noise / math.sqrt(spec.d_v))
    energy = np.zeros(t)
    for ti in np.nonzero(inside)[0]:
        k = max(1, int(round(spec.patch_fraction * p)))
        chosen = rng.choice(p, size=k, replace=False)
        patches[inject_slab, ti, chosen] += c_v
        energy[ti] = k  # unit-amplitude injections: energy ~ count
    cls = patches.mean(axis=2, keepdims=True)
    visual = np.concatenate([cls, patches], axis=2)  # summary token at index 0

    ell = int(rng.integers(max(2, spec.num_tokens // 2), spec.num_tokens + 1))
    mask = np.zeros(spec.num_tokens, dtype=bool)
    mask[:ell] = True
    query = rng.normal((n, spec.num_tokens, spec.d_q), scale=noise / math.sqrt(spec.d_q))
    query[inject_slab, :ell] += 0.2 * c_q
    strong = rng.choice(ell, size=min(spec.strong_tokens, ell), replace=False)
    query[inject_slab, strong] += c_q

    saliency = energy / energy.max() if energy.max() > 0 else energy
    labels = GroundingLabels(
        moments=moments,
        saliency=saliency,
        summary=(saliency >= 0.8).astype(int),
    )
    fs = LayerFeatureSet(
        visual=visual,
        query=query,
        query_mask=mask,
        frame_rate=spec.frame_rate,
        layer_indices=np.arange(n, 0, -1),
    )
    return fs, labels


def generate_dataset(spec: SynthSpec, seed: int, count: int):
    """A list of (fs, labels) pairs; sample i is seeded by seed*1_000_003+i."""
    return [generate_synthetic(spec, seed * 1_000_003 + i) for i in range(count)]


def write_dataset(spec: SynthSpec, seed: int, count: int, out_dir, name: str,
                  dataset: str = "synthetic", dtype=np.float64) -> Path:
    """Materialize a synthetic split on disk; returns the manifest path."""
    out_dir = Path(out_dir)
    feat_dir = out_dir / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    samples = []
    for i, (fs, labels) in enumerate(generate_dataset(spec, seed, count)):
        sid = f"{name}-{i:04d}"
        rel = f"features/{sid}.r2ft"
        write_features(fs, out_dir / rel, dtype=dtype)
        samples.append(
            SampleRecord(
                sample_id=sid,
                features_path=rel,
                labels=labels,
                num_frames=fs.num_frames,
                num_tokens=fs.num_tokens,
                frame_rate=fs.frame_rate,
            )
        )
    manifest = Manifest(dataset=dataset, samples=samples)
    mpath = out_dir / f"{name}.jsonl"
    write_manifest(manifest, mpath)
    return mpath
