"""Low-rank adapters: init, merge-back, averaging, and bundle files.

An adapter for a weight of shape (d1, d2) is a pair B (d1, r), A (r, d2)
with delta = scale * B @ A. Bundles collect the adapters for every
attachment point of one language (or one merged model) and serialize to a
checksummed little-endian binary file.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

KIND_BACKBONE = 0
KIND_EXPERT = 1
KIND_STUDENT = 2
KIND_COMBINER = 3

_MAGIC = b"MOLE"
_VERSION = 1


class BundleError(Exception):
    """Base class for bundle file problems."""


class BadMagicError(BundleError):
    pass


class VersionError(BundleError):
    pass


class TruncatedError(BundleError):
    pass


class ChecksumError(BundleError):
    pass


@dataclass
class LoRAAdapter:
    """One low-rank update: delta = scale * B @ A."""

    target: str
    A: np.ndarray  # (rank, d2)
    B: np.ndarray  # (d1, rank)
    scale: float = 1.0

    def __post_init__(self) -> None:
        self.A = np.asarray(self.A, dtype=np.float64)
        self.B = np.asarray(self.B, dtype=np.float64)
        if self.A.ndim != 2 or self.B.ndim != 2 or self.A.shape[0] != self.B.shape[1]:
            raise ValueError(
                f"adapter '{self.target}': A {self.A.shape} and B {self.B.shape} "
                "must be rank-compatible matrices")

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def out_shape(self) -> tuple[int, int]:
        return (self.B.shape[0], self.A.shape[1])

    def delta(self) -> np.ndarray:
        return self.scale * (self.B @ self.A)

    def copy(self) -> "LoRAAdapter":
        return LoRAAdapter(self.target, self.A.copy(), self.B.copy(), self.scale)


def init_adapter(target: str, d1: int, d2: int, rank: int,
                 rng: np.random.Generator, scale: float = 1.0) -> LoRAAdapter:
    """Fresh adapter: B zero so the initial delta is exactly zero,
    A Gaussian with std 1/sqrt(rank)."""
    if not (1 <= rank <= min(d1, d2)):
        raise ValueError(f"rank {rank} out of bounds for a {d1}x{d2} target")
    a = rng.normal(0.0, 1.0 / np.sqrt(rank), size=(rank, d2))
    b = np.zeros((d1, rank))
    return LoRAAdapter(target, a, b, scale)


@dataclass
class ExpertBundle:
    """Adapters for one language (or merged model) plus run metadata.

    kind 0 files carry full matrices instead of adapter pairs (rank 0
    entries); those land in `matrices`. Metadata values must be
    JSON-representable.
    """

    language_id: str
    rank: int
    adapters: dict[str, LoRAAdapter] = field(default_factory=dict)
    matrices: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    kind: int = KIND_EXPERT

    def copy(self) -> "ExpertBundle":
        return ExpertBundle(
            language_id=self.language_id,
            rank=self.rank,
            adapters={k: v.copy() for k, v in self.adapters.items()},
            matrices={k: v.copy() for k, v in self.matrices.items()},
            metadata=json.loads(json.dumps(self.metadata)),
            kind=self.kind,
        )


def attachment_targets(config) -> list[str]:
    """Weight names that receive adapters: the query, key, and value
    projections and both feed-forward matrices of every encoder and
    decoder layer. Attention output projections stay frozen bare."""
    names: list[str] = []
    for i in range(config.n_enc_layers):
        for part in ("attn.q", "attn.k", "attn.v", "ff.w1", "ff.w2"):
            names.append(f"enc.{i}.{part}")
    for i in range(config.n_dec_layers):
        for part in ("self.q", "self.k", "self.v",
                     "cross.q", "cross.k", "cross.v", "ff.w1", "ff.w2"):
            names.append(f"dec.{i}.{part}")
    return names


def init_bundle(config, language_id: str, rank: int,
                rng: np.random.Generator, kind: int = KIND_EXPERT) -> ExpertBundle:
    """Zero-delta bundle covering the full attachment set."""
    shapes = target_shapes(config)
    adapters = {}
    for name in attachment_targets(config):
        d1, d2 = shapes[name]
        adapters[name] = init_adapter(name, d1, d2, rank, rng)
    return ExpertBundle(language_id=language_id, rank=rank,
                        adapters=adapters, kind=kind)


def target_shapes(config) -> dict[str, tuple[int, int]]:
    d = config.d_model
    h = config.d_ff
    shapes: dict[str, tuple[int, int]] = {}
    for i in range(config.n_enc_layers):
        for part in ("attn.q", "attn.k", "attn.v", "attn.o"):
            shapes[f"enc.{i}.{part}"] = (d, d)
        shapes[f"enc.{i}.ff.w1"] = (d, h)
        shapes[f"enc.{i}.ff.w2"] = (h, d)
    for i in range(config.n_dec_layers):
        for part in ("self.q", "self.k", "self.v", "self.o",
                     "cross.q", "cross.k", "cross.v", "cross.o"):
            shapes[f"dec.{i}.{part}"] = (d, d)
        shapes[f"dec.{i}.ff.w1"] = (d, h)
        shapes[f"dec.{i}.ff.w2"] = (h, d)
    return shapes


def validate_bundle(bundle: ExpertBundle, config) -> None:
    """Check the bundle covers the attachment set exactly, at one rank."""
    expected = set(attachment_targets(config))
    got = set(bundle.adapters)
    if got != expected:
        missing = sorted(expected - got)
        extra = sorted(got - expected)
        raise ValueError(f"bundle coverage mismatch: missing={missing} extra={extra}")
    shapes = target_shapes(config)
    for name, ad in bundle.adapters.items():
        if ad.rank != bundle.rank:
            raise ValueError(
                f"adapter '{name}' rank {ad.rank} != bundle rank {bundle.rank}")
        if ad.out_shape != shapes[name]:
            raise ValueError(
                f"adapter '{name}' shape {ad.out_shape} != target {shapes[name]}")


def merge_back(weights: dict[str, np.ndarray], bundle: ExpertBundle) -> dict[str, np.ndarray]:
    """New weight dict with each adapted matrix replaced by W + delta."""
    merged = {k: v.copy() for k, v in weights.items()}
    for name, ad in bundle.adapters.items():
        w = merged.get(name)
        if w is None:
            raise ValueError(f"merge_back: unknown target '{name}'")
        if w.shape != ad.out_shape:
            raise ValueError(
                f"merge_back: target '{name}' is {w.shape}, adapter {ad.out_shape}")
        merged[name] = w + ad.delta()
    return merged


def average_bundles(bundles: list[ExpertBundle],
                    language_id: str = "avg") -> ExpertBundle:
    """Per-target elementwise mean of the A matrices and the B matrices."""
    if not bundles:
        raise ValueError("average_bundles: empty list")
    first = bundles[0]
    targets = set(first.adapters)
    for b in bundles[1:]:
        if b.rank != first.rank:
            raise ValueError(
                f"average_bundles: mixed ranks {first.rank} and {b.rank}")
        if set(b.adapters) != targets:
            raise ValueError("average_bundles: attachment sets differ")
    n = float(len(bundles))
    adapters = {}
    # iterate in the first bundle's insertion order, not set order, so
    # downstream rng consumption is stable across processes
    for name in first.adapters:
        a = sum(b.adapters[name].A for b in bundles) / n
        bb = sum(b.adapters[name].B for b in bundles) / n
        adapters[name] = LoRAAdapter(name, a, bb, first.adapters[name].scale)
    meta = {"source_languages": [b.language_id for b in bundles]}
    return ExpertBundle(language_id=language_id, rank=first.rank,
                        adapters=adapters, metadata=meta, kind=KIND_EXPERT)


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------
# magic "MOLE" | version u16 | kind u8 | language_id (u16 len + UTF-8)
# | rank u16 | entry count u32
# | per entry: target id (u16 len + UTF-8), d1 u32, d2 u32, r u16,
#   then A then B as little-endian float64 row-major
#   (r == 0 marks a full-matrix entry: d1*d2 floats, no B block)
# | metadata as u32-length-prefixed canonical JSON
# | CRC32 (u32) of every preceding byte.

def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError("string too long for bundle file")
    return struct.pack("<H", len(raw)) + raw


def bundle_bytes(bundle: ExpertBundle) -> bytes:
    buf = bytearray()
    buf += _MAGIC
    buf += struct.pack("<H", _VERSION)
    buf += struct.pack("<B", bundle.kind)
    buf += _pack_str(bundle.language_id)
    buf += struct.pack("<H", bundle.rank)

    entries: list[tuple[str, np.ndarray, np.ndarray | None, int]] = []
    for name in sorted(bundle.adapters):
        ad = bundle.adapters[name]
        entries.append((name, ad.A, ad.B, ad.rank))
    for name in sorted(bundle.matrices):
        m = np.asarray(bundle.matrices[name], dtype=np.float64)
        if m.ndim == 1:
            m = m[None, :]
        if m.ndim != 2:
            raise ValueError(f"matrix entry '{name}' must be 1-D or 2-D")
        entries.append((name, m, None, 0))

    buf += struct.pack("<I", len(entries))
    for name, a, b, r in entries:
        if b is not None:
            d1, d2 = b.shape[0], a.shape[1]
        else:
            d1, d2 = a.shape
        buf += _pack_str(name)
        buf += struct.pack("<IIH", d1, d2, r)
        buf += np.ascontiguousarray(a, dtype="<f8").tobytes()
        if b is not None:
            buf += np.ascontiguousarray(b, dtype="<f8").tobytes()

    meta = json.dumps(bundle.metadata, sort_keys=True,
                      separators=(",", ":")).encode("utf-8")
    buf += struct.pack("<I", len(meta)) + meta
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    return bytes(buf)


def save_bundle(bundle: ExpertBundle, path) -> None:
    with open(path, "wb") as fh:
        fh.write(bundle_bytes(bundle))


def bundle_digest(bundle: ExpertBundle) -> str:
    """Content hash over the exact serialized byte stream."""
    import hashlib
    return hashlib.sha256(bundle_bytes(bundle)).hexdigest()


class _Reader:
    def __init__(self, buf: bytes) -> None:
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(
                f"bundle file ends early: wanted {n} bytes at offset {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u16()).decode("utf-8")

    def floats(self, count: int) -> np.ndarray:
        raw = self.take(count * 8)
        return np.frombuffer(raw, dtype="<f8").astype(np.float64)


def load_bundle(path) -> ExpertBundle:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 4:
        raise TruncatedError(f"bundle file is only {len(buf)} bytes")
    if buf[:4] != _MAGIC:
        raise BadMagicError(f"not a bundle file: magic {buf[:4]!r}")

    rd = _Reader(buf)
    rd.take(4)
    version = rd.u16()
    if version != _VERSION:
        raise VersionError(f"unsupported bundle version {version}")
    kind = rd.u8()
    language_id = rd.string()
    rank = rd.u16()
    n_entries = rd.u32()

    adapters: dict[str, LoRAAdapter] = {}
    matrices: dict[str, np.ndarray] = {}
    for _ in range(n_entries):
        name = rd.string()
        d1 = rd.u32()
        d2 = rd.u32()
        r = rd.u16()
        if r == 0:
            matrices[name] = rd.floats(d1 * d2).reshape(d1, d2)
        else:
            a = rd.floats(r * d2).reshape(r, d2)
            b = rd.floats(d1 * r).reshape(d1, r)
            adapters[name] = LoRAAdapter(name, a, b)

    meta_raw = rd.take(rd.u32())
    stored_crc = rd.u32()
    if rd.pos != len(buf):
        raise TruncatedError(f"{len(buf) - rd.pos} trailing bytes after checksum")
    actual_crc = zlib.crc32(buf[:-4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise ChecksumError(
            f"checksum mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}")

    try:
        metadata = json.loads(meta_raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ChecksumError(f"metadata block unreadable: {exc}") from exc

    return ExpertBundle(language_id=language_id, rank=rank, adapters=adapters,
                        matrices=matrices, metadata=metadata, kind=kind)


def bundles_equal(a: ExpertBundle, b: ExpertBundle) -> bool:
    """Bit-exact comparison of two bundles, metadata included."""
    if (a.language_id, a.rank, a.kind) != (b.language_id, b.rank, b.kind):
        return False
    if set(a.adapters) != set(b.adapters) or set(a.matrices) != set(b.matrices):
        return False
    for name, ad in a.adapters.items():
        other = b.adapters[name]
        if ad.A.tobytes() != other.A.tobytes() or ad.B.tobytes() != other.B.tobytes():
            return False
    for name, m in a.matrices.items():
        if m.tobytes() != b.matrices[name].tobytes():
            return False
    return a.metadata == b.metadata
