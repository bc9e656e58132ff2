"""Persistent trajectory storage: binary chunks, JSON manifests, seeded samplers.

Chunk layout (all integers little-endian):
  magic   4 bytes  b"FMTJ"
  version u32      currently 1
  then records, each framed as: payload_len u32, payload bytes, crc32 u32.

A record payload holds the trajectory header followed by named tensors
(name_len u32, name, dtype u8 [0=f32, 1=u8], rank u32, dims u32*rank, raw
little-endian data). The manifest is human-readable JSON next to the chunks
and only ever references fully committed records: chunk bytes are flushed and
fsynced before the manifest is rewritten (atomically, via os.replace).
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
CHUNK_MAGIC = b"FMTJ"
CHUNK_ROTATE_BYTES = 64 * 1024 * 1024

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_DTYPE_TAGS = {np.dtype("float32"): 0, np.dtype("uint8"): 1}


class DatastoreError(Exception):
    pass


class IntegrityError(DatastoreError):
    pass


@dataclass
class TrajectoryRecord:
    """One trajectory: per-step observations, actions, goal and control flags."""

    trajectory_id: str
    round_index: int
    robot_id: int
    task_id: int
    images: np.ndarray        # (S, C, H, W) uint8
    proprios: np.ndarray      # (S, P) float32
    actions: np.ndarray       # (S, A) float32
    goal_flags: np.ndarray    # (S,) uint8
    control_flags: np.ndarray  # (S,) uint8, 1 on human-controlled steps
    perturbed: bool = False

    @property
    def num_steps(self) -> int:
        return len(self.actions)

    def validate(self):
        s = self.num_steps
        for name in ("images", "proprios", "actions", "goal_flags", "control_flags"):
            arr = getattr(self, name)
            if len(arr) != s:
                raise DatastoreError(f"{self.trajectory_id}: {name} has {len(arr)} steps, expected {s}")
        if not np.all(np.isin(self.control_flags, (0, 1))):
            raise DatastoreError(f"{self.trajectory_id}: control flags must be 0/1")
        g = self.goal_flags.astype(np.int16)
        if np.any(np.diff(g) < 0):
            raise DatastoreError(f"{self.trajectory_id}: goal flag decreased within episode")

    @property
    def success(self) -> bool:
        return bool(self.num_steps and self.goal_flags[-1])


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    tag = _DTYPE_TAGS.get(arr.dtype)
    if tag is None:
        raise DatastoreError(f"unsupported tensor dtype {arr.dtype}")
    nb = name.encode()
    head = struct.pack("<I", len(nb)) + nb + struct.pack("<BI", tag, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    data = arr.astype(_DTYPES[tag], copy=False)
    return head + data.tobytes()


def _unpack_tensor(payload: bytes, off: int) -> tuple[str, np.ndarray, int]:
    (name_len,) = struct.unpack_from("<I", payload, off)
    off += 4
    name = payload[off:off + name_len].decode()
    off += name_len
    tag, rank = struct.unpack_from("<BI", payload, off)
    off += 5
    dims = struct.unpack_from(f"<{rank}I", payload, off)
    off += 4 * rank
    dt = _DTYPES[tag]
    count = int(np.prod(dims)) if dims else 1
    arr = np.frombuffer(payload, dtype=dt, count=count, offset=off).reshape(dims)
    off += dt.itemsize * count
    return name, arr, off


def serialize_record(rec: TrajectoryRecord) -> bytes:
    rec.validate()
    tid = rec.trajectory_id.encode()
    head = struct.pack("<I", len(tid)) + tid
    head += struct.pack("<IIIBI", rec.round_index, rec.robot_id, rec.task_id,
                        1 if rec.perturbed else 0, rec.num_steps)
    body = b"".join([
        _pack_tensor("images", rec.images.astype(np.uint8, copy=False)),
        _pack_tensor("proprios", rec.proprios.astype(np.float32, copy=False)),
        _pack_tensor("actions", rec.actions.astype(np.float32, copy=False)),
        _pack_tensor("goal_flags", rec.goal_flags.astype(np.uint8, copy=False)),
        _pack_tensor("control_flags", rec.control_flags.astype(np.uint8, copy=False)),
    ])
    return head + body


def deserialize_record(payload: bytes) -> TrajectoryRecord:
    (tid_len,) = struct.unpack_from("<I", payload, 0)
    off = 4
    tid = payload[off:off + tid_len].decode()
    off += tid_len
    round_index, robot_id, task_id, perturbed, _steps = struct.unpack_from("<IIIBI", payload, off)
    off += 17
    tensors: dict[str, np.ndarray] = {}
    while off < len(payload):
        name, arr, off = _unpack_tensor(payload, off)
        tensors[name] = arr
    return TrajectoryRecord(
        trajectory_id=tid, round_index=round_index, robot_id=robot_id, task_id=task_id,
        images=tensors["images"].copy(), proprios=tensors["proprios"].copy(),
        actions=tensors["actions"].copy(), goal_flags=tensors["goal_flags"].copy(),
        control_flags=tensors["control_flags"].copy(), perturbed=bool(perturbed),
    )


def split_of(trajectory_id: str, split_seed: int, val_percent: int = 10) -> str:
    """Pure function of (trajectory_id, seed): stable 90/10 assignment."""
    h = zlib.crc32(f"{split_seed}:{trajectory_id}".encode())
    return "val" if h % 100 < val_percent else "train"


@dataclass
class RecordRef:
    trajectory_id: str
    chunk: str
    offset: int
    length: int
    round_index: int
    robot_id: int
    task_id: int
    num_steps: int
    perturbed: bool


@dataclass
class DatasetManifest:
    """On-disk index over trajectory chunks; single writer, atomic commits."""

    root: Path
    split_seed: int
    provenance: dict = field(default_factory=dict)
    records: list[RecordRef] = field(default_factory=list)
    _by_id: dict = field(default_factory=dict, repr=False)

    MANIFEST_NAME = "manifest.json"

    @classmethod
    def create(cls, root: str | Path, split_seed: int, provenance: dict | None = None) -> "DatasetManifest":
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        m = cls(root=root, split_seed=split_seed, provenance=provenance or {})
        m._commit()
        return m

    @classmethod
    def load(cls, root: str | Path) -> "DatasetManifest":
        root = Path(root)
        path = root / cls.MANIFEST_NAME
        if not path.exists():
            raise DatastoreError(f"no manifest at {path}")
        doc = json.loads(path.read_text())
        if doc["format_version"] != FORMAT_VERSION:
            raise DatastoreError(f"unsupported manifest version {doc['format_version']}")
        m = cls(root=root, split_seed=doc["split_seed"], provenance=doc.get("provenance", {}))
        for r in doc["records"]:
            ref = RecordRef(**r)
            m.records.append(ref)
            m._by_id[ref.trajectory_id] = ref
        return m

    # -- write path ----------------------------------------------------------

    def _chunk_path(self) -> Path:
        idx = 0
        while True:
            p = self.root / f"chunk_{idx:05d}.fmtj"
            if not p.exists() or p.stat().st_size < CHUNK_ROTATE_BYTES:
                return p
            idx += 1

    def append(self, rec: TrajectoryRecord):
        if rec.trajectory_id in self._by_id:
            raise DatastoreError(f"duplicate trajectory id {rec.trajectory_id}")
        payload = serialize_record(rec)
        frame = struct.pack("<I", len(payload)) + payload + struct.pack("<I", zlib.crc32(payload))
        chunk = self._chunk_path()
        new = not chunk.exists()
        with open(chunk, "ab") as f:
            if new:
                f.write(CHUNK_MAGIC + struct.pack("<I", FORMAT_VERSION))
            offset = f.tell()
            f.write(frame)
            f.flush()
            os.fsync(f.fileno())
        ref = RecordRef(
            trajectory_id=rec.trajectory_id, chunk=chunk.name, offset=offset, length=len(frame),
            round_index=rec.round_index, robot_id=rec.robot_id, task_id=rec.task_id,
            num_steps=rec.num_steps, perturbed=rec.perturbed,
        )
        self.records.append(ref)
        self._by_id[ref.trajectory_id] = ref
        self._commit()

    def _commit(self):
        doc = {
            "format_version": FORMAT_VERSION,
            "split_seed": self.split_seed,
            "provenance": self.provenance,
            "records": [vars(r) for r in self.records],
        }
        tmp = self.root / (self.MANIFEST_NAME + ".tmp")
        tmp.write_text(json.dumps(doc, indent=1, sort_keys=True))
        os.replace(tmp, self.root / self.MANIFEST_NAME)

    # -- read path -----------------------------------------------------------

    def _read_frame(self, ref: RecordRef) -> bytes:
        chunk = self.root / ref.chunk
        if not chunk.exists():
            raise IntegrityError(f"missing chunk {ref.chunk}")
        with open(chunk, "rb") as f:
            f.seek(ref.offset)
            frame = f.read(ref.length)
        if len(frame) != ref.length:
            raise IntegrityError(f"chunk {ref.chunk}: truncated record {ref.trajectory_id}")
        (plen,) = struct.unpack_from("<I", frame, 0)
        payload = frame[4:4 + plen]
        (crc,) = struct.unpack_from("<I", frame, 4 + plen)
        if zlib.crc32(payload) != crc:
            raise IntegrityError(f"chunk {ref.chunk}: checksum mismatch for {ref.trajectory_id}")
        return payload

    def load_record(self, trajectory_id: str) -> TrajectoryRecord:
        ref = self._by_id.get(trajectory_id)
        if ref is None:
            raise DatastoreError(f"unknown trajectory {trajectory_id}")
        return deserialize_record(self._read_frame(ref))

    def load_all(self) -> list[TrajectoryRecord]:
        return [self.load_record(r.trajectory_id) for r in self.records]

    def split(self, trajectory_id: str) -> str:
        return split_of(trajectory_id, self.split_seed)

    def ids(self, split: str | None = None) -> list[str]:
        out = []
        for r in self.records:
            if split is None or self.split(r.trajectory_id) == split:
                out.append(r.trajectory_id)
        return out

    def merge_from(self, others: list["DatasetManifest"]):
        """Union of records; trajectory ids must be disjoint. Chunks are referenced in place."""
        for other in others:
            for ref in other.records:
                if ref.trajectory_id in self._by_id:
                    raise DatastoreError(f"merge collision on {ref.trajectory_id}")
                rel = os.path.relpath(other.root / ref.chunk, self.root)
                merged = RecordRef(**{**vars(ref), "chunk": rel})
                self.records.append(merged)
                self._by_id[merged.trajectory_id] = merged
        self._commit()

    def verify(self) -> list[str]:
        """CRC + invariant check of every referenced record; returns problem strings."""
        problems = []
        for ref in self.records:
            try:
                rec = deserialize_record(self._read_frame(ref))
                rec.validate()
                if rec.num_steps != ref.num_steps:
                    problems.append(f"{ref.trajectory_id}: step count mismatch")
            except (IntegrityError, DatastoreError) as e:
                problems.append(str(e))
        return problems


def load_window(manifest: DatasetManifest, trajectory_id: str, start: int, length: int) -> dict:
    """Window of steps [start, start+length); start < 0 left-pads by repeating step 0.

    Returns per-field arrays plus a boolean `padded` mask marking repeated steps.
    """
    rec = manifest.load_record(trajectory_id)
    if start + length > rec.num_steps:
        raise DatastoreError(f"window [{start}, {start + length}) exceeds {rec.num_steps} steps")
    idx = np.clip(np.arange(start, start + length), 0, rec.num_steps - 1)
    return {
        "images": rec.images[idx],
        "proprios": rec.proprios[idx],
        "actions": rec.actions[idx],
        "goal_flags": rec.goal_flags[idx],
        "control_flags": rec.control_flags[idx],
        "padded": np.arange(start, start + length) < 0,
    }


@dataclass
class SamplerSpec:
    mode: str                    # uniform | class_balanced | control_weighted
    batch_size: int
    seed: int
    window: int = 1
    weights: dict = field(default_factory=dict)   # control_weighted: label -> weight

    def validate(self):
        if self.mode not in ("uniform", "class_balanced", "control_weighted"):
            raise DatastoreError(f"unknown sampler mode {self.mode}")
        if self.batch_size < 1 or self.window < 1:
            raise DatastoreError("batch_size and window must be >= 1")
        if any(w <= 0 for w in self.weights.values()):
            raise DatastoreError("sampler weights must be strictly positive")


def sample_batches(records: list[TrajectoryRecord], spec: SamplerSpec,
                   step_classes: list[np.ndarray] | None = None,
                   num_batches: int | None = None):
    """Seeded stream of (traj_index, step_index) batches over window end positions.

    Every step of every trajectory is a candidate window end (short prefixes are
    left-padded by the consumer). class_balanced draws classes uniformly then a
    member of the class; control_weighted draws steps with probability
    proportional to weight(class).
    """
    spec.validate()
    if not records:
        raise DatastoreError("empty record set")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec.seed & 0xFFFFFFFF])))

    traj_idx = np.concatenate([np.full(r.num_steps, i, dtype=np.int64) for i, r in enumerate(records)])
    step_idx = np.concatenate([np.arange(r.num_steps, dtype=np.int64) for r in records])
    total = len(traj_idx)

    if spec.mode == "uniform":
        probs = None
    else:
        if step_classes is None:
            raise DatastoreError(f"{spec.mode} sampling requires step classes")
        classes = np.concatenate([np.asarray(c) for c in step_classes])
        if len(classes) != total:
            raise DatastoreError("step_classes length mismatch")
        uniq = sorted(set(classes.tolist()))
        if spec.mode == "class_balanced":
            present = [u for u in uniq if np.sum(classes == u) > 0]
            probs = np.zeros(total)
            for u in present:
                mask = classes == u
                probs[mask] = 1.0 / (len(present) * mask.sum())
        else:
            probs = np.zeros(total)
            for u in uniq:
                w = float(spec.weights.get(u, 1.0))
                probs[classes == u] = w
            probs /= probs.sum()

    produced = 0
    while num_batches is None or produced < num_batches:
        pick = rng.choice(total, size=spec.batch_size, replace=True, p=probs)
        produced += 1
        yield traj_idx[pick], step_idx[pick]
