"""Trajectory data model, on-disk layout, filtering and batch sampling.

A trajectory directory looks like::

    <id>/
      meta.json        {"length", "instruction", "state_dim", "action_dim", "id"}
      frames/000000.png ...
      states.f32       T x Ds, little-endian float32, row-major
      actions.f32      (T-1) x Da, same encoding
      masks/000000.png optional, nonzero = foreground

A dataset is a directory of such directories plus ``index.json``.
"""

from __future__ import annotations

import json
import math
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from PIL import Image

from mcr.errors import (
    BoundsError,
    DatasetError,
    FormatError,
    InputError,
    InsufficientLengthError,
    IntegrityError,
    SpecError,
)

_F32 = np.dtype("<f4")
INDEX_FILE = "index.json"


@dataclass(eq=False)
class Trajectory:
    """One recorded episode.

    ``frames`` is ``(T, H, W, 3)`` uint8, ``states`` is ``(T, Ds)`` and
    ``actions`` is ``(T-1, Da)``; action row ``t`` moves state ``t`` to ``t+1``.
    ``masks`` is an optional ``(T, H, W)`` boolean array of ground-truth
    manipulation masks.
    """

    frames: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    instruction: str
    id: str
    masks: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.frames = np.asarray(self.frames, dtype=np.uint8)
        self.states = np.asarray(self.states, dtype=np.float32)
        self.actions = np.asarray(self.actions, dtype=np.float32)
        if self.masks is not None:
            self.masks = np.asarray(self.masks, dtype=bool)
        self.validate()

    @property
    def length(self) -> int:
        return int(self.states.shape[0])

    @property
    def state_dim(self) -> int:
        return int(self.states.shape[1])

    @property
    def action_dim(self) -> int:
        return int(self.actions.shape[1])

    def validate(self) -> None:
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise InputError(f"frames must be (T, H, W, 3), got {self.frames.shape}")
        if self.states.ndim != 2 or self.actions.ndim != 2:
            raise InputError("states and actions must be 2-D")
        T = self.frames.shape[0]
        if T < 1:
            raise InputError("trajectory needs at least one frame")
        if self.states.shape[0] != T:
            raise InputError(f"{self.states.shape[0]} states for {T} frames")
        if self.actions.shape[0] != T - 1:
            raise InputError(f"{self.actions.shape[0]} actions for {T} frames, expected {T - 1}")
        if not (np.isfinite(self.states).all() and np.isfinite(self.actions).all()):
            raise InputError("states/actions contain non-finite values")
        if self.masks is not None and self.masks.shape != self.frames.shape[:3]:
            raise InputError(f"masks shape {self.masks.shape} != frames {self.frames.shape[:3]}")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Trajectory):
            return NotImplemented
        if (self.masks is None) != (other.masks is None):
            return False
        return (
            self.id == other.id
            and self.instruction == other.instruction
            and self.frames.shape == other.frames.shape
            and self.states.shape == other.states.shape
            and self.actions.shape == other.actions.shape
            and np.array_equal(self.frames, other.frames)
            and np.array_equal(self.states, other.states)
            and np.array_equal(self.actions, other.actions)
            and (self.masks is None or np.array_equal(self.masks, other.masks))
        )


@dataclass(frozen=True)
class FilterRules:
    min_length: int = 40
    require_instruction: bool = True
    min_instruction_tokens: int = 2

    def __post_init__(self) -> None:
        if self.min_length < 1 or self.min_instruction_tokens < 1:
            raise SpecError("min_length and min_instruction_tokens must be >= 1")


@dataclass(frozen=True)
class ChunkSpec:
    """Shape of a state-action dynamics chunk (odd ``length`` only)."""

    length: int = 3
    state_dim: int = 14
    action_dim: int = 7

    def __post_init__(self) -> None:
        if self.length < 1 or self.length % 2 == 0:
            raise SpecError(f"chunk length must be a positive odd integer, got {self.length}")
        if self.state_dim < 1 or self.action_dim < 0:
            raise SpecError("state_dim must be >= 1 and action_dim >= 0")

    @property
    def half(self) -> int:
        return (self.length - 1) // 2

    @property
    def dim(self) -> int:
        return self.length * self.state_dim + (self.length - 1) * self.action_dim


@dataclass
class TrainingBatch:
    """One pre-training batch; every array has leading dimension B."""

    images_t: np.ndarray
    images_k: np.ndarray
    chunks_t: np.ndarray
    chunks_k: np.ndarray
    actions_t: np.ndarray
    images_u: np.ndarray
    images_v: np.ndarray
    images_w: np.ndarray
    t: np.ndarray
    k: np.ndarray
    u: np.ndarray
    v: np.ndarray
    w: np.ndarray
    trajectory_ids: list[str] = field(default_factory=list)
    negative_index: np.ndarray | None = None

    @property
    def size(self) -> int:
        return len(self.trajectory_ids)


# --------------------------------------------------------------------------- io


def _meta(traj: Trajectory) -> dict[str, Any]:
    return {
        "length": traj.length,
        "instruction": traj.instruction,
        "state_dim": traj.state_dim,
        "action_dim": traj.action_dim,
        "id": traj.id,
    }


def write_trajectory(traj: Trajectory, path: str | os.PathLike) -> None:
    """Write ``traj`` to ``path``, replacing anything already there."""
    path = Path(path)
    traj.validate()
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        (tmp / "meta.json").write_text(json.dumps(_meta(traj), indent=2))
        (tmp / "frames").mkdir()
        for i, frame in enumerate(traj.frames):
            Image.fromarray(frame, mode="RGB").save(tmp / "frames" / f"{i:06d}.png")
        (tmp / "states.f32").write_bytes(traj.states.astype(_F32).tobytes(order="C"))
        (tmp / "actions.f32").write_bytes(traj.actions.astype(_F32).tobytes(order="C"))
        if traj.masks is not None:
            (tmp / "masks").mkdir()
            for i, mask in enumerate(traj.masks):
                Image.fromarray(mask.astype(np.uint8) * 255, mode="L").save(
                    tmp / "masks" / f"{i:06d}.png"
                )
        if path.exists():
            shutil.rmtree(path)
        os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def _read_array(file: Path, rows: int, cols: int) -> np.ndarray:
    if not file.is_file():
        raise FormatError(f"missing {file}")
    raw = file.read_bytes()
    if len(raw) != 4 * rows * cols:
        raise IntegrityError(
            f"{file.name}: {len(raw)} bytes, expected {4 * rows * cols} for {rows}x{cols} float32"
        )
    return np.frombuffer(raw, dtype=_F32).reshape(rows, cols).astype(np.float32)


def _read_pngs(folder: Path, count: int, what: str) -> list[np.ndarray]:
    files = sorted(folder.glob("*.png"))
    if len(files) != count:
        raise IntegrityError(f"{folder}: {len(files)} {what} for length {count}")
    expected = [f"{i:06d}.png" for i in range(count)]
    if [f.name for f in files] != expected:
        raise IntegrityError(f"{folder}: {what} are not numbered 000000..{count - 1:06d}")
    out = []
    for f in files:
        with Image.open(f) as im:
            out.append(np.asarray(im))
    return out


def read_trajectory(path: str | os.PathLike) -> Trajectory:
    path = Path(path)
    meta_file = path / "meta.json"
    if not meta_file.is_file():
        raise FormatError(f"missing {meta_file}")
    try:
        meta = json.loads(meta_file.read_text())
        T = int(meta["length"])
        ds = int(meta["state_dim"])
        da = int(meta["action_dim"])
        instruction = str(meta["instruction"])
        traj_id = str(meta["id"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{meta_file}: {exc}") from exc
    if not (path / "frames").is_dir():
        raise FormatError(f"missing {path / 'frames'}")
    frames = _read_pngs(path / "frames", T, "frames")
    frames = np.stack([f[..., :3] if f.ndim == 3 else np.repeat(f[..., None], 3, -1) for f in frames])
    states = _read_array(path / "states.f32", T, ds)
    actions = _read_array(path / "actions.f32", T - 1, da)
    masks = None
    if (path / "masks").is_dir():
        masks = np.stack([m.astype(bool) if m.ndim == 2 else m.any(-1) for m in
                          _read_pngs(path / "masks", T, "masks")])
    try:
        return Trajectory(frames, states, actions, instruction, traj_id, masks)
    except InputError as exc:
        raise IntegrityError(f"{path}: {exc}") from exc


def write_dataset(
    trajectories: Sequence[Trajectory],
    root: str | os.PathLike,
    extra: dict[str, Any] | None = None,
) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    ids = [t.id for t in trajectories]
    if len(set(ids)) != len(ids):
        raise InputError("trajectory ids must be unique within a dataset")
    for traj in trajectories:
        write_trajectory(traj, root / traj.id)
    index: dict[str, Any] = {"trajectories": ids}
    if extra:
        index.update(extra)
    (root / INDEX_FILE).write_text(json.dumps(index, indent=2, sort_keys=True))
    return root


def read_index(root: str | os.PathLike) -> dict[str, Any]:
    index_file = Path(root) / INDEX_FILE
    if not index_file.is_file():
        raise FormatError(f"missing {index_file}")
    try:
        index = json.loads(index_file.read_text())
        index["trajectories"] = [str(i) for i in index["trajectories"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{index_file}: {exc}") from exc
    return index


def read_dataset(root: str | os.PathLike) -> list[Trajectory]:
    root = Path(root)
    return [read_trajectory(root / tid) for tid in read_index(root)["trajectories"]]


# ------------------------------------------------------------------ filtering


def filter_trajectories(dataset: Sequence[Trajectory], rules: FilterRules) -> list[Trajectory]:
    """Keep trajectories with at least ``min_length`` steps and a usable instruction.

    An instruction is unusable when it has fewer than ``min_instruction_tokens``
    whitespace-separated tokens (so empty and single-word instructions go).
    """

    def keep(traj: Trajectory) -> bool:
        if traj.length < rules.min_length:
            return False
        if rules.require_instruction and len(traj.instruction.split()) < rules.min_instruction_tokens:
            return False
        return True

    return [traj for traj in dataset if keep(traj)]


# ------------------------------------------------------------------- chunks


def chunk_window(length: int, spec: ChunkSpec) -> tuple[int, int]:
    """Inclusive range of timesteps for which a chunk is defined."""
    return spec.half, length - 1 - spec.half


def build_dynamics_chunk(traj: Trajectory, t: int, spec: ChunkSpec) -> np.ndarray:
    """Flatten ``[s_{t-h}, a_{t-h}, ..., a_{t+h-1}, s_{t+h}]`` with ``h = (l-1)/2``."""
    if traj.state_dim != spec.state_dim or traj.action_dim != spec.action_dim:
        raise InputError(
            f"trajectory dims ({traj.state_dim}, {traj.action_dim}) do not match "
            f"chunk spec ({spec.state_dim}, {spec.action_dim})"
        )
    lo, hi = chunk_window(traj.length, spec)
    if not lo <= t <= hi:
        raise BoundsError(f"t={t} outside chunk window [{lo}, {hi}] for l={spec.length}")
    start = t - spec.half
    parts = []
    for i in range(start, t + spec.half + 1):
        parts.append(traj.states[i])
        if i < t + spec.half:
            parts.append(traj.actions[i])
    chunk = np.concatenate(parts).astype(np.float32)
    assert chunk.shape == (spec.dim,)
    return chunk


# ----------------------------------------------------------------- sampling


def sample_frame_quintet(traj: Trajectory | int, rng: np.random.Generator) -> tuple[int, ...]:
    """Five increasing timesteps: first in the leading 20%, last in the trailing 20%."""
    T = traj if isinstance(traj, int) else traj.length
    if T < 5:
        raise InsufficientLengthError(f"need at least 5 frames, got {T}")
    window = max(1, math.floor(0.2 * T))
    first = int(rng.integers(0, window))
    last = int(rng.integers(T - window, T))
    interior = rng.choice(np.arange(first + 1, last), size=3, replace=False)
    return (first, *sorted(int(i) for i in interior), last)


def valid_timesteps(length: int, spec: ChunkSpec) -> tuple[int, int]:
    """Range of t usable for a training sample.

    The chunk must fit and ``actions[t]`` must exist, so the upper end is also
    capped at ``T - 2`` (only binding for ``l = 1``).
    """
    lo, hi = chunk_window(length, spec)
    return lo, min(hi, length - 2)


def _eligible(traj: Trajectory, spec: ChunkSpec) -> bool:
    lo, hi = valid_timesteps(traj.length, spec)
    return hi - lo + 1 >= 2 and traj.length >= 5


def cross_video_negatives(trajectory_ids: Sequence[str]) -> np.ndarray:
    """For each element, the next element (cyclically) from a different trajectory.

    When every element shares one trajectory, falls back to the next element.
    """
    B = len(trajectory_ids)
    out = np.empty(B, dtype=np.int64)
    for b in range(B):
        out[b] = (b + 1) % B
        for step in range(1, B):
            j = (b + step) % B
            if trajectory_ids[j] != trajectory_ids[b]:
                out[b] = j
                break
    return out


def sample_training_batch(
    dataset: Sequence[Trajectory],
    batch_size: int,
    spec: ChunkSpec,
    rng: np.random.Generator,
) -> TrainingBatch:
    if batch_size < 2:
        raise InputError("batch_size must be >= 2 for cross-video negatives")
    eligible = [traj for traj in dataset if _eligible(traj, spec)]
    if not eligible:
        raise DatasetError(
            f"no trajectory has two valid timesteps for chunk length {spec.length}"
        )
    picks = rng.integers(0, len(eligible), size=batch_size)
    cols: dict[str, list] = {name: [] for name in (
        "images_t", "images_k", "chunks_t", "chunks_k", "actions_t",
        "images_u", "images_v", "images_w", "t", "k", "u", "v", "w")}
    ids = []
    for p in picks:
        traj = eligible[int(p)]
        lo, hi = valid_timesteps(traj.length, spec)
        t = int(rng.integers(lo, hi + 1))
        k = int(rng.integers(lo, hi))  # one fewer slot, shifted past t
        if k >= t:
            k += 1
        quintet = sample_frame_quintet(traj, rng)
        u, v, w = quintet[0], quintet[2], quintet[4]
        cols["images_t"].append(traj.frames[t])
        cols["images_k"].append(traj.frames[k])
        cols["chunks_t"].append(build_dynamics_chunk(traj, t, spec))
        cols["chunks_k"].append(build_dynamics_chunk(traj, k, spec))
        cols["actions_t"].append(traj.actions[t])
        cols["images_u"].append(traj.frames[u])
        cols["images_v"].append(traj.frames[v])
        cols["images_w"].append(traj.frames[w])
        for name, val in zip("tkuvw", (t, k, u, v, w)):
            cols[name].append(val)
        ids.append(traj.id)
    arrays = {name: np.stack(vals) if name.startswith(("images", "chunks", "actions"))
              else np.asarray(vals, dtype=np.int64) for name, vals in cols.items()}
    return TrainingBatch(**arrays, trajectory_ids=ids, negative_index=cross_video_negatives(ids))
