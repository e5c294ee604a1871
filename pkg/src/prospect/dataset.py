"""Episode storage, train/validation splitting and supervision batches.

Episode files (little-endian)::

    "PEP1" u32 version=1 u32 n_keyframes u32 H u32 W u32 C u32 state_dim
    per keyframe: f32 image[H*W*C] f32 state[state_dim] f32 gripper u32 action f32 reward_to_go

The manifest is a text file: a ``PROSPECT-DATASET v1`` header, one
``id,file,success,n_keyframes,domain`` line per episode and a final line
with the action vocabulary in id order.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .observation import Observation
from .worlds import Episode, Keyframe, vocabulary

EPISODE_MAGIC = b"PEP1"
EPISODE_VERSION = 1
MANIFEST_HEADER = "PROSPECT-DATASET v1"
MANIFEST_NAME = "manifest.txt"
_HEADER = struct.Struct("<4s6I")


class DatasetError(ValueError):
    pass


# -- episode files ----------------------------------------------------------------


def episode_bytes(ep: Episode) -> bytes:
    if len(ep.keyframes) < 2:
        raise DatasetError("an episode needs at least two keyframes")
    h, w, c = ep.keyframes[0].obs.image.shape
    s = ep.keyframes[0].obs.state.shape[0]
    parts = [_HEADER.pack(EPISODE_MAGIC, EPISODE_VERSION, len(ep.keyframes), h, w, c, s)]
    for kf in ep.keyframes:
        if kf.obs.image.shape != (h, w, c) or kf.obs.state.shape != (s,):
            raise DatasetError("keyframes of one episode must share image and state shapes")
        parts.append(kf.obs.image.astype("<f4").tobytes())
        parts.append(kf.obs.state.astype("<f4").tobytes())
        parts.append(struct.pack("<fIf", kf.obs.gripper, kf.action, kf.reward_to_go))
    return b"".join(parts)


def parse_episode(blob: bytes, source: str = "<bytes>", success: bool | None = None, domain: str = "stack") -> Episode:
    if len(blob) < _HEADER.size:
        raise DatasetError(f"{source}: truncated header")
    magic, version, n, h, w, c, s = _HEADER.unpack_from(blob)
    if magic != EPISODE_MAGIC:
        raise DatasetError(f"{source}: bad magic {magic!r}")
    if version != EPISODE_VERSION:
        raise DatasetError(f"{source}: unsupported version {version}")
    frame = 4 * (h * w * c + s + 3)
    if len(blob) != _HEADER.size + n * frame:
        raise DatasetError(f"{source}: expected {_HEADER.size + n * frame} bytes, found {len(blob)}")
    keyframes = []
    off = _HEADER.size
    for _ in range(n):
        image = np.frombuffer(blob, "<f4", h * w * c, off).reshape(h, w, c).astype(np.float32)
        off += 4 * h * w * c
        state = np.frombuffer(blob, "<f4", s, off).astype(np.float32)
        off += 4 * s
        gripper, action, rtg = struct.unpack_from("<fIf", blob, off)
        off += 12
        keyframes.append(Keyframe(Observation(image, state, gripper), action, rtg))
    if success is None:
        success = bool(keyframes[-1].reward_to_go)
    return Episode(keyframes, success, domain)


# -- datasets ---------------------------------------------------------------------------


def save_dataset(episodes: list[Episode], path, vocab: list[str] | None = None) -> str:
    """Write one file per episode plus the manifest; returns the manifest text."""
    root = Path(path)
    if not episodes:
        raise DatasetError("nothing to save")
    domain = episodes[0].domain
    vocab = vocabulary(domain) if vocab is None else list(vocab)
    lines = [MANIFEST_HEADER]
    try:
        root.mkdir(parents=True, exist_ok=True)
        for i, ep in enumerate(episodes):
            name = f"episode_{i:05d}.pep"
            (root / name).write_bytes(episode_bytes(ep))
            lines.append(f"{i},{name},{int(ep.success)},{len(ep.keyframes)},{ep.domain}")
        lines.append(",".join(vocab))
        text = "\n".join(lines) + "\n"
        (root / MANIFEST_NAME).write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write dataset at {root}: {exc}") from exc
    return text


@dataclass
class ManifestEntry:
    id: int
    file: str
    success: bool
    n_keyframes: int
    domain: str


def read_manifest(path) -> tuple[list[ManifestEntry], list[str]]:
    mpath = Path(path) / MANIFEST_NAME
    lines = mpath.read_text().splitlines()
    if not lines or lines[0] != MANIFEST_HEADER:
        raise DatasetError(f"{mpath}: missing {MANIFEST_HEADER!r} header")
    if len(lines) < 2:
        raise DatasetError(f"{mpath}: missing vocabulary line")
    entries = []
    for line in lines[1:-1]:
        fields = line.split(",")
        if len(fields) != 5:
            raise DatasetError(f"{mpath}: malformed entry {line!r}")
        entries.append(ManifestEntry(int(fields[0]), fields[1], fields[2] == "1", int(fields[3]), fields[4]))
    return entries, lines[-1].split(",")


def read_vocabulary(path) -> list[str]:
    return read_manifest(path)[1]


def load_dataset(path) -> list[Episode]:
    root = Path(path)
    entries, _ = read_manifest(root)
    episodes = []
    for e in entries:
        fpath = root / e.file
        ep = parse_episode(fpath.read_bytes(), str(fpath), e.success, e.domain)
        if len(ep.keyframes) != e.n_keyframes:
            raise DatasetError(f"{fpath}: manifest lists {e.n_keyframes} keyframes, file has {len(ep.keyframes)}")
        episodes.append(ep)
    return episodes


# -- supervision pairs ------------------------------------------------------------------


def in_validation(episode_id: int, val_fraction: float, seed: int) -> bool:
    """Seeded hash split; an episode's side never depends on the others."""
    digest = hashlib.sha256(f"{seed}:{episode_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little") / 2**64 < val_fraction


def split_ids(n: int, val_fraction: float, seed: int) -> tuple[list[int], list[int]]:
    val = [i for i in range(n) if in_validation(i, val_fraction, seed)]
    vs = set(val)
    return [i for i in range(n) if i not in vs], val


@dataclass
class PairBatch:
    """Column-stored supervision pairs; images are ``(B, H, W, 3)``."""

    image: np.ndarray
    state: np.ndarray
    gripper: np.ndarray
    action: np.ndarray
    target_image: np.ndarray
    target_state: np.ndarray
    target_gripper: np.ndarray
    target_action: np.ndarray
    reward_to_go: np.ndarray
    from_success: np.ndarray

    def __len__(self) -> int:
        return len(self.action)

    def subset(self, idx) -> "PairBatch":
        return PairBatch(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))


class PairTable:
    """All consecutive-keyframe pairs of a set of episodes, indexable by position."""

    def __init__(self, episodes: list[Episode], ids: list[int] | None = None, success_only: bool = False):
        ids = list(range(len(episodes))) if ids is None else list(ids)
        frames, cur, nxt, succ = [], [], [], []
        for i in ids:
            ep = episodes[i]
            if success_only and not ep.success:
                continue
            base = len(frames)
            frames.extend(ep.keyframes)
            for k in range(len(ep.keyframes) - 1):
                cur.append(base + k)
                nxt.append(base + k + 1)
                succ.append(ep.success)
        self.episode_ids = ids
        self.images = np.stack([f.obs.image for f in frames]) if frames else np.zeros((0, 64, 64, 3), np.float32)
        self.states = np.stack([f.obs.state for f in frames]) if frames else np.zeros((0, 3), np.float32)
        self.grippers = np.array([f.obs.gripper for f in frames], np.float32)
        self.actions = np.array([f.action for f in frames], np.int64)
        self.rewards = np.array([f.reward_to_go for f in frames], np.float32)
        self.cur = np.array(cur, np.int64)
        self.nxt = np.array(nxt, np.int64)
        self.success = np.array(succ, bool)

    def __len__(self) -> int:
        return len(self.cur)

    def batch(self, idx) -> PairBatch:
        c, n = self.cur[idx], self.nxt[idx]
        return PairBatch(
            self.images[c], self.states[c], self.grippers[c], self.actions[c],
            self.images[n], self.states[n], self.grippers[n], self.actions[n],
            self.rewards[c], self.success[idx],
        )


def make_batches(
    episodes: list[Episode],
    batch_size: int = 32,
    split: str = "train",
    val_fraction: float = 0.1,
    seed: int = 0,
    success_only: bool = False,
    epochs: int | None = None,
) -> Iterator[PairBatch]:
    """Shuffled pair batches, reshuffled each epoch; ``epochs=None`` streams forever.

    The last batch of an epoch may be short.
    """
    if split not in ("train", "val"):
        raise ValueError(f"unknown split {split!r}")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    train, val = split_ids(len(episodes), val_fraction, seed)
    table = PairTable(episodes, train if split == "train" else val, success_only)
    if len(table) == 0:
        raise DatasetError(f"{split} split is empty")
    epoch = 0
    while epochs is None or epoch < epochs:
        order = np.random.default_rng([seed, epoch]).permutation(len(table))
        for start in range(0, len(order), batch_size):
            yield table.batch(order[start : start + batch_size])
        epoch += 1
