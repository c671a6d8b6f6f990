"""Single moving-digit video synthesis, caption tokenization and dataset IO.

Clips are stored as one directory of 8-bit PNG frames per clip, indexed by a
JSONL manifest (one record per line) next to a ``dataset.json`` metadata file
and a ``vocab.json`` token-to-id map.
"""
from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from PIL import Image

from .errors import (
    BoundsError,
    FormatError,
    InsufficientFramesError,
    IntegrityError,
    ValidationError,
)

PAD, CLS, UNK = "[PAD]", "[CLS]", "[UNK]"
PAD_ID, CLS_ID, UNK_ID = 0, 1, 2
CAPTION_TEMPLATE = "the digit {d} is moving {phrase}"
MANIFEST_NAME = "manifest.jsonl"
META_NAME = "dataset.json"
VOCAB_NAME = "vocab.json"
SCHEMA_VERSION = 1
RECORD_KEYS = {"path", "caption", "split", "clip_seed"}
OPTIONAL_RECORD_KEYS = {"digit", "pattern"}


class MotionPattern(enum.Enum):
    UP_THEN_DOWN = "up-then-down"
    LEFT_THEN_RIGHT = "left-then-right"
    DOWN_THEN_UP = "down-then-up"
    RIGHT_THEN_LEFT = "right-then-left"

    @property
    def phrase(self) -> str:
        return self.value.replace("-", " ")

    @property
    def axis(self) -> str:
        return "y" if self in (MotionPattern.UP_THEN_DOWN, MotionPattern.DOWN_THEN_UP) else "x"

    @property
    def sign(self) -> int:
        # image coordinates: up and left are negative
        return -1 if self in (MotionPattern.UP_THEN_DOWN, MotionPattern.LEFT_THEN_RIGHT) else 1

    @classmethod
    def parse(cls, value) -> "MotionPattern":
        if isinstance(value, cls):
            return value
        try:
            return cls(value)
        except ValueError:
            raise ValidationError(f"unknown motion pattern {value!r}") from None


PATTERNS = tuple(MotionPattern)

# 7x5 glyphs, '#' = ink
_GLYPH_ROWS = {
    0: [".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."],
    1: ["..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."],
    2: [".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"],
    3: ["#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."],
    4: ["...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."],
    5: ["#####", "#....", "####.", "....#", "....#", "#...#", ".###."],
    6: ["..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."],
    7: ["#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."],
    8: [".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."],
    9: [".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."],
}


def glyph(digit: int, scale: int = 1) -> np.ndarray:
    """Binary (h, w) uint8 sprite for a digit, upscaled by ``scale``."""
    if digit not in _GLYPH_ROWS:
        raise ValidationError(f"digit must be 0-9, got {digit}")
    base = np.array([[c == "#" for c in row] for row in _GLYPH_ROWS[digit]], dtype=np.uint8)
    return np.kron(base, np.ones((scale, scale), dtype=np.uint8))


@dataclass
class VideoClip:
    frames: np.ndarray  # (T, H, W, 3) uint8
    caption: str
    clip_seed: int = 0
    digit_id: int | None = None
    pattern: MotionPattern | None = None

    def __post_init__(self):
        f = self.frames
        if f.ndim != 4 or f.shape[-1] != 3:
            raise ValidationError(f"frames must be (T, H, W, 3), got {f.shape}")
        if f.shape[0] < 2:
            raise ValidationError("a clip needs at least 2 frames")
        if f.dtype != np.uint8:
            raise ValidationError(f"frames must be uint8, got {f.dtype}")
        if not self.caption:
            raise ValidationError("caption must be non-empty")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def render_caption(digit: int, pattern: MotionPattern) -> str:
    return CAPTION_TEMPLATE.format(d=digit, phrase=MotionPattern.parse(pattern).phrase)


def _round_half_up_ratio(num: int, den: int) -> int:
    return (2 * num + den) // (2 * den)


def trajectory(pattern: MotionPattern, amplitude: int, n_frames: int) -> np.ndarray:
    """Signed integer offsets along the pattern's axis, one per frame.

    Triangle path: 0 at both ends, peak magnitude ``amplitude`` at mid-clip.
    """
    pattern = MotionPattern.parse(pattern)
    span = n_frames - 1
    out = np.empty(n_frames, dtype=np.int64)
    for j in range(n_frames):
        tri_num = span - abs(2 * j - span)  # tri(j) * span
        out[j] = pattern.sign * _round_half_up_ratio(amplitude * tri_num, span)
    return out


def default_amplitude(height: int) -> int:
    return max(1, height // 4)


def default_glyph_scale(height: int) -> int:
    return max(1, height // 16)


def generate_clip(
    digit_id: int,
    pattern: MotionPattern | str,
    clip_seed: int,
    dims: tuple[int, int, int],
    amplitude: int | None = None,
    glyph_scale: int | None = None,
) -> VideoClip:
    """Render one clip of a digit translating out and back.

    ``dims`` is (H, W, T). The start position is drawn from ``clip_seed``
    among positions that keep the whole path inside the frame.
    """
    pattern = MotionPattern.parse(pattern)
    H, W, T = dims
    if T < 3:
        raise ValidationError(f"need T >= 3 frames, got {T}")
    amplitude = default_amplitude(H) if amplitude is None else amplitude
    scale = default_glyph_scale(H) if glyph_scale is None else glyph_scale
    if amplitude < 1:
        raise BoundsError(f"amplitude must be >= 1, got {amplitude}")
    sprite = glyph(digit_id, scale)
    sh, sw = sprite.shape
    room_y, room_x = H - sh, W - sw
    room = room_y if pattern.axis == "y" else room_x
    if room < 0 or (room_y < 0 or room_x < 0) or amplitude > room:
        raise BoundsError(
            f"sprite {sh}x{sw} with amplitude {amplitude} does not fit in {H}x{W}"
        )

    rng = np.random.default_rng(clip_seed)
    # the moving axis needs `amplitude` of clearance on the side it travels to
    if pattern.axis == "y":
        lo, hi = (amplitude, room_y) if pattern.sign < 0 else (0, room_y - amplitude)
        y0, x0 = int(rng.integers(lo, hi + 1)), int(rng.integers(0, room_x + 1))
    else:
        lo, hi = (amplitude, room_x) if pattern.sign < 0 else (0, room_x - amplitude)
        y0, x0 = int(rng.integers(0, room_y + 1)), int(rng.integers(lo, hi + 1))

    offsets = trajectory(pattern, amplitude, T)
    frames = np.zeros((T, H, W, 3), dtype=np.uint8)
    ink = sprite.astype(bool)
    for j, off in enumerate(offsets):
        y, x = (y0 + off, x0) if pattern.axis == "y" else (y0, x0 + off)
        frames[j, y : y + sh, x : x + sw][ink] = 255
    return VideoClip(frames, render_caption(digit_id, pattern), int(clip_seed), int(digit_id), pattern)


def sample_indices(T: int, N: int) -> list[int]:
    if N < 2:
        raise ValidationError(f"N must be >= 2, got {N}")
    if T < N:
        raise InsufficientFramesError(f"clip has {T} frames, need at least {N}")
    return [_round_half_up_ratio(j * (T - 1), N - 1) for j in range(N)]


def sample_frames(clip: VideoClip, N: int) -> VideoClip:
    """Uniformly pick N frames, always keeping the first and last."""
    idx = sample_indices(clip.n_frames, N)
    return VideoClip(clip.frames[idx], clip.caption, clip.clip_seed, clip.digit_id, clip.pattern)


# ---------------------------------------------------------------- vocabulary


def _words(caption: str) -> list[str]:
    return caption.lower().split()


@dataclass
class Vocabulary:
    token_to_id: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        t = self.token_to_id
        if t.get(PAD) != PAD_ID or t.get(CLS) != CLS_ID or t.get(UNK) != UNK_ID:
            raise FormatError("vocabulary must reserve [PAD]=0, [CLS]=1, [UNK]=2")
        if sorted(t.values()) != list(range(len(t))):
            raise FormatError("vocabulary ids must be dense")

    def __len__(self):
        return len(self.token_to_id)

    def __getitem__(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def to_json(self) -> str:
        return json.dumps(self.token_to_id, sort_keys=False, indent=0, ensure_ascii=False)

    def save(self, path: str | Path):
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise FormatError(f"cannot read vocabulary {path}: {exc}") from exc
        if not isinstance(data, dict) or not all(isinstance(v, int) for v in data.values()):
            raise FormatError("vocabulary must be a JSON object of token -> int")
        return cls(dict(data))


def build_vocabulary(captions: Iterable[str]) -> Vocabulary:
    captions = list(captions)
    tokens = sorted({w for c in captions for w in _words(c)})
    if not tokens:
        raise ValidationError("cannot build a vocabulary from an empty corpus")
    mapping = {PAD: PAD_ID, CLS: CLS_ID, UNK: UNK_ID}
    for tok in tokens:
        if tok not in mapping:
            mapping[tok] = len(mapping)
    return Vocabulary(mapping)


@dataclass
class TokenizedCaption:
    ids: np.ndarray  # (M,) int64
    mask: np.ndarray  # (M,) bool
    original_length: int


def tokenize(caption: str, vocab: Vocabulary, M: int) -> TokenizedCaption:
    if M < 2:
        raise ValidationError(f"M must be >= 2, got {M}")
    seq = [CLS_ID] + [vocab[w] for w in _words(caption)]
    n = len(seq)
    seq = seq[:M]
    ids = np.full(M, PAD_ID, dtype=np.int64)
    ids[: len(seq)] = seq
    mask = np.zeros(M, dtype=bool)
    mask[: len(seq)] = True
    return TokenizedCaption(ids, mask, n)


# ---------------------------------------------------------------- storage


@dataclass
class DatasetManifest:
    root: Path
    records: list[dict]
    meta: dict

    def __post_init__(self):
        if not self.records:
            raise FormatError("manifest has no records")

    def split(self, name: str) -> list[dict]:
        return [r for r in self.records if r["split"] == name]

    @property
    def vocab_path(self) -> Path:
        return self.root / self.meta["vocab"]


def _write_clip_dir(clip: VideoClip, clip_dir: Path):
    clip_dir.mkdir(parents=True, exist_ok=True)
    for j, frame in enumerate(clip.frames):
        Image.fromarray(frame, mode="RGB").save(clip_dir / f"frame_{j:03d}.png", optimize=False)


def _read_clip_dir(clip_dir: Path) -> np.ndarray:
    paths = sorted(clip_dir.glob("frame_*.png"))
    if not paths:
        raise IntegrityError(f"clip directory {clip_dir} has no frames")
    frames = []
    for p in paths:
        with Image.open(p) as im:
            frames.append(np.asarray(im.convert("RGB"), dtype=np.uint8))
    return np.stack(frames)


def write_dataset(
    clips: Sequence[tuple[VideoClip, str]],
    root: str | Path,
    generation_seed: int = 0,
    vocab: Vocabulary | None = None,
) -> DatasetManifest:
    """Write ``(clip, split)`` pairs under ``root`` and return the manifest.

    Single writer: concurrent writes to one root are not supported.
    """
    root = Path(root)
    if not clips:
        raise ValidationError("no clips to write")
    root.mkdir(parents=True, exist_ok=True)
    shapes = {c.frames.shape[1:3] for c, _ in clips}
    lengths = {c.n_frames for c, _ in clips}
    if len(shapes) != 1 or len(lengths) != 1:
        raise ValidationError("all clips must share frame size and length")
    (H, W), = shapes
    (T,) = lengths
    vocab = vocab or build_vocabulary(c.caption for c, _ in clips)
    vocab.save(root / VOCAB_NAME)

    records = []
    for k, (clip, split) in enumerate(clips):
        rel = f"clips/{k:06d}"
        _write_clip_dir(clip, root / rel)
        rec = {"path": rel, "caption": clip.caption, "split": split, "clip_seed": int(clip.clip_seed)}
        if clip.digit_id is not None:
            rec["digit"] = int(clip.digit_id)
        if clip.pattern is not None:
            rec["pattern"] = clip.pattern.value
        records.append(rec)
    with open(root / MANIFEST_NAME, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
    meta = {
        "schema": SCHEMA_VERSION,
        "height": H,
        "width": W,
        "frames": T,
        "vocab": VOCAB_NAME,
        "generation_seed": int(generation_seed),
    }
    (root / META_NAME).write_text(json.dumps(meta, indent=1), encoding="utf-8")
    return DatasetManifest(root, records, meta)


def _validate_record(rec, lineno: int):
    if not isinstance(rec, dict):
        raise FormatError(f"manifest line {lineno}: record must be an object")
    keys = set(rec)
    if not RECORD_KEYS <= keys or keys - RECORD_KEYS - OPTIONAL_RECORD_KEYS:
        raise FormatError(f"manifest line {lineno}: unexpected keys {sorted(keys)}")
    if not (isinstance(rec["path"], str) and isinstance(rec["caption"], str) and rec["caption"]):
        raise FormatError(f"manifest line {lineno}: path/caption must be non-empty strings")
    if not isinstance(rec["split"], str) or not isinstance(rec["clip_seed"], int):
        raise FormatError(f"manifest line {lineno}: bad split or clip_seed")


def read_manifest(root: str | Path) -> DatasetManifest:
    """Parse and integrity-check a dataset directory (or its manifest path)."""
    root = Path(root)
    if root.name == MANIFEST_NAME:
        root = root.parent
    try:
        meta = json.loads((root / META_NAME).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise IntegrityError(f"missing {META_NAME} in {root}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"bad {META_NAME}: {exc}") from exc
    if meta.get("schema") != SCHEMA_VERSION:
        raise FormatError(f"unsupported dataset schema {meta.get('schema')!r}")
    for key in ("height", "width", "frames", "vocab", "generation_seed"):
        if key not in meta:
            raise FormatError(f"{META_NAME} lacks {key!r}")
    records = []
    try:
        fh = open(root / MANIFEST_NAME, encoding="utf-8")
    except FileNotFoundError as exc:
        raise IntegrityError(f"missing {MANIFEST_NAME} in {root}") from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"manifest line {lineno}: {exc}") from exc
            _validate_record(rec, lineno)
            records.append(rec)
    manifest = DatasetManifest(root, records, meta)
    for rec in records:
        if not (root / rec["path"] / "frame_000.png").is_file():
            raise IntegrityError(f"clip {rec['path']} referenced by manifest is missing")
    seen: dict[str, str] = {}
    for rec in records:
        if seen.setdefault(rec["path"], rec["split"]) != rec["split"]:
            raise IntegrityError(f"clip {rec['path']} appears in two splits")
    if not manifest.vocab_path.is_file():
        raise IntegrityError(f"vocabulary {manifest.vocab_path} missing")
    return manifest


def load_dataset(
    root: str | Path,
    M: int = 40,
    split: str | None = None,
    shuffle_seed: int | None = None,
    vocab: Vocabulary | None = None,
) -> Iterator[tuple[VideoClip, TokenizedCaption]]:
    manifest = read_manifest(root)
    vocab = vocab or Vocabulary.load(manifest.vocab_path)
    records = manifest.records if split is None else manifest.split(split)
    order = np.arange(len(records))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(records))
    for k in order:
        rec = records[k]
        clip_dir = manifest.root / rec["path"]
        if not clip_dir.is_dir():
            raise IntegrityError(f"clip {rec['path']} vanished")
        frames = _read_clip_dir(clip_dir)
        pattern = MotionPattern.parse(rec["pattern"]) if "pattern" in rec else None
        clip = VideoClip(frames, rec["caption"], rec["clip_seed"], rec.get("digit"), pattern)
        yield clip, tokenize(rec["caption"], vocab, M)


def dataset_digest(root: str | Path) -> str:
    """SHA-256 over metadata, vocabulary, manifest and every frame file."""
    root = Path(root)
    manifest = read_manifest(root)
    h = hashlib.sha256()
    for name in (META_NAME, VOCAB_NAME, MANIFEST_NAME):
        h.update((root / name).read_bytes())
    for rec in manifest.records:
        for p in sorted((root / rec["path"]).glob("frame_*.png")):
            h.update(p.read_bytes())
    return h.hexdigest()


@dataclass
class ClipArrays:
    """A split held in memory: frames (n, N, H, W, 3) uint8 plus token arrays."""

    frames: np.ndarray
    ids: np.ndarray
    mask: np.ndarray
    captions: list[str]
    patterns: list[str | None]

    def __len__(self):
        return self.frames.shape[0]


def arrays_from_clips(clips: Iterable[VideoClip], vocab: Vocabulary, N: int, M: int) -> ClipArrays:
    frames, ids, masks, caps, pats = [], [], [], [], []
    for clip in clips:
        tok = tokenize(clip.caption, vocab, M)
        clip = sample_frames(clip, N)
        frames.append(clip.frames)
        ids.append(tok.ids)
        masks.append(tok.mask)
        caps.append(clip.caption)
        pats.append(clip.pattern.value if clip.pattern else None)
    if not frames:
        raise ValidationError("no clips")
    return ClipArrays(np.stack(frames), np.stack(ids), np.stack(masks), caps, pats)


def load_arrays(root: str | Path, split: str, N: int, M: int, vocab: Vocabulary | None = None) -> ClipArrays:
    manifest = read_manifest(root)
    vocab = vocab or Vocabulary.load(manifest.vocab_path)
    clips = [clip for clip, _ in load_dataset(root, M=M, split=split, vocab=vocab)]
    if not clips:
        raise ValidationError(f"split {split!r} is empty")
    return arrays_from_clips(clips, vocab, N, M)


def clip_seed_for(generation_seed: int, index: int) -> int:
    state = np.random.SeedSequence(generation_seed, spawn_key=(index,)).generate_state(2, np.uint32)
    return int(state[0]) << 32 | int(state[1])


def make_balanced(
    n_clips: int,
    generation_seed: int,
    dims: tuple[int, int, int],
    amplitude: int | None = None,
    glyph_scale: int | None = None,
    offset: int = 0,
) -> list[VideoClip]:
    """Round-robin over the 40 (pattern, digit) cells: clip k gets digit k % 10
    and pattern (k // 10) % 4, so multiples of 40 are exactly balanced."""
    clips = []
    for k in range(n_clips):
        digit, pattern = k % 10, PATTERNS[(k // 10) % 4]
        seed = clip_seed_for(generation_seed, offset + k)
        clips.append(generate_clip(digit, pattern, seed, dims, amplitude, glyph_scale))
    return clips


def to_unit_range(frames_u8: np.ndarray) -> np.ndarray:
    """uint8 [0,255] -> float32 [-1,1]."""
    return frames_u8.astype(np.float32) / 127.5 - 1.0


def to_uint8(x: np.ndarray) -> np.ndarray:
    """[-1,1] -> uint8 via round((x+1)*127.5), clamped."""
    return np.clip(np.floor((np.asarray(x, dtype=np.float64) + 1.0) * 127.5 + 0.5), 0, 255).astype(np.uint8)

