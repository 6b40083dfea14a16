"""Synthetic sign-video corpus: vocabulary, gesture glyphs, generation and file I/O."""
from __future__ import annotations

import json
import struct
from functools import lru_cache
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

PAD, BOS, EOS, MASK, CLS = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<mask>", "<cls>")
N_SPECIAL = len(SPECIAL_TOKENS)

DATASET_MAGIC = b"GFSL"
DATASET_VERSION = 1

REORDER_RULES = ("identity", "reverse", "swap")
GLYPH_SIZE = 7


class ConfigError(ValueError):
    pass


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class VersionError(FormatError):
    pass


@dataclass
class Vocabulary:
    tokens: list[str]

    def __post_init__(self):
        if tuple(self.tokens[:N_SPECIAL]) != SPECIAL_TOKENS:
            raise ValueError("special tokens must occupy the first ids")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate token strings")
        self._index = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def for_gestures(cls, n: int) -> "Vocabulary":
        return cls(list(SPECIAL_TOKENS) + [f"w{i:03d}" for i in range(n)])

    def __len__(self):
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self._index[token]

    def token(self, idx: int) -> str:
        return self.tokens[idx]

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]

    @property
    def specials(self) -> dict[str, int]:
        return {"pad": PAD, "bos": BOS, "eos": EOS, "mask": MASK, "cls": CLS}


@dataclass(frozen=True)
class GestureEntry:
    glyph_seed: int
    frames: int
    token: int
    start: tuple[float, float]  # glyph top-left at frame 0 (row, col)
    end: tuple[float, float]    # glyph top-left at frame F-1


@dataclass
class GestureLexicon:
    entries: list[GestureEntry]
    frame_size: tuple[int, int, int]

    def __len__(self):
        return len(self.entries)

    def to_json(self) -> dict:
        return {"frame_size": list(self.frame_size),
                "entries": [asdict(e) for e in self.entries]}

    @classmethod
    def from_json(cls, obj: dict) -> "GestureLexicon":
        entries = [GestureEntry(e["glyph_seed"], e["frames"], e["token"],
                                tuple(e["start"]), tuple(e["end"])) for e in obj["entries"]]
        return cls(entries, tuple(obj["frame_size"]))


@dataclass
class VideoClip:
    frames: np.ndarray  # [T, H, W, C] float32 in [0, 1]
    valid_len: int | None = None

    def __post_init__(self):
        if self.valid_len is None:
            self.valid_len = int(self.frames.shape[0])
        if self.valid_len > self.frames.shape[0]:
            raise ValueError("valid_len exceeds frame count")

    @property
    def T(self) -> int:
        return int(self.frames.shape[0])


@dataclass
class CorpusRecord:
    sample_id: int
    clip: VideoClip
    sentence: np.ndarray  # int64 ids, BOS ... EOS
    gestures: tuple[int, ...] = ()

    def __eq__(self, other):
        return (isinstance(other, CorpusRecord) and self.sample_id == other.sample_id
                and np.array_equal(self.clip.frames, other.clip.frames)
                and self.clip.valid_len == other.clip.valid_len
                and np.array_equal(self.sentence, other.sentence))


@dataclass
class CorpusConfig:
    vocab_size_gestures: int = 32
    sentence_len_min: int = 3
    sentence_len_max: int = 8
    frames_per_gesture: int = 4
    frame_size: tuple[int, int, int] = (24, 24, 1)
    reorder_rule: str = "reverse"
    noise_std: float = 0.05
    path_length: float = 6.0
    n_train: int = 2000
    n_dev: int = 200
    n_test: int = 200
    seed: int = 0

    def validate(self):
        if self.vocab_size_gestures < 2:
            raise ConfigError("vocab_size_gestures must be >= 2")
        if not 1 <= self.sentence_len_min <= self.sentence_len_max:
            raise ConfigError("need 1 <= sentence_len_min <= sentence_len_max")
        if self.frames_per_gesture < 1:
            raise ConfigError("frames_per_gesture must be >= 1")
        h, w, c = self.frame_size
        if min(h, w) < GLYPH_SIZE + 2 or c < 1:
            raise ConfigError(f"frame_size {self.frame_size} too small for {GLYPH_SIZE}px glyphs")
        if self.path_length < 0 or self.path_length > min(h, w) - GLYPH_SIZE:
            raise ConfigError("path_length does not fit inside the frame")
        if self.reorder_rule not in REORDER_RULES:
            raise ConfigError(f"reorder_rule must be one of {REORDER_RULES}")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if min(self.n_train, self.n_dev, self.n_test) < 0 or self.n_train < 1:
            raise ConfigError("split sizes must be non-negative with n_train >= 1")


@dataclass
class Corpus:
    train: list[CorpusRecord]
    dev: list[CorpusRecord]
    test: list[CorpusRecord]
    vocab: Vocabulary
    lexicon: GestureLexicon
    config: CorpusConfig = field(default_factory=CorpusConfig)

    def split(self, name: str) -> list[CorpusRecord]:
        return {"train": self.train, "dev": self.dev, "test": self.test}[name]


def reorder(tokens: list[int], rule: str) -> list[int]:
    if rule == "identity":
        return list(tokens)
    if rule == "reverse":
        return list(tokens[::-1])
    if rule == "swap":
        out = list(tokens)
        for i in range(0, len(out) - 1, 2):
            out[i], out[i + 1] = out[i + 1], out[i]
        return out
    raise ConfigError(f"unknown reorder rule {rule!r}")


def sentence_for(gestures, lexicon: GestureLexicon, rule: str) -> np.ndarray:
    toks = [lexicon.entries[g].token for g in gestures]
    return np.array([BOS] + reorder(toks, rule) + [EOS], dtype=np.int64)


@lru_cache(maxsize=4096)
def _glyph(seed: int, channels: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    g = np.zeros((GLYPH_SIZE, GLYPH_SIZE), dtype=np.float64)
    yy, xx = np.mgrid[0:GLYPH_SIZE, 0:GLYPH_SIZE]
    for _ in range(3):
        cy, cx = rng.uniform(0.5, GLYPH_SIZE - 1.5, size=2)
        s = rng.uniform(0.7, 1.6)
        g += rng.uniform(0.5, 1.0) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    g = g / g.max()
    # binarise-ish so glyph shapes are crisp and centroids well defined
    g = np.where(g > 0.35, g, 0.0)
    tint = rng.uniform(0.6, 1.0, size=channels)
    out = (g[:, :, None] * tint).astype(np.float32)
    out.flags.writeable = False
    return out


def glyph_position(entry: GestureEntry, frame_index: int) -> tuple[int, int]:
    if entry.frames == 1:
        frac = 0.0
    else:
        frac = frame_index / (entry.frames - 1)
    r = entry.start[0] + frac * (entry.end[0] - entry.start[0])
    c = entry.start[1] + frac * (entry.end[1] - entry.start[1])
    return int(round(r)), int(round(c))


def render_gesture(lexicon: GestureLexicon, gesture: int, frame_index: int) -> np.ndarray:
    """Noise-free ``H x W x C`` frame of ``gesture`` at ``frame_index``."""
    if not 0 <= gesture < len(lexicon.entries):
        raise IndexError(f"unknown gesture id {gesture}")
    entry = lexicon.entries[gesture]
    if not 0 <= frame_index < entry.frames:
        raise IndexError(f"frame index {frame_index} outside [0, {entry.frames})")
    h, w, c = lexicon.frame_size
    frame = np.zeros((h, w, c), dtype=np.float32)
    r, col = glyph_position(entry, frame_index)
    frame[r:r + GLYPH_SIZE, col:col + GLYPH_SIZE] = _glyph(entry.glyph_seed, c)
    return frame


def render_stack(lexicon: GestureLexicon, gesture: int) -> np.ndarray:
    return np.stack([render_gesture(lexicon, gesture, f)
                     for f in range(lexicon.entries[gesture].frames)])


def _stacks_distinct(a: np.ndarray, b: np.ndarray) -> bool:
    return float((np.abs(a - b) >= 0.1).mean()) >= 0.05


def build_lexicon(cfg: CorpusConfig) -> GestureLexicon:
    h, w, c = cfg.frame_size
    ss = np.random.SeedSequence([cfg.seed, 0xC0FFEE])
    rng = np.random.default_rng(ss)
    entries: list[GestureEntry] = []
    stacks: list[np.ndarray] = []
    lim_r, lim_c = h - GLYPH_SIZE, w - GLYPH_SIZE
    for g in range(cfg.vocab_size_gestures):
        for _attempt in range(1000):
            angle = rng.uniform(0, 2 * np.pi)
            dr, dc = cfg.path_length * np.sin(angle), cfg.path_length * np.cos(angle)
            r0 = rng.uniform(max(0.0, -dr), lim_r - max(0.0, dr))
            c0 = rng.uniform(max(0.0, -dc), lim_c - max(0.0, dc))
            entry = GestureEntry(int(rng.integers(2**31)), cfg.frames_per_gesture,
                                 N_SPECIAL + g, (float(r0), float(c0)),
                                 (float(r0 + dr), float(c0 + dc)))
            lex = GestureLexicon([entry], cfg.frame_size)
            stack = render_stack(lex, 0)
            if all(_stacks_distinct(stack, s) for s in stacks):
                break
        else:
            raise ConfigError("could not draw mutually distinct gestures; enlarge frame_size")
        entries.append(entry)
        stacks.append(stack)
    return GestureLexicon(entries, tuple(cfg.frame_size))


def render_clip(lexicon: GestureLexicon, gestures, noise_std: float,
                rng: np.random.Generator | None) -> VideoClip:
    frames = np.concatenate([render_stack(lexicon, g) for g in gestures])
    if noise_std > 0:
        frames = frames + rng.normal(0.0, noise_std, size=frames.shape).astype(np.float32)
        frames = np.clip(frames, 0.0, 1.0)
    return VideoClip(frames.astype(np.float32))


def _draw_sequence(cfg: CorpusConfig, sample_id: int, attempt: int) -> tuple[int, ...]:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, sample_id, attempt]))
    n = int(rng.integers(cfg.sentence_len_min, cfg.sentence_len_max + 1))
    return tuple(int(x) for x in rng.integers(0, cfg.vocab_size_gestures, size=n))


def generate_corpus(cfg: CorpusConfig) -> Corpus:
    """Deterministically build train/dev/test splits from ``cfg``.

    Every gesture sequence in the corpus is unique, so dev/test sequences
    never occur in train.
    """
    cfg.validate()
    lexicon = build_lexicon(cfg)
    vocab = Vocabulary.for_gestures(cfg.vocab_size_gestures)
    seen: set[tuple[int, ...]] = set()
    records: list[CorpusRecord] = []
    total = cfg.n_train + cfg.n_dev + cfg.n_test
    for sid in range(total):
        for attempt in range(10_000):
            seq = _draw_sequence(cfg, sid, attempt)
            if seq not in seen:
                break
        else:
            raise ConfigError("sequence space exhausted; widen sentence lengths or vocabulary")
        seen.add(seq)
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, sid, 0xF00D]))
        clip = render_clip(lexicon, seq, cfg.noise_std, rng)
        records.append(CorpusRecord(sid, clip, sentence_for(seq, lexicon, cfg.reorder_rule), seq))
    train = records[:cfg.n_train]
    dev = records[cfg.n_train:cfg.n_train + cfg.n_dev]
    test = records[cfg.n_train + cfg.n_dev:]
    train_seqs = {r.gestures for r in train}
    assert not any(r.gestures in train_seqs for r in dev + test), "split leakage"
    return Corpus(train, dev, test, vocab, lexicon, cfg)


# ---------------------------------------------------------------- oracle

def oracle_translate(lexicon: GestureLexicon, clip: VideoClip, rule: str) -> np.ndarray:
    """Nearest-glyph matching per gesture window, then the reorder rule.

    Only exact for noise-free clips without augmentation; used as a test
    oracle for corpus integrity.
    """
    F = lexicon.entries[0].frames
    stacks = np.stack([render_stack(lexicon, g) for g in range(len(lexicon))])
    frames = clip.frames[:clip.valid_len]
    gestures = []
    for start in range(0, len(frames) - F + 1, F):
        window = frames[start:start + F]
        dist = ((stacks - window[None]) ** 2).reshape(len(stacks), -1).sum(axis=1)
        gestures.append(int(np.argmin(dist)))
    return sentence_for(gestures, lexicon, rule)


# ---------------------------------------------------------------- binary I/O

_HEADER = struct.Struct("<4sII")
_REC_HEAD = struct.Struct("<IHHHH")


def encode_records(records: list[CorpusRecord]) -> bytes:
    parts = [_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, len(records))]
    for rec in records:
        frames = rec.clip.frames[:rec.clip.valid_len]
        T, H, W, C = frames.shape
        parts.append(_REC_HEAD.pack(rec.sample_id, T, H, W, C))
        parts.append(np.ascontiguousarray(frames, dtype="<f4").tobytes())
        parts.append(struct.pack("<H", len(rec.sentence)))
        parts.append(np.asarray(rec.sentence, dtype="<u2").tobytes())
    return b"".join(parts)


def decode_records(buf: bytes) -> list[CorpusRecord]:
    if len(buf) < _HEADER.size:
        raise FormatError("truncated header", len(buf))
    magic, version, count = _HEADER.unpack_from(buf, 0)
    if magic != DATASET_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {DATASET_MAGIC!r}", 0)
    if version != DATASET_VERSION:
        raise VersionError(f"dataset format version {version} unsupported "
                           f"(reader supports version {DATASET_VERSION})", 4)
    off = _HEADER.size
    out: list[CorpusRecord] = []

    def need(n: int, what: str):
        if off + n > len(buf):
            raise FormatError(f"truncated {what}", off)

    for _ in range(count):
        need(_REC_HEAD.size, "record header")
        sid, T, H, W, C = _REC_HEAD.unpack_from(buf, off)
        off += _REC_HEAD.size
        nbytes = 4 * T * H * W * C
        need(nbytes, "frame payload")
        frames = np.frombuffer(buf, dtype="<f4", count=T * H * W * C, offset=off)
        frames = frames.reshape(T, H, W, C).astype(np.float32)
        off += nbytes
        need(2, "sentence length")
        (n,) = struct.unpack_from("<H", buf, off)
        off += 2
        need(2 * n, "token ids")
        ids = np.frombuffer(buf, dtype="<u2", count=n, offset=off).astype(np.int64)
        off += 2 * n
        out.append(CorpusRecord(int(sid), VideoClip(frames), ids))
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes", off)
    return out


def write_dataset(records: list[CorpusRecord], path) -> None:
    Path(path).write_bytes(encode_records(records))


def read_dataset(path) -> list[CorpusRecord]:
    return decode_records(Path(path).read_bytes())


def write_sidecar(vocab: Vocabulary, lexicon: GestureLexicon, path, extra: dict | None = None):
    obj = {"vocabulary": vocab.tokens, "specials": vocab.specials,
           "lexicon": lexicon.to_json()}
    if extra:
        obj.update(extra)
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True))


def read_sidecar(path) -> tuple[Vocabulary, GestureLexicon, dict]:
    obj = json.loads(Path(path).read_text())
    return Vocabulary(obj["vocabulary"]), GestureLexicon.from_json(obj["lexicon"]), obj


def save_corpus(corpus: Corpus, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("train", "dev", "test"):
        write_dataset(corpus.split(name), out / f"{name}.gfsl")
    write_sidecar(corpus.vocab, corpus.lexicon, out / "meta.json",
                  {"corpus_config": asdict(corpus.config)})


def load_corpus(data_dir) -> Corpus:
    d = Path(data_dir)
    vocab, lexicon, meta = read_sidecar(d / "meta.json")
    cc = meta.get("corpus_config", {})
    if "frame_size" in cc:
        cc["frame_size"] = tuple(cc["frame_size"])
    cfg = CorpusConfig(**cc) if cc else CorpusConfig()
    return Corpus(read_dataset(d / "train.gfsl"), read_dataset(d / "dev.gfsl"),
                  read_dataset(d / "test.gfsl"), vocab, lexicon, cfg)
