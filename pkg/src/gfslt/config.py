"""Flat ``key = value`` training configuration shared by both stages."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .augment import AugmentPolicy
from .corpus import ConfigError, CorpusConfig
from .model import ModelConfig

TRANSFER_GROUPS = ("visual_embedding", "transformer_encoder", "text_decoder")


@dataclass(frozen=True)
class TrainConfig:
    # corpus
    vocab_size_gestures: int = 32
    sentence_len_min: int = 3
    sentence_len_max: int = 8
    frames_per_gesture: int = 4
    frame_height: int = 24
    frame_width: int = 24
    frame_channels: int = 1
    reorder_rule: str = "reverse"
    noise_std: float = 0.05
    path_length: float = 6.0
    n_train: int = 2000
    n_dev: int = 200
    n_test: int = 200
    data_seed: int = 0
    # model
    d_model: int = 128
    d_proj: int = 64
    heads: int = 4
    d_ff: int = 512
    enc_layers: int = 3
    text_enc_layers: int = 3
    dec_layers: int = 3
    cnn_channels: str = "8,16,32"
    tie_output: bool = False
    # optimiser (both stages)
    momentum: float = 0.9
    grad_clip: float = 5.0
    # stage 1
    pretrain_epochs: int = 40
    pretrain_batch: int = 16
    pretrain_lr_max: float = 0.01
    pretrain_lr_min: float = 1e-5
    mask_rate: float = 0.15
    loss_weight: float = 0.1
    aug_stage1: str = "strong"
    freeze_text_encoder: bool = False
    freeze_text_decoder: bool = False
    restoration_stop_grad: bool = False
    alternating_updates: bool = False
    # stage 2
    finetune_epochs: int = 200
    finetune_batch: int = 8
    finetune_lr_max: float = 0.01
    finetune_lr_min: float = 1e-5
    label_smoothing: float = 0.2
    aug_stage2: str = "strong"
    eval_interval: int = 1
    transfer_visual_embedding: str = "pretrained"
    transfer_transformer_encoder: str = "pretrained"
    transfer_text_decoder: str = "pretrained"
    freeze_visual_embedding: bool = False
    freeze_transformer_encoder: bool = False
    freeze_decoder: bool = False
    # decoding
    beam_size: int = 5
    length_penalty: float = 1.0
    max_decode_len: int = 0  # 0: 2 x longest training sentence + 2
    eval_crop: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        self.corpus_config().validate()
        self.model_config(self.vocab_size_gestures + 5)
        for name in ("aug_stage1", "aug_stage2"):
            AugmentPolicy.preset(getattr(self, name))
        for g in TRANSFER_GROUPS:
            if getattr(self, f"transfer_{g}") not in ("pretrained", "random"):
                raise ConfigError(f"transfer_{g} must be 'pretrained' or 'random'")
        if self.pretrain_batch < 2:
            raise ConfigError("pretrain_batch must be >= 2 (contrastive loss needs negatives)")
        if self.finetune_batch < 1:
            raise ConfigError("finetune_batch must be >= 1")
        if not 0 < self.mask_rate < 1:
            raise ConfigError("mask_rate must be in (0, 1)")
        if self.loss_weight < 0:
            raise ConfigError("loss_weight must be >= 0")
        if not 0 <= self.label_smoothing < 1:
            raise ConfigError("label_smoothing must be in [0, 1)")
        if self.beam_size < 1:
            raise ConfigError("beam_size must be >= 1")
        if self.length_penalty < 0:
            raise ConfigError("length_penalty must be >= 0")
        if min(self.pretrain_epochs, self.finetune_epochs) < 0 or self.eval_interval < 1:
            raise ConfigError("epoch counts must be >= 0 and eval_interval >= 1")
        for lo, hi in (("pretrain_lr_min", "pretrain_lr_max"), ("finetune_lr_min", "finetune_lr_max")):
            if not 0 <= getattr(self, lo) <= getattr(self, hi):
                raise ConfigError(f"need 0 <= {lo} <= {hi}")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")

    # derived views
    def corpus_config(self) -> CorpusConfig:
        return CorpusConfig(
            vocab_size_gestures=self.vocab_size_gestures, sentence_len_min=self.sentence_len_min,
            sentence_len_max=self.sentence_len_max, frames_per_gesture=self.frames_per_gesture,
            frame_size=(self.frame_height, self.frame_width, self.frame_channels),
            reorder_rule=self.reorder_rule, noise_std=self.noise_std, path_length=self.path_length,
            n_train=self.n_train, n_dev=self.n_dev, n_test=self.n_test, seed=self.data_seed)

    def model_config(self, vocab_size: int) -> ModelConfig:
        try:
            channels = tuple(int(c) for c in self.cnn_channels.split(","))
        except ValueError:
            raise ConfigError(f"cnn_channels must be comma-separated ints, got {self.cnn_channels!r}") from None
        try:
            return ModelConfig(vocab_size=vocab_size, channels=self.frame_channels,
                               d_model=self.d_model, d_proj=self.d_proj, heads=self.heads,
                               d_ff=self.d_ff, enc_layers=self.enc_layers,
                               text_enc_layers=self.text_enc_layers, dec_layers=self.dec_layers,
                               cnn_channels=channels, tie_output=self.tie_output)
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def policy(self, stage: int) -> AugmentPolicy:
        name = self.aug_stage1 if stage == 1 else self.aug_stage2
        pol = AugmentPolicy.preset(name, seed=self.seed * 2 + stage)
        return replace(pol, eval_crop=self.eval_crop)

    def eval_policy(self) -> AugmentPolicy:
        return AugmentPolicy(eval_crop=self.eval_crop)

    def transfer_sources(self) -> dict[str, str]:
        return {g: getattr(self, f"transfer_{g}") for g in TRANSFER_GROUPS}

    def stage2_frozen(self) -> set[str]:
        out = set()
        if self.freeze_visual_embedding:
            out.add("visual_embedding")
        if self.freeze_transformer_encoder:
            out.add("transformer_encoder")
        if self.freeze_decoder:
            out.add("text_decoder")
        return out

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    def with_overrides(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _coerce(key: str, raw: str):
    typ = _FIELD_TYPES[key]
    raw = raw.strip()
    if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "\"'":
        raw = raw[1:-1]
    try:
        if typ == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return low in ("true", "1", "yes")
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ}") from None


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse ``key = value`` lines (``#`` comments); unknown keys are rejected."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _coerce(key, raw)
    return replace(base or TrainConfig(), **values)


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text())
