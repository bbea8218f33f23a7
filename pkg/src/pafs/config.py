"""Flat dotted-key run configuration (``loss.lambda = 0.3``).

Every key has a default whose type drives parsing. Unknown keys are
rejected, and ``validate`` checks cross-module invariants before any work
starts.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Any, Iterable, Mapping

from .errors import ConfigError

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    # audio pipeline
    "data.manifest": "",
    "data.root": "",
    "audio.sample_rate": 16000,
    "audio.segment_seconds": 5.0,
    "audio.n_fft": 512,
    "audio.win_length": 400,
    "audio.hop_length": 160,
    "audio.n_mels": 64,
    "audio.log_eps": 1e-10,
    "audio.min_samples_per_class": 0,
    "audio.max_duration": 0.0,
    # synthetic corpus
    "synth.n_classes": 25,
    "synth.clips_per_class": 30,
    "synth.duration_s": 5.0,
    "synth.noise_level": 0.1,
    "synth.f_low": 120.0,
    "synth.f_high": 2400.0,
    # augmentation
    "aug.time_mask_max": 20,
    "aug.freq_mask_max": 8,
    "aug.warp_w": 5,
    "aug.eval_augment": True,
    # episodes
    "episode.n_way": 5,
    "episode.k_shot": 5,
    "episode.q_queries": 5,
    "episode.seed": 0,
    # model
    "model.conv_channels": [64, 64, 64, 64],
    "model.rnn_hidden": 64,
    "model.rnn_cell": "gru",
    "model.pooling": "last",
    "model.fusion_ff_dim": 256,
    "model.fusion_layer_norm": True,
    "model.proj_hidden": 128,
    "model.proj_dim": 64,
    "contrastive.project_queries": True,
    # losses
    "loss.kind": "fs+apl",
    "loss.lambda": 0.3,
    "fs.squared": True,
    "fs.literal_prefactor": False,
    "cpl.temperature": 0.1,
    "cpl.m": 10,
    "apl.alpha_deg": 15.0,
    "apl.anchor_mode": "prototypes",
    # training
    "train.epochs": 200,
    "train.episodes_per_epoch": 100,
    "train.lr": 1e-3,
    "train.milestones": [100, 150],
    "train.gamma": 0.1,
    "train.val_episodes": 200,
    # evaluation
    "eval.split": "test",
    "eval.n_tasks": 2000,
    "eval.shots": [1, 3, 5, 7],
    "eval.seeds": [0],
}

CHOICES = {
    "model.rnn_cell": ("gru", "rnn"),
    "model.pooling": ("last", "mean"),
    "loss.kind": ("fs", "fs+cpl", "fs+apl"),
    "apl.anchor_mode": ("prototypes", "all"),
    "eval.split": ("train", "val", "test"),
}


def _parse_bool(key: str, text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {text!r}")


def parse_value(key: str, text: str) -> Any:
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    default = DEFAULTS[key]
    text = text.strip()
    try:
        if isinstance(default, bool):
            return _parse_bool(key, text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, list):
            return [int(v) for v in text.replace(",", " ").split()]
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r} ({exc})") from None
    return text


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


class RunConfig(Mapping[str, Any]):
    def __init__(self, values: Mapping[str, Any] | None = None):
        self._values = dict(DEFAULTS)
        for k, v in (values or {}).items():
            if k not in DEFAULTS:
                raise ConfigError(f"unknown config key {k!r}")
            self._values[k] = v

    def __getitem__(self, key):
        return self._values[key]

    def __iter__(self):
        return iter(self._values)

    def __len__(self):
        return len(self._values)

    def updated(self, overrides: Mapping[str, Any]) -> "RunConfig":
        merged = dict(self._values)
        merged.update(overrides)
        return RunConfig(merged)

    def to_text(self) -> str:
        return "".join(f"{k} = {format_value(v)}\n" for k, v in sorted(self._values.items()))

    def to_dict(self) -> dict[str, Any]:
        return dict(self._values)

    # typed views -------------------------------------------------------

    def mel(self):
        from .audio import MelConfig
        return MelConfig(sample_rate=self["audio.sample_rate"], n_fft=self["audio.n_fft"],
                         win_length=self["audio.win_length"], hop_length=self["audio.hop_length"],
                         n_mels=self["audio.n_mels"], log_eps=self["audio.log_eps"])

    def segment_frames(self) -> int:
        seg = int(round(self["audio.segment_seconds"] * self["audio.sample_rate"]))
        return self.mel().n_frames(seg)

    def augment(self):
        from .specaugment import AugmentConfig
        return AugmentConfig(self["aug.time_mask_max"], self["aug.freq_mask_max"],
                             self["aug.warp_w"], self["aug.eval_augment"])

    def model(self):
        from .model import ModelConfig
        return ModelConfig(
            n_mels=self["audio.n_mels"], n_frames=self.segment_frames(),
            conv_channels=tuple(self["model.conv_channels"]), rnn_hidden=self["model.rnn_hidden"],
            rnn_cell=self["model.rnn_cell"], pooling=self["model.pooling"],
            fusion_ff_dim=self["model.fusion_ff_dim"],
            fusion_layer_norm=self["model.fusion_layer_norm"],
            proj_hidden=self["model.proj_hidden"], proj_dim=self["model.proj_dim"],
            project_queries=self["contrastive.project_queries"])

    def synth(self):
        from .episodes import SynthSpec
        return SynthSpec(n_classes=self["synth.n_classes"],
                         clips_per_class=self["synth.clips_per_class"],
                         duration_s=self["synth.duration_s"], noise_level=self["synth.noise_level"],
                         f_low=self["synth.f_low"], f_high=self["synth.f_high"],
                         rng_seed=self["seed"], sample_rate=self["audio.sample_rate"])

    def validate(self) -> "RunConfig":
        v = self._values
        for key, choices in CHOICES.items():
            if v[key] not in choices:
                raise ConfigError(f"{key}: {v[key]!r} not in {choices}")
        positive = ["audio.sample_rate", "audio.n_fft", "audio.win_length", "audio.hop_length",
                    "audio.n_mels", "audio.segment_seconds", "audio.log_eps",
                    "episode.n_way", "episode.k_shot", "episode.q_queries",
                    "model.rnn_hidden", "model.fusion_ff_dim", "model.proj_hidden",
                    "model.proj_dim", "cpl.temperature", "cpl.m", "train.epochs",
                    "train.episodes_per_epoch", "train.val_episodes", "eval.n_tasks",
                    "synth.n_classes", "synth.clips_per_class", "synth.duration_s"]
        for key in positive:
            if not v[key] > 0:
                raise ConfigError(f"{key} must be positive, got {v[key]!r}")
        nonneg = ["seed", "episode.seed", "aug.time_mask_max", "aug.freq_mask_max", "aug.warp_w",
                  "loss.lambda", "synth.noise_level", "audio.min_samples_per_class",
                  "audio.max_duration", "train.lr"]
        for key in nonneg:
            if v[key] < 0:
                raise ConfigError(f"{key} must be non-negative, got {v[key]!r}")
        if v["audio.win_length"] > v["audio.n_fft"]:
            raise ConfigError("audio.win_length must not exceed audio.n_fft")
        if not 0 < v["train.gamma"] <= 1:
            raise ConfigError("train.gamma must lie in (0, 1]")
        if not 0 <= v["apl.alpha_deg"] < 90:
            raise ConfigError("apl.alpha_deg must lie in [0, 90)")
        if any(s < 1 for s in v["eval.shots"]) or not v["eval.shots"]:
            raise ConfigError("eval.shots must be a non-empty list of positive counts")
        if not v["eval.seeds"] or any(s < 0 for s in v["eval.seeds"]):
            raise ConfigError("eval.seeds must be a non-empty list of non-negative seeds")
        if not v["model.conv_channels"] or any(c < 1 for c in v["model.conv_channels"]):
            raise ConfigError("model.conv_channels must list positive channel counts")
        if v["episode.q_queries"] < 1:
            raise ConfigError("episode.q_queries must be at least 1")
        fused = 4 * v["model.rnn_hidden"]
        if not v["contrastive.project_queries"] and v["model.proj_dim"] != fused:
            raise ConfigError("contrastive.project_queries=false needs model.proj_dim == "
                              f"4 * model.rnn_hidden ({fused})")
        try:
            self.model().validate()
            n_mels, n_frames = v["audio.n_mels"], self.segment_frames()
            self.augment().validate(n_mels, n_frames)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self


def parse_text(text: str, source: str = "<config>") -> dict[str, Any]:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        values[key] = parse_value(key, val)
    return values


def parse_overrides(pairs: Iterable[str]) -> dict[str, Any]:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} must look like key=value")
        key, val = pair.split("=", 1)
        out[key.strip()] = parse_value(key.strip(), val)
    return out


def load_config(path=None, overrides: Mapping[str, Any] | None = None,
                env: Mapping[str, str] | None = None,
                base: Mapping[str, Any] | None = None) -> RunConfig:
    """``base`` (defaults if omitted), then file values, then ``PAFS_SEED`` from
    the environment, then CLI overrides."""
    values: dict[str, Any] = dict(base or {})
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} not found")
        values.update(parse_text(p.read_text(), str(p)))
    env = os.environ if env is None else env
    if env.get("PAFS_SEED"):
        values["seed"] = parse_value("seed", env["PAFS_SEED"])
    values.update(overrides or {})
    return RunConfig(values).validate()
