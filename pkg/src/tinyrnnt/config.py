"""Run configuration: INI sections with documented defaults and strict keys.

Sections are [global], [model], [loss], [decode], [data], [eval].  Any CLI
argument of the form --section.key=value overrides the corresponding key.
Unknown sections or keys are rejected at load time.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields

from .core import UsageError

# INI key -> dataclass attribute renames ("lambda" is reserved in Python)
_KEY_TO_ATTR = {"lambda": "lam"}
_ATTR_TO_KEY = {v: k for k, v in _KEY_TO_ATTR.items()}


@dataclass
class GlobalSection:
    seed: int = 0
    threads: int = 1
    trace: bool = False


@dataclass
class ModelSection:
    d_in: int = 8
    d_enc: int = 32
    d_pred: int = 32
    d_joint: int = 32
    d_emb: int = 8


@dataclass
class LossSection:
    alpha: float = 0.125
    beta: float = 0.125
    eta: float = 0.2
    lr: float = 0.0001
    epochs: int = 10
    batch_size: int = 16
    clip_norm: float = 5.0


@dataclass
class DecodeSection:
    strategy: str = "baseline"
    beam_width: int = 4
    max_symbols: int = 0  # 0 -> 2 * frame count
    nbest: int = 1
    lam: float | None = None  # required for adaptlmd / static_discount
    rho: float | None = None  # required for adaptlmd
    p_roll_init: float = 1.0
    static_mode: bool = False
    ema: bool = False
    fusion_mu: float = 0.0
    fusion_nu: float = 0.0
    src_lm: str = ""
    tgt_lm: str = ""


@dataclass
class DataSection:
    vocab: str = "vocab.txt"
    train: str = "train.jsonl"
    dev: str = "dev.jsonl"
    test: str = "test.jsonl"
    utterances: int = 500
    words_per_utt_min: int = 2
    words_per_utt_max: int = 3
    frames_per_char: int = 3
    noise_sigma: float = 0.3
    zipf_s: float = 1.1
    rare_prob: float = 0.05
    chars: str = ""  # empty -> shipped default inventory
    common_words: str = ""  # comma separated
    rare_words: str = ""
    domains: str = ""  # name:w1|w2;name2:w3|w4
    d_feat: int = 8
    split_train: float = 0.8
    split_dev: float = 0.1
    split_test: float = 0.1
    holdout_domain: str = ""


@dataclass
class EvalSection:
    threshold: int = 20
    g2p: str = ""
    per_utterance: bool = False


@dataclass
class RunConfig:
    global_: GlobalSection = field(default_factory=GlobalSection)
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossSection = field(default_factory=LossSection)
    decode: DecodeSection = field(default_factory=DecodeSection)
    data: DataSection = field(default_factory=DataSection)
    eval: EvalSection = field(default_factory=EvalSection)


_SECTIONS = {
    "global": "global_",
    "model": "model",
    "loss": "loss",
    "decode": "decode",
    "data": "data",
    "eval": "eval",
}


def _parse_value(raw: str, ftype, key: str):
    raw = raw.strip()
    if ftype in (int, "int"):
        return int(raw)
    if ftype in (float, "float"):
        return float(raw)
    if ftype in (bool, "bool"):
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise UsageError(f"key {key}: expected a boolean, got {raw!r}")
    if ftype in (str, "str"):
        return raw
    # optional float: empty -> None
    if raw == "":
        return None
    return float(raw)


def _field_types(section) -> dict[str, object]:
    out = {}
    for f in fields(section):
        if f.type in ("int", "float", "bool", "str", int, float, bool, str):
            out[f.name] = f.type
        else:
            out[f.name] = "optional_float"
    return out


def set_key(cfg: RunConfig, section_name: str, key: str, raw: str) -> None:
    if section_name not in _SECTIONS:
        raise UsageError(f"unknown config section [{section_name}]")
    section = getattr(cfg, _SECTIONS[section_name])
    attr = _KEY_TO_ATTR.get(key, key)
    types = _field_types(section)
    if attr not in types:
        raise UsageError(f"unknown config key {section_name}.{key}")
    setattr(section, attr, _parse_value(raw, types[attr], f"{section_name}.{key}"))


def load_config(path) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise UsageError(f"config {path} is malformed: {exc}") from exc
    cfg = RunConfig()
    for section_name in parser.sections():
        if section_name not in _SECTIONS:
            raise UsageError(f"{path}: unknown config section [{section_name}]")
        for key, raw in parser.items(section_name):
            set_key(cfg, section_name, key, raw)
    return cfg


def apply_overrides(cfg: RunConfig, overrides) -> None:
    """Apply --section.key=value strings in order."""
    for item in overrides:
        body = item[2:] if item.startswith("--") else item
        if "=" not in body or "." not in body.split("=", 1)[0]:
            raise UsageError(f"override {item!r} must look like --section.key=value")
        dotted, raw = body.split("=", 1)
        section_name, key = dotted.split(".", 1)
        set_key(cfg, section_name, key, raw)


def _format_value(val) -> str:
    if val is None:
        return ""
    if isinstance(val, bool):
        return "true" if val else "false"
    if isinstance(val, float):
        return repr(val)
    return str(val)


def save_config(cfg: RunConfig, path) -> None:
    """Echo the effective config (defaults resolved) as INI."""
    lines = []
    for section_name, attr in _SECTIONS.items():
        section = getattr(cfg, attr)
        lines.append(f"[{section_name}]")
        for f in fields(section):
            key = _ATTR_TO_KEY.get(f.name, f.name)
            lines.append(f"{key} = {_format_value(getattr(section, f.name))}")
        lines.append("")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines))


def config_equal(a: RunConfig, b: RunConfig) -> bool:
    return dataclasses.asdict(a) == dataclasses.asdict(b)
