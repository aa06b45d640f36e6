"""
Run configuration

RunConfig carries every hyperparameter of a training/evaluation run.
Config files are flat `key = value` text; CLI `--set key=value` overrides
are applied on top.
"""

import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Dict, Iterable, Literal, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

load_dotenv()
logger = logging.getLogger(__name__)

# Process-level settings
OUTPUT_DIR = os.getenv('MESM_OUTPUT_DIR', 'runs')
DEVICE = os.getenv('MESM_DEVICE', 'cpu')
LOG_LEVEL = os.getenv('MESM_LOG_LEVEL', 'INFO')


class ConfigError(ValueError):
    """Bad config file line, unknown key or invalid value"""


class RunConfig(BaseModel):
    """All hyperparameters of a run"""
    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    # ===== ARCHITECTURE =====
    hidden_dim: int = Field(default=256, ge=1, description="Common dimension D")
    num_heads: int = Field(default=8, ge=1, description="Attention heads H")
    dropout: float = Field(default=0.1, ge=0.0, lt=1.0)
    fw_layers: int = Field(default=2, ge=0, description="FW-MESM depth")
    ss_layers: int = Field(default=4, ge=0, description="SS-MESM depth")
    ma_layers: int = Field(default=2, ge=0, description="Modality aligner depth")
    enc_layers: int = Field(default=2, ge=0, description="Transformer encoder depth")
    dec_layers: int = Field(default=2, ge=1, description="Span decoder depth")
    num_spans: int = Field(default=10, ge=1, description="Learnable spans N_span")
    use_positional_encoding: bool = True

    # ===== MODULE SWITCHES =====
    fw_enabled: bool = Field(default=True, description="Frame-word enhancement blocks present")
    mlm_enabled: bool = Field(default=True, description="Masked-word reconstruction pass and L_fw")
    ss_enabled: bool = Field(default=True, description="Segment-sentence complement token and L_ss")
    deep_supervision: bool = True

    # ===== FW-MESM =====
    mask_ratio: float = Field(default=1.0 / 3.0, gt=0.0, le=1.0, description="Fraction of words replaced by the mask embedding")
    mlm_scope: Literal["all_words", "masked_only"] = "all_words"

    # ===== SS-MESM =====
    gamma: float = Field(default=0.9, ge=0.0, le=1.0, description="Positive-set IoU gate")
    tau: float = Field(default=0.07, gt=0.0, description="Contrastive temperature")
    normalize_similarity: bool = True
    mean_over_tokens: bool = True
    cross_video_positives: bool = False
    ss_context_grad: bool = True

    # ===== LOSS WEIGHTS =====
    loss_l1: float = Field(default=10.0, ge=0.0)
    loss_iou: float = Field(default=1.0, ge=0.0)
    loss_ce: float = Field(default=4.0, ge=0.0)
    bg_weight: float = Field(default=0.1, ge=0.0)
    loss_fw: float = Field(default=1.0, ge=0.0)
    loss_ss: float = Field(default=1.0, ge=0.0)
    loss_enc: float = Field(default=1.0, ge=0.0)

    # ===== OPTIMIZATION =====
    lr: float = Field(default=1e-4, gt=0.0)
    weight_decay: float = Field(default=1e-4, ge=0.0)
    adam_beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    adam_beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    grad_clip: float = Field(default=0.1, ge=0.0, description="0 disables clipping")
    batch_size: int = Field(default=32, ge=1)
    epochs: int = Field(default=30, ge=1)
    max_steps: Optional[int] = Field(default=None, ge=1, description="Stop after this many steps")
    eval_every_epochs: int = Field(default=1, ge=1)
    seed: int = 2023

    # ===== DATA DIMENSIONS (filled from the dataset) =====
    video_dim: Optional[int] = Field(default=None, ge=1)
    text_dim: Optional[int] = Field(default=None, ge=1)
    vocab_size: Optional[int] = Field(default=None, ge=1)
    max_frames: Optional[int] = Field(default=None, ge=1, description="Pad frames to at least this length")
    max_words: Optional[int] = Field(default=None, ge=1, description="Pad words to at least this length")

    @model_validator(mode="after")
    def _check_heads(self):
        if self.hidden_dim % self.num_heads != 0:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} is not divisible by num_heads {self.num_heads}"
            )
        return self

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads


def config_hash(config: BaseModel) -> str:
    """SHA-256 of the canonical JSON dump"""
    payload = json.dumps(config.model_dump(mode="json"), sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def _parse_value(raw: str):
    value = raw.strip()
    if value.lower() in ("none", "null", ""):
        return None
    return value


def parse_key_values(lines: Iterable[str], source: str = "<overrides>") -> Dict[str, Optional[str]]:
    """Parse `key = value` lines; `#` starts a comment"""
    values: Dict[str, Optional[str]] = {}
    for lineno, line in enumerate(lines, start=1):
        line = line.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = line.split('=', 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        values[key] = _parse_value(raw)
    return values


def build_config(model_cls, file_path: Optional[str] = None, overrides: Iterable[str] = (),
                 base: Optional[BaseModel] = None):
    """
    Build a config model from an optional key=value file plus overrides

    Args:
        model_cls: RunConfig or another flat pydantic config
        file_path: path to a key=value config file
        overrides: iterable of "key=value" strings, applied last
        base: starting values (defaults when omitted)
    """
    values = base.model_dump() if base is not None else {}
    if file_path:
        path = Path(file_path)
        if not path.exists():
            raise ConfigError(f"config file not found: {file_path}")
        values.update(parse_key_values(path.read_text().splitlines(), source=str(path)))
    values.update(parse_key_values(overrides))

    unknown = sorted(set(values) - set(model_cls.model_fields))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    # unset values fall back to defaults
    values = {k: v for k, v in values.items()
              if v is not None or model_cls.model_fields[k].default is None}
    try:
        return model_cls.model_validate(values)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def load_run_config(file_path: Optional[str] = None, overrides: Iterable[str] = ()) -> RunConfig:
    return build_config(RunConfig, file_path, overrides)


def write_config_file(config: BaseModel, path) -> None:
    """Write every field as `key = value`"""
    lines = []
    for key, value in config.model_dump(mode="json").items():
        lines.append(f"{key} = {'none' if value is None else value}")
    Path(path).write_text("\n".join(lines) + "\n")
    logger.info(f"✅ Config written to {path}")
