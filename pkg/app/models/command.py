# app/models/command.py
from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, Field

Verb = Literal["train", "eval", "export", "inspect", "selfcheck", "ablate"]


# ----------------------------
# CLI 한 번 호출 = verb 하나
# ----------------------------
class Command(BaseModel):
    verb: Verb
    config: Optional[str] = None        # key=value 학습 설정 파일
    checkpoint: Optional[str] = None
    out: Optional[str] = None
    packed: Optional[str] = None        # eval --packed <packed model>
    bits_w: Optional[int] = Field(None, ge=1, le=8)
    bits_a: Optional[int] = Field(None, ge=1, le=8)
    seed: Optional[int] = None
    epochs: Optional[int] = Field(None, gt=0)
    weights: bool = False               # inspect --weights
    quick: bool = False                 # selfcheck --quick

    model_config = {"extra": "forbid"}

    def overrides(self) -> dict:
        """Flags that take precedence over config-file keys."""
        values = {"bits_w": self.bits_w, "bits_a": self.bits_a, "seed": self.seed, "epochs": self.epochs}
        return {k: v for k, v in values.items() if v is not None}
