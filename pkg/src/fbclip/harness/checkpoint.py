"""Checkpoints: a directory holding ``params.safetensors`` (the trainable
parameter map) and ``meta.json`` (run-config snapshot and step counter)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import torch
from safetensors.torch import load as st_load
from safetensors.torch import save as st_save

from .config import RunConfig

PARAMS = "params.safetensors"
META = "meta.json"
FORMAT = "fbclip-checkpoint/1"


@dataclass
class Checkpoint:
    params: dict
    config: RunConfig
    step: int = 0
    history: list = field(default_factory=list, compare=False, repr=False)

    @classmethod
    def from_head(cls, head, config, step=0):
        params = {k: v.detach().cpu().clone().contiguous() for k, v in head.state_dict().items()}
        return cls(params, config.copy(), step)

    def payload(self) -> bytes:
        return st_save(self.params)

    def save(self, path) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        (path / PARAMS).write_bytes(self.payload())
        meta = {"format": FORMAT, "step": self.step, "config": self.config.to_dict()}
        (path / META).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if path.is_file():
            path = path.parent
        meta = json.loads((path / META).read_text())
        if meta.get("format") != FORMAT:
            raise ValueError(f"{path} is not an fbclip checkpoint")
        params = st_load((path / PARAMS).read_bytes())
        return cls(params, RunConfig.from_dict(meta["config"]), int(meta["step"]))

    def load_into(self, head):
        head.load_state_dict(self.params, strict=True)
        return head

    def pipeline(self, backbone=None):
        from ..pipeline import Pipeline

        p = Pipeline(self.config, backbone)
        self.load_into(p.head)
        p.head.eval()
        return p
