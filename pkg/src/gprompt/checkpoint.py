"""Versioned plain-text checkpoints.

Layout::

    gprompt-checkpoint 1
    meta {"config": ..., "n_max": ..., ...}
    tensor head/head.0.weight 32 2
    <row of repr floats>
    ...
    end

Floats are written with ``repr`` so a save/load round trip is exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError
from .gnn import GinModel
from .trainer import LeapModel, TrainConfig

MAGIC = "gprompt-checkpoint"
VERSION = 1
SECTIONS = ("backbone", "head", "prompt", "policy")


@dataclass
class Checkpoint:
    meta: dict
    tensors: dict = field(default_factory=dict)  # section -> {name: array}

    @classmethod
    def from_model(cls, model: LeapModel, rng_state=None, extra=None):
        bb = model.backbone
        meta = {
            "config": model.config.to_dict(),
            "n_max": model.n_max,
            "num_classes": model.num_classes,
            "backbone": {"in_dim": bb.in_dim, "hidden": bb.hidden, "layers": bb.num_layers,
                         "dropout": bb.dropout, "learn_eps": bb.learn_eps},
            "rng_state": rng_state or {},
        }
        if extra:
            meta["extra"] = extra
        tensors = {
            "backbone": bb.state(),
            "head": model.head.state(),
            "prompt": model.prompt.state() if model.prompt is not None else {},
            "policy": model.policy.state(),
        }
        return cls(meta, tensors)

    def restore(self) -> LeapModel:
        arch = self.meta["backbone"]
        bb = GinModel(arch["in_dim"], arch["hidden"], arch["layers"], arch["dropout"], arch["learn_eps"])
        bb.load_state(self.tensors["backbone"])
        bb.freeze()
        cfg = TrainConfig(**self.meta["config"])
        model = LeapModel(bb, cfg, self.meta["num_classes"], self.meta["n_max"])
        model.restore({k: self.tensors[k] for k in ("head", "prompt", "policy")})
        return model

    def dumps(self) -> str:
        lines = [f"{MAGIC} {VERSION}", "meta " + json.dumps(self.meta, sort_keys=True)]
        for section in SECTIONS:
            for name, arr in sorted(self.tensors.get(section, {}).items()):
                a = np.atleast_2d(np.asarray(arr, dtype=np.float64))
                lines.append(f"tensor {section}/{name} {a.shape[0]} {a.shape[1]}")
                lines += [" ".join(repr(float(x)) for x in row) for row in a]
        lines.append("end")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "Checkpoint":
        lines = text.splitlines()
        if not lines or lines[0].split() != [MAGIC, str(VERSION)]:
            raise ParseError(f"expected header '{MAGIC} {VERSION}'", 1)
        if len(lines) < 2 or not lines[1].startswith("meta "):
            raise ParseError("expected meta record", 2)
        try:
            meta = json.loads(lines[1][5:])
        except json.JSONDecodeError as exc:
            raise ParseError(f"bad meta JSON: {exc}", 2) from exc
        tensors = {s: {} for s in SECTIONS}
        i = 2
        while i < len(lines):
            parts = lines[i].split()
            if parts == ["end"]:
                return cls(meta, tensors)
            if len(parts) != 4 or parts[0] != "tensor" or "/" not in parts[1]:
                raise ParseError(f"expected 'tensor <section>/<name> <rows> <cols>', got {lines[i]!r}", i + 1)
            section, name = parts[1].split("/", 1)
            if section not in tensors:
                raise ParseError(f"unknown section {section!r}", i + 1)
            rows, cols = int(parts[2]), int(parts[3])
            block = lines[i + 1:i + 1 + rows]
            if len(block) != rows:
                raise ParseError(f"tensor {parts[1]} is truncated", i + 1)
            try:
                vals = np.array([[float(x) for x in row.split()] for row in block], dtype=np.float64)
            except ValueError as exc:
                raise ParseError(f"non-numeric value in tensor {parts[1]}", i + 2) from exc
            if vals.shape != (rows, cols):
                raise ParseError(f"tensor {parts[1]} has shape {vals.shape}, header says {(rows, cols)}", i + 1)
            tensors[section][name] = vals
            i += 1 + rows
        raise ParseError("missing 'end' record", len(lines))


def save_checkpoint(path, checkpoint: Checkpoint):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(checkpoint.dumps())


def load_checkpoint(path) -> Checkpoint:
    with open(path, encoding="utf-8") as fh:
        return Checkpoint.loads(fh.read())
