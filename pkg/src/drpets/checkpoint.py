"""Versioned plain-text checkpoints for ensemble models.

Every float is written as decimal with 17 significant digits, which is
enough to round-trip IEEE doubles exactly, so load -> save reproduces the
file byte for byte and two identical models always serialize identically.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .ensemble import EnsembleModel, MLPParams, NormStats

_MAGIC = "drpets-checkpoint v1"


def _fmt(values: np.ndarray) -> str:
    return " ".join(format(v, ".17g") for v in np.asarray(values, dtype=float).ravel())


def _parse_floats(line: str, expect: int) -> np.ndarray:
    out = np.array([float(tok) for tok in line.split()])
    if out.size != expect:
        raise ValueError(f"expected {expect} floats, found {out.size}")
    return out


def save_checkpoint(model: EnsembleModel, path) -> None:
    member0 = model.members[0]
    lines = [
        _MAGIC,
        f"obs_dim {model.obs_dim}",
        f"act_dim {model.act_dim}",
        f"members {model.size}",
        "hidden " + " ".join(str(h) for h in member0.hidden),
        f"activation {member0.activation}",
        "input_mean " + _fmt(model.norm.input_mean),
        "input_std " + _fmt(model.norm.input_std),
        "target_mean " + _fmt(model.norm.target_mean),
        "target_std " + _fmt(model.norm.target_std),
    ]
    for b, member in enumerate(model.members):
        lines.append(f"member {b}")
        for l, (w, bias) in enumerate(zip(member.weights, member.biases)):
            lines.append(f"layer {l} {w.shape[0]} {w.shape[1]}")
            for row in w:
                lines.append(_fmt(row))
            lines.append(_fmt(bias))
    lines.append("end")
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path) -> EnsembleModel:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != _MAGIC:
        raise ValueError(f"{path}: not a {_MAGIC} file")
    it = iter(lines[1:])

    def field(name: str) -> str:
        line = next(it)
        key, _, rest = line.partition(" ")
        if key != name:
            raise ValueError(f"{path}: expected field {name!r}, found {key!r}")
        return rest

    obs_dim = int(field("obs_dim"))
    act_dim = int(field("act_dim"))
    members = int(field("members"))
    hidden = tuple(int(tok) for tok in field("hidden").split())
    activation = field("activation")
    in_dim = obs_dim + act_dim
    norm = NormStats(
        input_mean=_parse_floats(field("input_mean"), in_dim),
        input_std=_parse_floats(field("input_std"), in_dim),
        target_mean=_parse_floats(field("target_mean"), obs_dim),
        target_std=_parse_floats(field("target_std"), obs_dim),
    )
    dims = [in_dim, *hidden, 2 * obs_dim]
    nets = []
    for b in range(members):
        if field("member") != str(b):
            raise ValueError(f"{path}: member blocks out of order")
        weights, biases = [], []
        for l in range(len(dims) - 1):
            shape = field("layer").split()
            if [int(shape[0])] != [l] or (int(shape[1]), int(shape[2])) != (dims[l], dims[l + 1]):
                raise ValueError(f"{path}: layer descriptor mismatch in member {b}")
            w = np.stack([_parse_floats(next(it), dims[l + 1]) for _ in range(dims[l])])
            weights.append(w)
            biases.append(_parse_floats(next(it), dims[l + 1]))
        nets.append(MLPParams(weights, biases, hidden, activation))
    if next(it) != "end":
        raise ValueError(f"{path}: missing end marker")
    return EnsembleModel(nets, norm, obs_dim, act_dim)
