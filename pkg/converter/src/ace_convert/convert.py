"""Name-mapped conversion between PyTorch state dicts and ACET containers.

Name maps are explicit, ordered rule lists loaded from JSON; nothing is
inferred, so the tensors selected for merging stay auditable.  A source
tensor may match at most one rule; unmatched tensors are skipped with a
warning in the returned summary.
"""

from __future__ import annotations

import json
import re
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .acet import AcetError, read_acet, write_acet

DTYPE_POLICIES = ("keep", "force-f32")


class MapError(ValueError):
    """Invalid name map or a mapping collision."""


@dataclass(frozen=True)
class NameMap:
    """Ordered (pattern, template) rules plus a dtype policy.

    Patterns are full-match regular expressions over source tensor names;
    templates may use backreferences (``\\1`` or ``\\g<name>``).
    """

    rules: tuple[tuple[str, str], ...]
    dtype_policy: str = "keep"

    def __post_init__(self):
        if self.dtype_policy not in DTYPE_POLICIES:
            raise MapError(f"dtype policy must be one of {DTYPE_POLICIES}, got {self.dtype_policy!r}")
        compiled = []
        for pattern, template in self.rules:
            try:
                compiled.append((re.compile(pattern), template))
            except re.error as exc:
                raise MapError(f"invalid pattern {pattern!r}: {exc}") from exc
        object.__setattr__(self, "_compiled", tuple(compiled))

    @classmethod
    def identity(cls, dtype_policy: str = "keep") -> "NameMap":
        return cls(rules=((r"(.*)", r"\1"),), dtype_policy=dtype_policy)

    @classmethod
    def load(cls, path) -> "NameMap":
        with open(path) as fh:
            payload = json.load(fh)
        if not isinstance(payload, dict) or "rules" not in payload:
            raise MapError("map file must be a JSON object with a 'rules' list")
        rules = []
        for rule in payload["rules"]:
            if not isinstance(rule, dict) or "pattern" not in rule or "template" not in rule:
                raise MapError("each rule needs 'pattern' and 'template' keys")
            rules.append((rule["pattern"], rule["template"]))
        return cls(rules=tuple(rules), dtype_policy=payload.get("dtype_policy", "keep"))

    def apply(self, name: str) -> str | None:
        """Mapped name, or None when no rule matches.

        Raises MapError when more than one rule matches: rule sets must be
        unambiguous for the conversion to stay auditable.
        """
        matches = []
        for regex, template in self._compiled:
            m = regex.fullmatch(name)
            if m:
                matches.append(m.expand(template))
        if len(matches) > 1:
            raise MapError(f"tensor {name!r} matches more than one rule")
        return matches[0] if matches else None


@dataclass
class ConversionSummary:
    exported: list[tuple[str, str]] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    total_bytes: int = 0

    def to_json(self) -> dict:
        return {
            "exported": [list(pair) for pair in self.exported],
            "skipped": list(self.skipped),
            "total_bytes": self.total_bytes,
        }


def _map_names(names, name_map: NameMap, summary: ConversionSummary) -> dict[str, str]:
    mapping: dict[str, str] = {}
    used: dict[str, str] = {}
    for name in names:
        target = name_map.apply(name)
        if target is None:
            summary.skipped.append(name)
            warnings.warn(f"skipping unmatched tensor {name!r}", stacklevel=3)
            continue
        if target in used:
            raise MapError(f"name collision: {used[target]!r} and {name!r} both map to {target!r}")
        used[target] = name
        mapping[name] = target
    return mapping


def _load_state_dict(path) -> dict[str, torch.Tensor]:
    state = torch.load(path, map_location="cpu", weights_only=True)
    if isinstance(state, dict) and "state_dict" in state and isinstance(state["state_dict"], dict):
        state = state["state_dict"]
    if not isinstance(state, dict) or not all(isinstance(v, torch.Tensor) for v in state.values()):
        raise MapError(f"{path} does not hold a flat state dict of tensors")
    return state


def _to_numpy(name: str, tensor: torch.Tensor, policy: str) -> np.ndarray:
    if policy == "force-f32":
        return tensor.detach().to(torch.float32).numpy()
    if tensor.dtype == torch.float32 or tensor.dtype == torch.float64:
        return tensor.detach().numpy()
    raise MapError(
        f"tensor {name!r} has dtype {tensor.dtype}; the container holds f32/f64 only"
        " (use dtype policy 'force-f32' to cast)"
    )


def export_to_acet(checkpoint_path, name_map: NameMap, out_path) -> ConversionSummary:
    """Export a PyTorch checkpoint to an ACET v1 container."""
    state = _load_state_dict(checkpoint_path)
    summary = ConversionSummary()
    mapping = _map_names(sorted(state), name_map, summary)
    tensors = {
        target: _to_numpy(source, state[source], name_map.dtype_policy)
        for source, target in mapping.items()
    }
    summary.exported = sorted(mapping.items())
    summary.total_bytes = write_acet(tensors, out_path)
    return summary


def import_from_acet(acet_path, name_map: NameMap, out_path) -> ConversionSummary:
    """Import an ACET v1 container into a torch.save state dict."""
    tensors, _ = read_acet(acet_path)
    summary = ConversionSummary()
    mapping = _map_names(sorted(tensors), name_map, summary)
    state: dict[str, torch.Tensor] = {}
    for source, target in mapping.items():
        tensor = torch.from_numpy(tensors[source])
        if name_map.dtype_policy == "force-f32":
            tensor = tensor.to(torch.float32)
        state[target] = tensor
    summary.exported = sorted(mapping.items())
    torch.save(state, out_path)
    summary.total_bytes = sum(t.numel() * t.element_size() for t in state.values())
    return summary


__all__ = [
    "AcetError",
    "ConversionSummary",
    "MapError",
    "NameMap",
    "export_to_acet",
    "import_from_acet",
]
