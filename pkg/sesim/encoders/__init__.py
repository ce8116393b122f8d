from __future__ import annotations

from ..errors import ConfigError
from .base import GraphEncoder, glorot_uniform
from .gcn import GcnEncoder, gcn_forward

_ENCODERS: dict[str, type[GraphEncoder]] = {GcnEncoder.name: GcnEncoder}


def get_encoder(name: str) -> type[GraphEncoder]:
    try:
        return _ENCODERS[name]
    except KeyError:
        raise ConfigError(f"unknown encoder {name!r}, available: {sorted(_ENCODERS)}") from None


__all__ = ["GcnEncoder", "GraphEncoder", "gcn_forward", "get_encoder", "glorot_uniform"]
