"""Rank groups, collectives and the path-record wire format."""

from .group import (OP_COUNTS, OP_GATHER, OP_PROXYSET, OP_RAYS, OP_SCENEHASH, OP_TILES, ProtocolError, RankGroup,
                    TransportError, TransportStats, tile_rows)
from .inproc import InProcGroup, InProcHub, run_ranks
from .sockets import HeadNode, SocketGroup, free_ports, parse_address
from .wire import (FLAG_COMPLETE, FLAG_MEDIUM, FLAG_SHADOW, FORMATS, PIXEL_MASK, PathRecord, RayBatch, WireError,
                   WireFormat, decode, decode_records, encode, encode_records, quantize_f32, quantize_half, to_half)

__all__ = [
    "OP_COUNTS", "OP_GATHER", "OP_PROXYSET", "OP_RAYS", "OP_SCENEHASH", "OP_TILES", "ProtocolError", "RankGroup",
    "TransportError", "TransportStats", "tile_rows", "InProcGroup", "InProcHub", "run_ranks", "HeadNode",
    "SocketGroup", "free_ports", "parse_address", "FLAG_COMPLETE", "FLAG_MEDIUM", "FLAG_SHADOW", "FORMATS",
    "PIXEL_MASK", "PathRecord", "RayBatch", "WireError", "WireFormat", "decode", "decode_records", "encode",
    "encode_records", "quantize_f32", "quantize_half", "to_half",
]
