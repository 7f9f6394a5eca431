"""Distributed wavefront path tracing."""

from .render import (FrameResult, InvariantViolation, RankFrame, RankRenderer, RenderConfig, Shader, make_primaries,
                     render_inproc, render_rank, tone_map)
from .image import read_accum, write_accum, write_image

__all__ = [
    "FrameResult", "InvariantViolation", "RankFrame", "RankRenderer", "RenderConfig", "Shader", "make_primaries",
    "render_inproc", "render_rank", "tone_map", "read_accum", "write_accum", "write_image",
]
