"""Frame statistics and the two experiment tabulations (forwards, max part size)."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

FRAME_COLUMNS = [
    "scene", "strategy", "ranks", "mask", "spp", "bounces", "width", "height", "forwards_total",
    "shade_returns", "bytes_rays", "bytes_tiles", "max_rounds", "revisits", "dropped_nonfinite",
    "retrace_misses", "max_rank_memory", "rays_traced",
]


@dataclass
class FrameStats:
    rank_count: int = 1
    forwards_total: int = 0
    forwards_per_round: list = field(default_factory=list)
    shade_returns: int = 0
    bytes_rays: int = 0
    bytes_tiles: int = 0
    rounds_per_wavefront: list = field(default_factory=list)
    per_rank_ray_counts: list = field(default_factory=list)
    per_rank_memory: list = field(default_factory=list)
    dropped_nonfinite: int = 0
    retrace_misses: int = 0
    revisits: int = 0
    matrix_forwards: int = 0  # recount from the logged count matrices

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, text: str) -> FrameStats:
        return cls(**json.loads(text))

    @staticmethod
    def merge(parts: list[FrameStats]) -> FrameStats:
        """Combine per-rank records; round-structured fields are global and taken from rank 0."""
        first = parts[0]
        out = FrameStats(
            rank_count=first.rank_count,
            forwards_per_round=list(first.forwards_per_round),
            rounds_per_wavefront=list(first.rounds_per_wavefront),
            matrix_forwards=first.matrix_forwards,
            per_rank_memory=list(first.per_rank_memory),
        )
        for p in parts:
            out.forwards_total += p.forwards_total
            out.shade_returns += p.shade_returns
            out.bytes_rays += p.bytes_rays
            out.bytes_tiles += p.bytes_tiles
            out.dropped_nonfinite += p.dropped_nonfinite
            out.retrace_misses += p.retrace_misses
            out.revisits += p.revisits
            out.per_rank_ray_counts.append(sum(p.per_rank_ray_counts))
        return out

    @property
    def max_rounds(self) -> int:
        return max(self.rounds_per_wavefront, default=0)

    def row(self, **context) -> dict:
        r = dict(context)
        r.update(forwards_total=self.forwards_total, shade_returns=self.shade_returns, bytes_rays=self.bytes_rays,
                 bytes_tiles=self.bytes_tiles, max_rounds=self.max_rounds, revisits=self.revisits,
                 dropped_nonfinite=self.dropped_nonfinite, retrace_misses=self.retrace_misses,
                 max_rank_memory=max(self.per_rank_memory, default=0),
                 rays_traced=sum(self.per_rank_ray_counts))
        return r


def forwards_from_matrices(matrices) -> int:
    """Off-diagonal total over a sequence of count matrices."""
    total = 0
    for m in matrices:
        m = np.asarray(m)
        total += int(m.sum() - np.trace(m))
    return total


def write_csv(rows: list[dict], path_or_buf, columns=None):
    columns = columns or list(rows[0].keys())
    own = isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__")
    f = open(path_or_buf, "w", newline="") if own else path_or_buf
    try:
        w = csv.DictWriter(f, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)
    finally:
        if own:
            f.close()


def read_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# ---------------------------------------------------------------- experiments

def tabulate_max_part(scene, strategies, n_max: int, model=None) -> list[dict]:
    """One row per N with the largest-part estimate for each strategy."""
    from .partition import MemoryModel, max_part_size_curve

    model = model or MemoryModel()
    curves = {s: dict(max_part_size_curve(scene, s, model, n_max)) for s in strategies}
    return [dict(N=n, **{s: curves[s][n] for s in strategies}) for n in range(1, n_max + 1)]


def tabulate_forwards(scene, views: dict, strategies, rank_count: int, config=None) -> tuple[list[dict], dict]:
    """Render every (view, strategy) at 1 spp; return the wide table and per-cell stats.

    Each cell is checked against an independent recount from the transport
    layer's logged count matrices.
    """
    from dataclasses import replace

    from .engine import RenderConfig, render_inproc
    from .partition import partition

    config = replace(config or RenderConfig(), spp=1)
    plans = {s: partition(scene, rank_count, s) for s in strategies}
    rows, cells = [], {}
    for vname, cam in views.items():
        row = {"view": vname}
        for s in strategies:
            result = render_inproc(scene, plans[s], replace(config), camera=cam)
            st = result.stats
            if st.forwards_total != st.matrix_forwards:
                raise AssertionError(f"forward counters disagree for {vname}/{s}: "
                                     f"{st.forwards_total} vs {st.matrix_forwards}")
            row[s] = st.forwards_total
            cells[(vname, s)] = st
        rows.append(row)
    return rows, cells


def table_to_text(rows: list[dict]) -> str:
    buf = io.StringIO()
    write_csv(rows, buf)
    return buf.getvalue()
