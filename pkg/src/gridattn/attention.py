"""Grid-partitioned attention: exact attention, greedy key relevance, the
two-phase sparse forward pass, and predicted cost accounting.

The approximation works in two phases. Phase 1 downsamples queries and keys
by a factor d, computes the full low-resolution affinity, partitions the
query grid into m cells, and keeps the kappa most relevant keys per cell.
Phase 2 upsamples those key indices back to the original resolution, gathers
the corresponding key/value columns into a small per-cell dictionary, and
runs exact attention per cell before composing the output.

With kappa equal to the full low-resolution key count the result matches
exact attention (every key is gathered); with a single partition cell all
queries share one global relevant key set.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, ShapeError
from .spatial import (
    IndexStructure,
    Partitioning,
    compose,
    downsample,
    partition_grid_indices,
    upsample_indices,
)
from .tensor import ImageTensor, Matrix, softmax_columns_inplace
from .tracking import active_tracker, note_alloc, note_free

# A column-stochastic keys x queries matrix: every column is the softmax
# distribution of one query over the keys.
AffinityMatrix = Matrix


@dataclass(frozen=True)
class GpaConfig:
    """Hyper-parameters of the sparse pass.

    d is the downsampling factor for phase 1, (m_h, m_w) the partition grid
    of the query plane, kappa the number of low-resolution keys kept per
    cell. scaled enables the optional 1/sqrt(c_k) score temperature; the
    default follows the unscaled formulation.
    """

    d: int
    m_h: int
    m_w: int
    kappa: int
    scaled: bool = False

    def __post_init__(self):
        if self.d < 1 or self.m_h < 1 or self.m_w < 1 or self.kappa < 1:
            raise ConfigError(
                f"d, m_h, m_w, kappa must be positive, got d={self.d}, "
                f"m={self.m_h}x{self.m_w}, kappa={self.kappa}"
            )

    @classmethod
    def with_square_m(cls, d: int, m: int, kappa: int, scaled: bool = False) -> "GpaConfig":
        """Scalar cell counts are accepted only when a square grid exists."""
        root = math.isqrt(m)
        if root * root != m:
            raise ConfigError(f"scalar m={m} has no square factorization; pass m_h and m_w")
        return cls(d, root, root, kappa, scaled)

    @property
    def m(self) -> int:
        return self.m_h * self.m_w

    def low_shape(self, h: int, w: int) -> tuple[int, int]:
        return h // self.d, w // self.d

    def validate_for(self, h: int, w: int) -> None:
        if h % self.d or w % self.d:
            raise ConfigError(f"downsampling factor {self.d} does not divide input shape {h}x{w}")
        h_lo, w_lo = self.low_shape(h, w)
        if h_lo % self.m_h or w_lo % self.m_w:
            raise ConfigError(
                f"partition grid {self.m_h}x{self.m_w} does not divide "
                f"low-resolution shape {h_lo}x{w_lo}"
            )
        if self.kappa > h_lo * w_lo:
            raise ConfigError(
                f"kappa={self.kappa} exceeds the {h_lo * w_lo} available low-resolution keys"
            )

    def is_exact_for(self, h: int, w: int) -> bool:
        h_lo, w_lo = self.low_shape(h, w)
        return self.kappa == h_lo * w_lo


def config_id(cfg: GpaConfig, h: int, w: int) -> str:
    """Configuration name GPA{m}_{kappa}_{s}, s being the phase-1 resolution."""
    return f"GPA{cfg.m}_{cfg.kappa}_{h // cfg.d}"


def format_config_text(cfg: GpaConfig) -> str:
    """Render a config as key=value lines."""
    return (
        f"d={cfg.d}\nm_h={cfg.m_h}\nm_w={cfg.m_w}\n"
        f"kappa={cfg.kappa}\nscaled={'true' if cfg.scaled else 'false'}\n"
    )


def parse_config_text(text: str) -> GpaConfig:
    """Parse key=value lines (d, m_h, m_w, kappa, scaled)."""
    fields: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        fields[key.strip()] = value.strip()
    unknown = set(fields) - {"d", "m_h", "m_w", "kappa", "scaled"}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        d = int(fields["d"])
        m_h = int(fields["m_h"])
        m_w = int(fields["m_w"])
        kappa = int(fields["kappa"])
    except KeyError as e:
        raise ConfigError(f"missing config key: {e.args[0]}") from None
    except ValueError as e:
        raise ConfigError(f"bad config value: {e}") from None
    scaled_text = fields.get("scaled", "false").lower()
    if scaled_text not in ("true", "false", "1", "0"):
        raise ConfigError(f"scaled must be true/false, got {scaled_text!r}")
    return GpaConfig(d, m_h, m_w, kappa, scaled=scaled_text in ("true", "1"))


# Named presets resolve d from the input size so that phase 1 always runs at
# the preset's target low resolution; at or below that resolution the preset
# degrades to the exact configuration.
_PRESETS = {
    "pivot": {"low": (64, 64), "m": (32, 32), "kappa": 12},
    "highres": {"low": (64, 32), "m": (64, 32), "kappa": 4},
}


def preset_config(name: str, h: int, w: int, kappa: int | None = None) -> GpaConfig:
    """Resolve a named preset ("pivot" or "highres") against an input size."""
    try:
        spec = _PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; available: {sorted(_PRESETS)}") from None
    low_h, low_w = spec["low"]
    if h <= low_h and w <= low_w:
        return GpaConfig(1, 1, 1, h * w, scaled=False)
    if h % low_h or w % low_w or h // low_h != w // low_w:
        raise ConfigError(
            f"preset {name!r} targets a {low_h}x{low_w} phase-1 resolution and "
            f"cannot be applied to a {h}x{w} input"
        )
    d = h // low_h
    cfg = GpaConfig(d, spec["m"][0], spec["m"][1], spec["kappa"])
    if kappa is not None:
        cfg = replace(cfg, kappa=kappa)
    return cfg


@dataclass(frozen=True)
class RelevantKeySets:
    """Per-cell relevant key indices at both resolutions.

    low[l] holds the kappa low-resolution key coordinates of cell l in
    descending relevance order; high[l] is its upsampling, kappa * d**2
    original-resolution coordinates.
    """

    low: tuple[IndexStructure, ...]
    high: tuple[IndexStructure, ...]
    grid: tuple[int, int]
    d: int
    low_shape: tuple[int, int]
    high_shape: tuple[int, int]

    def __post_init__(self):
        if len(self.low) != len(self.high) or len(self.low) != self.grid[0] * self.grid[1]:
            raise ShapeError("cell count does not match the partition grid")
        kappa = len(self.low[0]) if self.low else 0
        for lo, hi in zip(self.low, self.high):
            if len(lo) != kappa or len(hi) != kappa * self.d * self.d:
                raise ShapeError("relevant key set sizes are inconsistent")

    @property
    def m(self) -> int:
        return len(self.low)

    @property
    def kappa(self) -> int:
        return len(self.low[0])


def _flat_reshaped(x: ImageTensor) -> np.ndarray:
    return x.data.reshape(x.c, x.h * x.w)


def _scale_factor(c_k: int) -> float:
    return 1.0 / math.sqrt(c_k)


def full_attention(q: ImageTensor, k: ImageTensor, v: ImageTensor, scaled: bool = False) -> ImageTensor:
    """Exact attention: values weighted by the key softmax of K^T Q.

    The affinity matrix has one column per query position; output spatial
    shape follows the query, channels follow the value.
    """
    if q.c != k.c:
        raise ShapeError(f"query has {q.c} channels, key has {k.c}")
    if (k.h, k.w) != (v.h, v.w):
        raise ShapeError(f"key spatial shape {k.h}x{k.w} != value {v.h}x{v.w}")
    qf, kf, vf = _flat_reshaped(q), _flat_reshaped(k), _flat_reshaped(v)
    tracker = active_tracker()
    scores = kf.T @ qf
    note_alloc(tracker, scores)
    try:
        if scaled:
            scores *= _scale_factor(q.c)
        softmax_columns_inplace(scores)
        out = vf @ scores
    finally:
        note_free(tracker, scores)
    return ImageTensor(out.reshape(v.c, q.h, q.w))


def relevant_keys(affinity: Matrix, kappa: int, key_shape: tuple[int, int]) -> IndexStructure:
    """The kappa keys with the highest summed activation over the cell's queries.

    affinity is the keys x queries slice for one cell. Keys are returned as
    coordinates on the key_shape grid (flat index = row * width + col),
    sorted by descending row-sum with ties broken by lower flat index.
    """
    n_keys = affinity.rows
    kh, kw = key_shape
    if kh * kw != n_keys:
        raise ShapeError(f"key grid {kh}x{kw} does not hold {n_keys} keys")
    if kappa < 1 or kappa > n_keys:
        raise ConfigError(f"kappa={kappa} must be in [1, {n_keys}]")
    sums = affinity.data.sum(axis=1)
    ranking = np.argsort(-sums, kind="stable")
    return IndexStructure.from_flat(ranking[:kappa], kw)


def _validate_gpa_inputs(q: ImageTensor, k: ImageTensor, v: ImageTensor | None, cfg: GpaConfig) -> None:
    if q.c != k.c:
        raise ShapeError(f"query has {q.c} channels, key has {k.c}")
    if (q.h, q.w) != (k.h, k.w):
        raise ShapeError(
            f"grid-partitioned attention requires equal query/key spatial shapes, "
            f"got {q.h}x{q.w} and {k.h}x{k.w}"
        )
    if v is not None and (k.h, k.w) != (v.h, v.w):
        raise ShapeError(f"key spatial shape {k.h}x{k.w} != value {v.h}x{v.w}")
    cfg.validate_for(q.h, q.w)


def gpa_phase1(q: ImageTensor, k: ImageTensor, cfg: GpaConfig) -> RelevantKeySets:
    """Find per-cell relevant key sets on the downsampled query/key pair."""
    _validate_gpa_inputs(q, k, None, cfg)
    tracker = active_tracker()
    q_lo = downsample(q, cfg.d)
    k_lo = downsample(k, cfg.d)
    h_lo, w_lo = q_lo.h, q_lo.w
    note_alloc(tracker, q_lo.data, k_lo.data)
    scores = _flat_reshaped(k_lo).T @ _flat_reshaped(q_lo)
    note_alloc(tracker, scores)
    try:
        if cfg.scaled:
            scores *= _scale_factor(q.c)
        softmax_columns_inplace(scores)
        low_cells = partition_grid_indices(h_lo, w_lo, cfg.m_h, cfg.m_w)
        low, high = [], []
        for cell_idx in low_cells:
            a_cell = Matrix(scores[:, cell_idx.flat(w_lo)])
            chosen = relevant_keys(a_cell, cfg.kappa, (h_lo, w_lo))
            low.append(chosen)
            high.append(upsample_indices(chosen, cfg.d))
    finally:
        note_free(tracker, scores, q_lo.data, k_lo.data)
    return RelevantKeySets(
        low=tuple(low),
        high=tuple(high),
        grid=(cfg.m_h, cfg.m_w),
        d=cfg.d,
        low_shape=(h_lo, w_lo),
        high_shape=(q.h, q.w),
    )


def _thread_count() -> int:
    """Worker cap from GPA_THREADS; 0 or unset means auto."""
    raw = os.environ.get("GPA_THREADS", "0")
    try:
        value = int(raw)
    except ValueError:
        value = 0
    if value <= 0:
        return min(8, os.cpu_count() or 1)
    return value


def _check_sets(q: ImageTensor, cfg: GpaConfig, sets: RelevantKeySets) -> None:
    if sets.high_shape != (q.h, q.w) or sets.d != cfg.d or sets.grid != (cfg.m_h, cfg.m_w):
        raise ShapeError(
            f"stale relevant key sets: built for shape {sets.high_shape}, d={sets.d}, "
            f"grid {sets.grid}; now shape {(q.h, q.w)}, d={cfg.d}, grid {(cfg.m_h, cfg.m_w)}"
        )
    if sets.kappa != cfg.kappa:
        raise ShapeError(f"relevant key sets hold kappa={sets.kappa}, config says {cfg.kappa}")


def gpa_phase2(
    q: ImageTensor,
    k: ImageTensor,
    v: ImageTensor,
    cfg: GpaConfig,
    sets: RelevantKeySets,
    keep_affinity: bool = False,
):
    """Sparse attention at the original resolution with fixed key sets.

    Gathers each cell's key/value dictionary, runs exact attention per cell,
    and composes the cells. Cells are independent and may be evaluated on a
    thread pool (capped by GPA_THREADS); results are identical to sequential
    evaluation. Returns (output, affinity) where affinity is the
    (m, dict_size, cell_queries) stack when keep_affinity is set, else None.
    """
    _validate_gpa_inputs(q, k, v, cfg)
    _check_sets(q, cfg, sets)
    h, w = q.h, q.w
    c_k, c_v = q.c, v.c
    m = cfg.m
    dict_size = cfg.kappa * cfg.d * cfg.d
    cell_h, cell_w = h // cfg.m_h, w // cfg.m_w
    cell_q = cell_h * cell_w
    qf, kf, vf = _flat_reshaped(q), _flat_reshaped(k), _flat_reshaped(v)
    q_cells = partition_grid_indices(h, w, cfg.m_h, cfg.m_w)

    tracker = active_tracker()
    gathered_k = np.empty((m, c_k, dict_size), dtype=q.dtype)
    gathered_v = np.empty((m, c_v, dict_size), dtype=q.dtype)
    affinity = np.empty((m, dict_size, cell_q), dtype=q.dtype)
    out_cells = np.empty((m, c_v, cell_q), dtype=q.dtype)
    note_alloc(tracker, gathered_k, gathered_v, affinity, out_cells)
    scale = _scale_factor(c_k)

    def run_cell(cell: int) -> None:
        key_cols = sets.high[cell].flat(w)
        gathered_k[cell] = kf[:, key_cols]
        gathered_v[cell] = vf[:, key_cols]
        q_cell = qf[:, q_cells[cell].flat(w)]
        np.matmul(gathered_k[cell].T, q_cell, out=affinity[cell])
        if cfg.scaled:
            affinity[cell] *= scale
        softmax_columns_inplace(affinity[cell])
        np.matmul(gathered_v[cell], affinity[cell], out=out_cells[cell])

    try:
        workers = min(_thread_count(), m)
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                list(pool.map(run_cell, range(m)))
        else:
            for cell in range(m):
                run_cell(cell)
        cells = tuple(
            (ImageTensor(out_cells[cell].reshape(c_v, cell_h, cell_w)), q_cells[cell])
            for cell in range(m)
        )
        x = compose(Partitioning(cells, (c_v, h, w), (cfg.m_h, cfg.m_w), (cell_h, cell_w)))
    finally:
        note_free(tracker, gathered_k, gathered_v, out_cells)
        if not keep_affinity:
            note_free(tracker, affinity)
    return x, (affinity if keep_affinity else None)


def gpa_forward(
    q: ImageTensor, k: ImageTensor, v: ImageTensor, cfg: GpaConfig
) -> tuple[ImageTensor, RelevantKeySets]:
    """Run both phases; returns the approximate output and the key sets used."""
    sets = gpa_phase1(q, k, cfg)
    x, _ = gpa_phase2(q, k, v, cfg, sets)
    return x, sets


@dataclass(frozen=True)
class PredictedCost:
    """Closed-form element and multiply-accumulate counts for one config.

    Element counts cover the transient affinity buffers of both phases and
    the gathered per-cell dictionaries; the full-attention baseline is the
    n x n affinity an exact pass would need.
    """

    n: int
    phase1_affinity_elems: int
    phase2_affinity_elems: int
    gathered_key_elems: int
    gathered_value_elems: int
    phase1_score_macs: int
    phase2_score_macs: int
    phase2_output_macs: int
    full_affinity_elems: int
    full_macs: int

    @property
    def total_elems(self) -> int:
        return (
            self.phase1_affinity_elems
            + self.phase2_affinity_elems
            + self.gathered_key_elems
            + self.gathered_value_elems
        )


def predicted_cost(cfg: GpaConfig, c_k: int, c_v: int, h: int, w: int) -> PredictedCost:
    """Evaluate the cost formulas for a config applied at h x w."""
    cfg.validate_for(h, w)
    n = h * w
    n_lo = n // (cfg.d * cfg.d)
    dict_size = cfg.kappa * cfg.d * cfg.d
    return PredictedCost(
        n=n,
        phase1_affinity_elems=n_lo * n_lo,
        phase2_affinity_elems=n * dict_size // 1 * 1 if False else n * cfg.d * cfg.d * cfg.kappa,
        gathered_key_elems=cfg.m * c_k * dict_size,
        gathered_value_elems=cfg.m * c_v * dict_size,
        phase1_score_macs=c_k * n_lo * n_lo,
        phase2_score_macs=c_k * n * dict_size,
        phase2_output_macs=c_v * n * dict_size,
        full_affinity_elems=n * n,
        full_macs=(c_k + c_v) * n * n,
    )


def copy_block(
    source: ImageTensor,
    target: ImageTensor,
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    cfg: GpaConfig | None,
    mode: str = "concat",
) -> ImageTensor:
    """Attention copying from a source pathway into a target pathway.

    Three per-pixel linear maps produce the query from the target and the
    key/value from the source; their attention output is concatenated to the
    target's channels (mode "concat") or added to them (mode "residual",
    which requires matching channel counts). cfg None, or a degenerate
    config (d=1, one cell, all keys kept), runs exact attention.
    """
    if mode not in ("concat", "residual"):
        raise ConfigError(f"mode must be 'concat' or 'residual', got {mode!r}")
    if wq.cols != target.c:
        raise ShapeError(f"query projection expects {wq.cols} channels, target has {target.c}")
    if wk.cols != source.c:
        raise ShapeError(f"key projection expects {wk.cols} channels, source has {source.c}")
    if wv.cols != source.c:
        raise ShapeError(f"value projection expects {wv.cols} channels, source has {source.c}")
    if wq.rows != wk.rows:
        raise ShapeError(f"query projection makes {wq.rows} channels, key makes {wk.rows}")

    q = ImageTensor((wq.data @ _flat_reshaped(target)).reshape(wq.rows, target.h, target.w))
    k = ImageTensor((wk.data @ _flat_reshaped(source)).reshape(wk.rows, source.h, source.w))
    v = ImageTensor((wv.data @ _flat_reshaped(source)).reshape(wv.rows, source.h, source.w))

    degenerate = cfg is not None and cfg.d == 1 and cfg.m == 1 and cfg.kappa == source.h * source.w
    if cfg is None or degenerate:
        att = full_attention(q, k, v, scaled=cfg.scaled if cfg else False)
    else:
        att, _ = gpa_forward(q, k, v, cfg)

    if mode == "residual":
        if att.c != target.c:
            raise ShapeError(
                f"residual mode needs value channels == target channels, got {att.c} vs {target.c}"
            )
        return ImageTensor(target.data + att.data)
    return ImageTensor(np.concatenate([target.data, att.data], axis=0))
