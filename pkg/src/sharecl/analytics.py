"""Reports: forgetting and backward transfer, savings accounting, CKA
trajectories and explained-variance curves. Everything emits plain dicts
(for JSON) and ``(series, t, value)`` rows (for CSV)."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConsistencyError
from .linalg import center_rows, explained_variance, linear_cka, singular_values


@dataclass
class EvalGrid:
    """``scores[t][i]``: metric of task ``i`` under the state after timestep ``t`` (``i <= t``)."""

    scores: list
    task_names: list = field(default_factory=list)
    metric: str = "score"
    higher_is_better: bool = True

    def __post_init__(self):
        rows = [list(r) for r in self.scores]
        if not rows:
            raise ConsistencyError("evaluation grid is empty")
        for t, row in enumerate(rows):
            for i in range(t + 1):
                if i >= len(row) or row[i] is None or not np.isfinite(row[i]):
                    raise ConsistencyError(f"grid cell ({t}, {i}) is undefined")
        self.scores = [[float(v) for v in row[: t + 1]] for t, row in enumerate(rows)]
        if not self.task_names:
            self.task_names = [f"task{i}" for i in range(len(rows))]

    @property
    def num_steps(self):
        return len(self.scores)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, doc):
        return cls(doc["scores"], doc.get("task_names", []), doc.get("metric", "score"), doc.get("higher_is_better", True))


def forgetting_and_bwt(grid: EvalGrid, mode="peak"):
    """Per-cell forgetting and backward transfer.

    A cell counts as forgetting when the score moved in the bad direction since
    the previous step, and as backward transfer when it moved in the good
    direction. In ``"peak"`` mode the forgetting magnitude is measured from the
    task's historical peak and the transfer magnitude from the previous step;
    in ``"prev"`` mode both are measured from the previous step.
    """
    if mode not in ("peak", "prev"):
        raise ValueError(f"mode must be 'peak' or 'prev', got {mode!r}")
    sign = 1.0 if grid.higher_is_better else -1.0
    T = grid.num_steps
    forgetting = [[0.0] * (t + 1) for t in range(T)]
    bwt = [[0.0] * (t + 1) for t in range(T)]
    for i in range(T):
        best = grid.scores[i][i] * sign
        for t in range(i + 1, T):
            cur = grid.scores[t][i] * sign
            prev = grid.scores[t - 1][i] * sign
            if cur < prev:
                forgetting[t][i] = (best if mode == "peak" else prev) - cur
            elif cur > prev:
                bwt[t][i] = cur - prev
            best = max(best, cur)
    last = T - 1
    final_f = forgetting[last][:last]
    final_b = bwt[last][:last]
    return {
        "mode": mode,
        "forgetting": forgetting,
        "backward_transfer": bwt,
        "final_forgetting": final_f,
        "final_backward_transfer": final_b,
        "avg_forgetting": float(np.mean(final_f)) if final_f else 0.0,
        "avg_backward_transfer": float(np.mean(final_b)) if final_b else 0.0,
        "final_average_score": float(np.mean(grid.scores[last])),
    }


def retention(grid: EvalGrid):
    """Final score of each task as a fraction of its historical peak (higher-is-better grids)."""
    T = grid.num_steps
    out = []
    for i in range(T):
        peak = max(grid.scores[t][i] for t in range(i, T))
        out.append(grid.scores[T - 1][i] / peak if peak else 1.0)
    return out


@dataclass
class SavingsReport:
    """Exact parameter and storage counts, LoRA versus the shared subspace."""

    layers: list
    lora_trainable_per_task: int
    share_trainable_per_task: int
    temporary_trainable: int | None
    lora_storage: int
    share_storage: int
    bytes_per_scalar: int
    tasks: int

    @property
    def trainable_ratio(self):
        return self.lora_trainable_per_task / self.share_trainable_per_task

    @property
    def storage_ratio(self):
        return self.lora_storage / self.share_storage

    @property
    def lora_bytes(self):
        return self.lora_storage * self.bytes_per_scalar

    @property
    def share_bytes(self):
        return self.share_storage * self.bytes_per_scalar

    def to_dict(self):
        out = asdict(self)
        out.update(
            trainable_ratio=self.trainable_ratio,
            storage_ratio=self.storage_ratio,
            lora_bytes=self.lora_bytes,
            share_bytes=self.share_bytes,
        )
        return out


def savings(shapes, r, k, p, T, bytes_per_scalar=4, phi=None, include_means=True) -> SavingsReport:
    """Count LoRA (``T`` adapters) against one factor set plus ``T`` coefficient sets.

    ``shapes`` is a list of :class:`~sharecl.model.LayerShape`. Storage counts
    scalars: LoRA ``T sum r(n+d)``; shared ``sum k(n+d) + T sum 2kp`` plus
    the stored row means ``sum (n+d)``.
    """
    if min(r, k, p, T, bytes_per_scalar) < 1 or not shapes:
        raise ValueError("r, k, p, T, bytes_per_scalar must be positive and shapes non-empty")
    rows = []
    for s in shapes:
        rows.append(
            {
                "layer_id": s.layer_id,
                "lora_trainable": r * (s.n + s.d),
                "share_trainable": 2 * k * p,
                "temporary_trainable": phi * (s.n + s.d + 2 * p) if phi else None,
                "lora_storage": T * r * (s.n + s.d),
                "share_storage": k * (s.n + s.d) + T * 2 * k * p + ((s.n + s.d) if include_means else 0),
            }
        )
    return SavingsReport(
        layers=rows,
        lora_trainable_per_task=sum(x["lora_trainable"] for x in rows),
        share_trainable_per_task=sum(x["share_trainable"] for x in rows),
        temporary_trainable=sum(x["temporary_trainable"] for x in rows) if phi else None,
        lora_storage=sum(x["lora_storage"] for x in rows),
        share_storage=sum(x["share_storage"] for x in rows),
        bytes_per_scalar=bytes_per_scalar,
        tasks=T,
    )


def size_ratio(baseline_size, share_size):
    """Plain quotient of two reported sizes, e.g. megabytes."""
    if share_size <= 0:
        raise ValueError("share size must be positive")
    return baseline_size / share_size


def cka_trajectory(states, reference, side="beta"):
    """Linear CKA between each state's factors and a reference, per layer and averaged.

    ``states`` holds :class:`~sharecl.model.ShareFactors` (or states carrying
    them); ``reference`` is a matrix or a dict of per-layer matrices.
    """
    series = []
    for st in states:
        factors = getattr(st, "factors", st)
        per_layer = {}
        for lid, f in factors.layers.items():
            ref = reference[lid] if isinstance(reference, dict) else reference
            per_layer[lid] = linear_cka(getattr(f, side), ref)
        series.append({"per_layer": per_layer, "mean": float(np.mean(list(per_layer.values())))})
    return series


def explained_variance_curve(stack, center=True, thresholds=(0.6, 0.8, 0.9, 0.95)):
    """Cumulative explained variance of a stacked factor matrix, for both sides."""
    out = {}
    for side, m in (("b", stack.d_b), ("a", stack.d_a)):
        mat = center_rows(m)[0] if center else m
        curve = explained_variance(singular_values(mat))
        ks = {str(th): int(np.nonzero(curve >= th - 1e-12)[0][0]) + 1 for th in thresholds}
        out[side] = {"curve": curve.tolist(), "k_at": ks}
    return out


def series_rows(name, values, start=0):
    return [(name, start + t, float(v)) for t, v in enumerate(values)]


def to_csv(rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["series", "t", "value"])
    for name, t, value in rows:
        writer.writerow([name, t, repr(float(value))])
    return buf.getvalue()


def to_json(doc):
    return json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")
