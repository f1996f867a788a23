"""Bipartite assignment, the detection matching cost, and set-prediction losses.

The solver is a shortest-augmenting-path Hungarian method for rectangular
``num_gt x num_queries`` problems.  Among optimal assignments it returns the
lexicographically smallest ``gt_to_query`` vector, which is also what the
brute-force oracle returns, so both can be compared exactly.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .boxes import GroundTruthSet, cxcywh_to_xyxy, pairwise_giou, tensor_cxcywh_to_xyxy, tensor_giou
from .exceptions import DimensionError, NumericError, ParameterError
from .tensor import Tensor

BRUTE_FORCE_MAX_QUERIES = 9


@dataclass(frozen=True)
class AssignmentResult:
    gt_to_query: tuple[int, ...]
    total_cost: float

    def __len__(self) -> int:
        return len(self.gt_to_query)


def _tie_tolerance(c: np.ndarray) -> float:
    scale = 1.0 + (float(np.abs(c).max()) if c.size else 0.0)
    return 1e-10 * scale * max(1, c.shape[0])


def _validate_cost(c) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 2:
        raise DimensionError(f"cost matrix must be 2-d, got shape {c.shape}")
    if c.shape[0] > c.shape[1]:
        raise DimensionError(f"more ground truths ({c.shape[0]}) than queries ({c.shape[1]})")
    if not np.isfinite(c).all():
        raise NumericError("cost matrix contains non-finite entries")
    return c


def _solve(c: np.ndarray):
    """Core solver; returns (row->col array, row potentials, column potentials)."""
    n, m = c.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.intp)  # p[j]: 1-based row owning column j (0 = free)
    way = np.zeros(m + 1, dtype=np.intp)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            cur = c[i0 - 1] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            candidates = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(candidates)) + 1
            delta = candidates[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    rows_to_cols = np.empty(n, dtype=np.intp)
    for j in range(1, m + 1):
        if p[j]:
            rows_to_cols[p[j] - 1] = j - 1
    return rows_to_cols, u[1:], v[1:]


def _alternative_optimum_possible(c: np.ndarray, cols: np.ndarray, u: np.ndarray, v: np.ndarray, tol: float) -> bool:
    """True when the tight subgraph admits a second optimal assignment."""
    n, m = c.shape
    tight = np.abs(c - u[:, None] - v[None, :]) <= tol
    owner = np.full(m, -1)
    owner[cols] = np.arange(n)
    # directed graph: row -> column over tight non-assigned edges, column -> owning row
    adj = [np.flatnonzero(tight[i] & (np.arange(m) != cols[i])) for i in range(n)]
    if not any(len(a) for a in adj):
        return False
    zero_dual = np.abs(v) <= tol
    # alternating path from a releasable column to a free tight column
    start = [owner[j] for j in range(m) if owner[j] >= 0 and zero_dual[j]]
    seen = set(start)
    stack = list(start)
    while stack:
        i = stack.pop()
        for j in adj[i]:
            if owner[j] < 0:
                return True
            if owner[j] not in seen:
                seen.add(owner[j])
                stack.append(owner[j])
    # alternating cycle among assigned columns (iterative three-colour DFS over rows)
    color = np.zeros(n, dtype=np.int8)
    for root in range(n):
        if color[root]:
            continue
        color[root] = 1
        stack = [(root, iter(adj[root]))]
        while stack:
            i, it = stack[-1]
            advanced = False
            for j in it:
                k = owner[j]
                if k < 0:
                    continue
                if color[k] == 1:
                    return True
                if color[k] == 0:
                    color[k] = 1
                    stack.append((k, iter(adj[k])))
                    advanced = True
                    break
            if not advanced:
                color[i] = 2
                stack.pop()
    return False


def _lexicographic_optimum(c: np.ndarray, cols: np.ndarray, best: float, tol: float) -> np.ndarray:
    n, m = c.shape
    fixed: list[int] = []
    fixed_cost = 0.0
    current = cols.copy()
    for i in range(n):
        taken = set(fixed)
        for j in range(current[i]):
            if j in taken:
                continue
            rest_cols = [k for k in range(m) if k not in taken and k != j]
            if i + 1 < n:
                sub = c[i + 1:][:, rest_cols]
                sub_cols, _, _ = _solve(sub)
                rest = float(sub[np.arange(n - i - 1), sub_cols].sum())
            else:
                sub_cols, rest = np.empty(0, dtype=np.intp), 0.0
            if fixed_cost + c[i, j] + rest <= best + tol:
                current = np.array(fixed + [j] + [rest_cols[k] for k in sub_cols], dtype=np.intp)
                break
        fixed.append(int(current[i]))
        fixed_cost += c[i, current[i]]
    return current


def hungarian(c) -> AssignmentResult:
    """Minimum-cost injective assignment of rows (ground truths) to columns (queries)."""
    c = _validate_cost(c)
    n, m = c.shape
    if n == 0:
        return AssignmentResult((), 0.0)
    cols, u, v = _solve(c)
    total = float(c[np.arange(n), cols].sum())
    tol = _tie_tolerance(c)
    if _alternative_optimum_possible(c, cols, u, v, tol):
        cols = _lexicographic_optimum(c, cols, total, tol)
        total = float(c[np.arange(n), cols].sum())
    return AssignmentResult(tuple(int(j) for j in cols), total)


def brute_force_assign(c) -> AssignmentResult:
    """Exhaustive search over all injections (test oracle, at most 9 queries)."""
    c = _validate_cost(c)
    n, m = c.shape
    if m > BRUTE_FORCE_MAX_QUERIES:
        raise ParameterError(f"brute force limited to {BRUTE_FORCE_MAX_QUERIES} queries, got {m}")
    perms = list(itertools.permutations(range(m), n))
    costs = [sum(c[i, p[i]] for i in range(n)) for p in perms]
    best = min(costs)
    tol = _tie_tolerance(c)
    for p, cost in zip(perms, costs):
        if cost <= best + tol:
            return AssignmentResult(tuple(p), float(cost))
    raise AssertionError("unreachable")


# -- matching cost ------------------------------------------------------------------
@dataclass(frozen=True)
class LossWeights:
    cls: float = 2.0
    l1: float = 5.0
    giou: float = 2.0
    alpha: float = 0.25
    gamma: float = 2.0


def focal_class_cost(probs: np.ndarray, alpha: float = 0.25, gamma: float = 2.0, eps: float = 1e-8) -> np.ndarray:
    """Per-(query, class) focal-style cost: positive minus negative focal term."""
    pos = alpha * (1 - probs) ** gamma * -np.log(probs + eps)
    neg = (1 - alpha) * probs**gamma * -np.log(1 - probs + eps)
    return pos - neg


def matching_cost(pred_boxes, pred_class_probs, gts: GroundTruthSet, coeffs: LossWeights = LossWeights()) -> np.ndarray:
    """``[num_gt, num_queries]`` cost mixing class, L1 and GIoU terms."""
    boxes = np.asarray(pred_boxes, dtype=np.float64)
    probs = np.asarray(pred_class_probs, dtype=np.float64)
    if boxes.ndim != 2 or boxes.shape[1] != 4 or probs.shape[0] != boxes.shape[0]:
        raise DimensionError(f"prediction shapes {boxes.shape} and {probs.shape} are inconsistent")
    gt_boxes, labels = gts.array, gts.labels
    if len(gts) == 0:
        return np.zeros((0, len(boxes)))
    if labels.max() >= probs.shape[1]:
        raise DimensionError(f"class id {labels.max()} outside {probs.shape[1]} predicted classes")
    cls_cost = focal_class_cost(probs, coeffs.alpha, coeffs.gamma)[:, labels].T
    l1 = np.abs(gt_boxes[:, None, :] - boxes[None, :, :]).sum(-1)
    g = pairwise_giou(cxcywh_to_xyxy(gt_boxes), cxcywh_to_xyxy(boxes))
    return coeffs.cls * cls_cost + coeffs.l1 * l1 - coeffs.giou * g


# -- losses ---------------------------------------------------------------------------
class LayerPrediction(NamedTuple):
    boxes: Tensor  # [N, 4] normalized cxcywh
    logits: Tensor  # [N, num_classes + 1], last column = no-object


@dataclass
class LossResult:
    total: Tensor
    components: dict = field(default_factory=dict)
    assignments: list = field(default_factory=list)

    def __add__(self, other: "LossResult") -> "LossResult":
        comps = dict(self.components)
        for k, v in other.components.items():
            comps[k] = comps.get(k, 0.0) + v
        return LossResult(self.total + other.total, comps, self.assignments + other.assignments)


def sigmoid_focal_loss(logits: Tensor, targets: np.ndarray, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Summed sigmoid focal loss of ``logits`` against 0/1 ``targets``."""
    t = T.as_tensor(np.asarray(targets, dtype=logits.dtype))
    p = T.sigmoid(logits)
    ce = T.softplus(logits) - logits * t
    p_t = p * t + (1.0 - p) * (1.0 - t)
    modulator = T.power(1.0 - p_t, gamma)
    alpha_t = t * alpha + (1.0 - t) * (1.0 - alpha)
    return (ce * modulator * alpha_t).sum()


def hungarian_loss(pred: LayerPrediction, gts: GroundTruthSet, weights: LossWeights = LossWeights(),
                   num_boxes: float | None = None) -> LossResult:
    """Match predictions to ``gts`` then score focal + L1 + GIoU; normalized by ``num_boxes``."""
    boxes, logits = pred
    n_q, n_cls1 = logits.shape
    with T.no_grad():
        probs = T.sigmoid(logits).data
    cost = matching_cost(boxes.data, probs, gts, weights)
    match = hungarian(cost)
    norm = float(num_boxes if num_boxes is not None else max(len(gts), 1))

    targets = np.zeros((n_q, n_cls1))
    targets[:, -1] = 1.0
    q_idx = np.array(match.gt_to_query, dtype=np.intp)
    if len(gts):
        targets[q_idx, -1] = 0.0
        targets[q_idx, gts.labels] = 1.0
    focal = sigmoid_focal_loss(logits, targets, weights.alpha, weights.gamma) / norm
    total = focal * weights.cls
    comps = {"loss_cls": focal.item()}
    if len(gts):
        matched = boxes[q_idx]
        gt_arr = gts.array.astype(boxes.dtype)
        l1 = T.abs_(matched - gt_arr).sum() / norm
        g = tensor_giou(tensor_cxcywh_to_xyxy(matched), cxcywh_to_xyxy(gt_arr))
        giou_loss = (1.0 - g).sum() / norm
        total = total + l1 * weights.l1 + giou_loss * weights.giou
        comps["loss_l1"] = l1.item()
        comps["loss_giou"] = giou_loss.item()
    else:
        comps["loss_l1"] = 0.0
        comps["loss_giou"] = 0.0
    return LossResult(total, comps, [match])


def one2one_loss(layers: Sequence[LayerPrediction], gts: GroundTruthSet, weights: LossWeights = LossWeights(),
                 num_boxes: float | None = None) -> LossResult:
    """Hungarian loss summed over decoder layers, each layer matched separately."""
    if not layers:
        raise DimensionError("one2one_loss needs at least one decoder layer")
    result = hungarian_loss(layers[0], gts, weights, num_boxes)
    for layer in layers[1:]:
        result = result + hungarian_loss(layer, gts, weights, num_boxes)
    return result


Decoder = Callable[[Tensor, object], Sequence[LayerPrediction]]


def group_loss(query_groups: Sequence[Tensor], features, gts: GroundTruthSet, decoder: Decoder,
               weights: LossWeights = LossWeights()) -> LossResult:
    """Independent decoder pass and one-to-one matching per query group, summed."""
    if not query_groups:
        raise ParameterError("group_loss needs at least one query group")
    sizes = {q.shape for q in query_groups}
    if len(sizes) != 1:
        raise DimensionError(f"query groups differ in shape: {sizes}")
    result = None
    for q in query_groups:
        part = one2one_loss(decoder(q, features), gts, weights)
        result = part if result is None else result + part
    return result


def repeat_gts(gts: GroundTruthSet, k: int) -> GroundTruthSet:
    return GroundTruthSet(tuple(gts.boxes) * k, gts.image_id)


def hybrid_loss(primary_queries: Tensor, extra_queries: Tensor, features, gts: GroundTruthSet, k: int,
                decoder: Decoder, weights: LossWeights = LossWeights()) -> LossResult:
    """One-to-one loss on the primary queries plus a one-to-many loss on the extra
    queries against ``gts`` repeated ``k`` times in a single assignment problem."""
    if k < 1:
        raise ParameterError("repetition count must be >= 1")
    if extra_queries.shape[0] < k * len(gts):
        raise ParameterError(f"{extra_queries.shape[0]} extra queries cannot host {k} x {len(gts)} targets")
    main = one2one_loss(decoder(primary_queries, features), gts, weights)
    repeated = repeat_gts(gts, k)
    extra = one2one_loss(decoder(extra_queries, features), repeated, weights)
    extra.components = {f"{name}_extra": value for name, value in extra.components.items()}
    return main + extra
