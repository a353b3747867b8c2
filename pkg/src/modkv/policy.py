"""Modality-adaptive eviction policy: budget planning and mask construction.

Planning walks the layers in order. For every head it measures, per modality,
how many tokens are needed to cover a threshold share of that modality's
importance mass (the coverage counts). In Adaptive mode those counts are the
retention; in Proportional mode retention is the head's layer budget split
between modalities in proportion to their importance mass. Either way, each
layer's aggregate deviation from budget is rolled into the remaining layers'
budgets, so early overdrafts shrink what later layers may keep. The budget
stays real-valued across layers; integers only appear where retention counts
are materialized.

Mask construction turns allocations into per-(layer, head) keep-vectors by
taking the top-importance tokens of each modality, ties broken toward the
more recent token. Proxy tokens can be pinned (kept unconditionally, charged
against the text allocation) since they anchor the question being answered.
"""

from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .allocation import largest_remainder_split, round_half_up
from .errors import FormatError, ParameterError, ValidationError
from .importance import ProxyConfig, proxy_importance_matrix
from .trace import FORMAT_VERSION, AttentionTrace


class PolicyMode(enum.Enum):
    ADAPTIVE = "adaptive"
    PROPORTIONAL = "proportional"


@dataclass(frozen=True)
class PolicyConfig:
    """Knobs for the modality-adaptive policy.

    Attributes:
        budget_frac: target kept fraction of the prompt per head, in (0, 1].
        coverage_threshold: share of each modality's importance mass the
            coverage counts must reach, in (0, 1].
        proxy: which prompt rows probe token importance.
        mode: ADAPTIVE retains the coverage counts; PROPORTIONAL retains the
            layer budget split by modality preference.
        head_normalize_compensation: spread each layer's budget deviation
            over heads as well as remaining layers (keeps the global budget
            conserved); the unnormalized variant divides by remaining layers
            only.
        min_keep_per_modality: floor on each modality's allocation.
        pin_proxy_tokens: always keep the proxy tokens, charging their count
            against the text allocation.
    """

    budget_frac: float
    coverage_threshold: float = 0.9
    proxy: ProxyConfig = field(default_factory=ProxyConfig)
    mode: PolicyMode = PolicyMode.ADAPTIVE
    head_normalize_compensation: bool = True
    min_keep_per_modality: int = 0
    pin_proxy_tokens: bool = True

    def __post_init__(self):
        if not 0.0 < self.budget_frac <= 1.0:
            raise ParameterError(f"budget_frac must be in (0, 1], got {self.budget_frac}")
        if not 0.0 < self.coverage_threshold <= 1.0:
            raise ParameterError(
                f"coverage_threshold must be in (0, 1], got {self.coverage_threshold}"
            )
        if int(self.min_keep_per_modality) < 0:
            raise ParameterError(
                f"min_keep_per_modality must be >= 0, got {self.min_keep_per_modality}"
            )

    @property
    def name(self) -> str:
        return self.mode.value


@dataclass
class BudgetPlan:
    """Planner output: budgets, deviations, and integer allocations.

    layer_budget[l] is the per-head budget entering layer l (real valued);
    deviation[l] sums, over heads, how far that layer's coverage needs sit
    above (+) or below (-) the budget. The last entry is the residual left
    after the final layer. Allocations are the retained token counts per
    (layer, head, modality).
    """

    mode: PolicyMode
    budget_frac: float
    prompt_len: int
    layer_budget: np.ndarray
    deviation: np.ndarray
    alloc_visual: np.ndarray
    alloc_text: np.ndarray
    need_visual: np.ndarray
    need_text: np.ndarray
    warnings: list[str] = field(default_factory=list)

    @property
    def final_residual(self) -> float:
        return float(self.deviation[-1])

    def total_allocated(self) -> int:
        return int(self.alloc_visual.sum() + self.alloc_text.sum())


@dataclass
class EvictionMask:
    """Per-(layer, head) boolean keep-vectors over prompt positions."""

    policy: str
    keep: np.ndarray
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.keep = np.asarray(self.keep, dtype=bool)
        if self.keep.ndim != 3:
            raise ValidationError(f"keep must be (layers, heads, prompt), got {self.keep.shape}")

    def kept_counts(self) -> np.ndarray:
        return self.keep.sum(axis=2)


# ---------------------------------------------------------------------------
# planning primitives


def coverage_counts(scores: np.ndarray, visual: np.ndarray, threshold: float) -> tuple[int, int]:
    """Minimum token counts covering `threshold` of each modality's mass.

    Tokens are taken in descending importance order; the count is the
    smallest prefix whose mass reaches threshold * modality_total. A modality
    with no mass needs 0 tokens. Scale-invariant: rescaling all scores leaves
    the counts unchanged.

    Returns:
        (visual_count, text_count)
    """
    if not 0.0 < threshold <= 1.0:
        raise ParameterError(f"threshold must be in (0, 1], got {threshold}")
    out = []
    for mask in (visual, ~visual):
        vals = np.sort(scores[mask])[::-1]
        cum = np.cumsum(vals)
        if cum.size == 0 or cum[-1] <= 0:
            out.append(0)
            continue
        target = threshold * cum[-1]
        out.append(int(np.searchsorted(cum, target, side="left")) + 1)
    return out[0], out[1]


def preference_budget_split(
    visual_weight: float,
    text_weight: float,
    layer_budget: float,
    num_visual: int,
    num_text: int,
) -> tuple[float, float]:
    """Split a head's layer budget proportionally to modality preference.

    Real-valued on purpose; integer rounding happens only where allocations
    are materialized. With no importance mass at all the split falls back to
    modality token counts.
    """
    if visual_weight < 0 or text_weight < 0:
        raise ParameterError("preference weights must be non-negative")
    total = visual_weight + text_weight
    if total <= 0:
        total_count = num_visual + num_text
        if total_count <= 0:
            raise ParameterError("cannot split a budget with no tokens")
        return (
            layer_budget * num_visual / total_count,
            layer_budget * num_text / total_count,
        )
    return (
        layer_budget * visual_weight / total,
        layer_budget * text_weight / total,
    )


def layer_budget_deviation(
    need_visual: np.ndarray, need_text: np.ndarray, layer_budget: float
) -> float:
    """Aggregate, over heads, how far coverage needs exceed the budget.

    Positive means the layer wants more than budgeted; negative means thrift.
    """
    needs = np.asarray(need_visual, dtype=np.float64) + np.asarray(need_text, dtype=np.float64)
    return float(np.sum(needs - layer_budget))


def update_layer_budget(
    layer_budget: float,
    deviation: float,
    layer_index: int,
    num_layers: int,
    num_heads: int,
    head_normalize: bool = True,
    floor: float = 0.0,
) -> float:
    """Roll one layer's deviation into the next layer's budget.

    The deviation is amortized over the remaining layers; with
    head_normalize it is spread over heads too (per-head units), which is
    what makes total retention telescope back to the global budget. The
    result is clamped below at `floor`.
    """
    remaining = num_layers - layer_index - 1
    if remaining < 1:
        raise ParameterError("no remaining layers to update")
    if num_heads < 1:
        raise ParameterError(f"num_heads must be >= 1, got {num_heads}")
    step = deviation / (num_heads * remaining) if head_normalize else deviation / remaining
    return max(layer_budget - step, floor)


# ---------------------------------------------------------------------------
# planner


def plan_budgets(trace: AttentionTrace, cfg: PolicyConfig) -> BudgetPlan:
    """Plan per-(layer, head, modality) retention for a whole trace."""
    h = trace.header
    L, H, n = h.num_layers, h.num_heads, h.prompt_len
    vis = h.modality_labels
    n_vis = int(vis.sum())
    n_txt = n - n_vis
    min_keep_v = min(cfg.min_keep_per_modality, n_vis)
    min_keep_t = min(cfg.min_keep_per_modality, n_txt)
    warnings: list[str] = []

    budget0 = round_half_up(cfg.budget_frac * n)
    if budget0 < 1:
        warnings.append(f"initial budget {budget0} clamped up to 1")
        budget0 = 1
    floor = 2.0 * cfg.min_keep_per_modality

    scores = proxy_importance_matrix(trace, cfg.proxy)
    layer_budget = np.zeros(L, dtype=np.float64)
    deviation = np.zeros(L, dtype=np.float64)
    need_v = np.zeros((L, H), dtype=np.int64)
    need_t = np.zeros((L, H), dtype=np.int64)
    alloc_v = np.zeros((L, H), dtype=np.int64)
    alloc_t = np.zeros((L, H), dtype=np.int64)

    budget = float(budget0)
    for l in range(L):
        layer_budget[l] = budget
        for hd in range(H):
            s = scores[l, hd]
            kv, kt = coverage_counts(s, vis, cfg.coverage_threshold)
            need_v[l, hd], need_t[l, hd] = kv, kt
            if cfg.budget_frac >= 1.0:
                # A full budget evicts nothing, whatever the coverage needs.
                av, at = n_vis, n_txt
            elif cfg.mode is PolicyMode.ADAPTIVE:
                av, at = kv, kt
            else:
                total = min(round_half_up(budget), n)
                wv = float(s[vis].sum())
                wt = float(s[~vis].sum())
                if wv + wt > 0:
                    av, at = (int(x) for x in largest_remainder_split([wv, wt], total))
                else:
                    av, at = (int(x) for x in largest_remainder_split([n_vis, n_txt], total))
                if av > n_vis:
                    spill = av - n_vis
                    av, at = n_vis, min(at + spill, n_txt)
                    warnings.append(
                        f"layer {l} head {hd}: visual allocation exceeded "
                        f"{n_vis} visual tokens, spilled {spill} to text"
                    )
                elif at > n_txt:
                    spill = at - n_txt
                    at, av = n_txt, min(av + spill, n_vis)
                    warnings.append(
                        f"layer {l} head {hd}: text allocation exceeded "
                        f"{n_txt} text tokens, spilled {spill} to visual"
                    )
            alloc_v[l, hd] = max(av, min_keep_v)
            alloc_t[l, hd] = max(at, min_keep_t)
        deviation[l] = layer_budget_deviation(need_v[l], need_t[l], budget)
        if l + 1 < L:
            raw = update_layer_budget(
                budget,
                deviation[l],
                l,
                L,
                H,
                head_normalize=cfg.head_normalize_compensation,
                floor=-np.inf,
            )
            if raw < floor:
                warnings.append(
                    f"layer {l + 1}: budget {raw:.3f} clamped up to floor {floor:.3f}"
                )
                raw = floor
            budget = raw

    return BudgetPlan(
        mode=cfg.mode,
        budget_frac=cfg.budget_frac,
        prompt_len=n,
        layer_budget=layer_budget,
        deviation=deviation,
        alloc_visual=alloc_v,
        alloc_text=alloc_t,
        need_visual=need_v,
        need_text=need_t,
        warnings=warnings,
    )


# ---------------------------------------------------------------------------
# masks


def _top_by_importance(scores: np.ndarray, candidates: np.ndarray, quota: int) -> np.ndarray:
    """Indices of the `quota` highest-importance candidates; ties go to the
    more recent (larger) position."""
    if quota <= 0 or candidates.size == 0:
        return candidates[:0]
    order = np.lexsort((-candidates, -scores[candidates]))
    return candidates[order[:quota]]


def build_masks(trace: AttentionTrace, plan: BudgetPlan, cfg: PolicyConfig) -> EvictionMask:
    """Materialize the plan into keep-vectors.

    Per (layer, head) and per modality the kept set is the top tokens by
    importance, sized by the plan's allocation. Pinned proxy tokens are kept
    first and charged against the text allocation.
    """
    h = trace.header
    L, H, n = h.num_layers, h.num_heads, h.prompt_len
    if plan.prompt_len != n or plan.alloc_visual.shape != (L, H):
        raise ValidationError(
            f"plan shape {plan.alloc_visual.shape}/{plan.prompt_len} does not "
            f"match trace ({L}, {H})/{n}"
        )
    vis = h.modality_labels
    n_vis = int(vis.sum())
    n_txt = n - n_vis
    scores = proxy_importance_matrix(trace, cfg.proxy)
    p_eff = cfg.proxy.effective(n) if cfg.pin_proxy_tokens else 0
    pinned = np.arange(n - p_eff, n)
    vis_idx = np.flatnonzero(vis[: n - p_eff] if p_eff else vis)
    txt_idx = np.flatnonzero(~vis[: n - p_eff] if p_eff else ~vis)

    keep = np.zeros((L, H, n), dtype=bool)
    warnings: list[str] = []
    for l in range(L):
        for hd in range(H):
            quota_v = int(plan.alloc_visual[l, hd])
            quota_t = int(plan.alloc_text[l, hd])
            if quota_v >= n_vis and quota_t >= n_txt:
                # Allocation covers every token: nothing to evict, and no
                # proxy-pinning arithmetic to apply.
                keep[l, hd] = True
                continue
            if p_eff:
                if quota_t < p_eff:
                    warnings.append(
                        f"layer {l} head {hd}: {p_eff} pinned proxy tokens "
                        f"exceed text allocation {quota_t}"
                    )
                quota_t = max(quota_t - p_eff, 0)
                quota_v = min(quota_v, vis_idx.size)
            row = keep[l, hd]
            row[pinned] = True
            row[_top_by_importance(scores[l, hd], vis_idx, quota_v)] = True
            row[_top_by_importance(scores[l, hd], txt_idx, quota_t)] = True
    return EvictionMask(policy=cfg.name, keep=keep, warnings=warnings)


# ---------------------------------------------------------------------------
# serialization (same canonical-text conventions as the trace container)


def _dump_canonical(obj: dict) -> bytes:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=True).encode("ascii") + b"\n"


def _atomic_write(path: str | os.PathLike, payload: bytes) -> None:
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def plan_to_obj(plan: BudgetPlan) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "kind": "budget_plan",
        "mode": plan.mode.value,
        "budget_frac": plan.budget_frac,
        "prompt_len": plan.prompt_len,
        "layer_budget": plan.layer_budget.tolist(),
        "deviation": plan.deviation.tolist(),
        "alloc_visual": plan.alloc_visual.tolist(),
        "alloc_text": plan.alloc_text.tolist(),
        "need_visual": plan.need_visual.tolist(),
        "need_text": plan.need_text.tolist(),
        "warnings": list(plan.warnings),
    }


def save_plan(plan: BudgetPlan, path: str | os.PathLike) -> None:
    _atomic_write(path, _dump_canonical(plan_to_obj(plan)))


def load_plan(path: str | os.PathLike) -> BudgetPlan:
    with open(path, "rb") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"not a valid plan file: {exc}") from None
    if not isinstance(obj, dict) or obj.get("kind") != "budget_plan":
        raise FormatError("not a budget_plan document")
    if obj.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"unsupported format_version {obj.get('format_version')!r}")
    try:
        return BudgetPlan(
            mode=PolicyMode(obj["mode"]),
            budget_frac=float(obj["budget_frac"]),
            prompt_len=int(obj["prompt_len"]),
            layer_budget=np.asarray(obj["layer_budget"], dtype=np.float64),
            deviation=np.asarray(obj["deviation"], dtype=np.float64),
            alloc_visual=np.asarray(obj["alloc_visual"], dtype=np.int64),
            alloc_text=np.asarray(obj["alloc_text"], dtype=np.int64),
            need_visual=np.asarray(obj["need_visual"], dtype=np.int64),
            need_text=np.asarray(obj["need_text"], dtype=np.int64),
            warnings=[str(w) for w in obj.get("warnings", [])],
        )
    except (KeyError, ValueError) as exc:
        raise FormatError(f"bad plan field: {exc}") from None


def mask_to_obj(mask: EvictionMask) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "kind": "eviction_mask",
        "policy": mask.policy,
        "keep": mask.keep.astype(np.uint8).tolist(),
        "warnings": list(mask.warnings),
    }


def save_mask(mask: EvictionMask, path: str | os.PathLike) -> None:
    _atomic_write(path, _dump_canonical(mask_to_obj(mask)))


def load_mask(path: str | os.PathLike) -> EvictionMask:
    with open(path, "rb") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"not a valid mask file: {exc}") from None
    if not isinstance(obj, dict) or obj.get("kind") != "eviction_mask":
        raise FormatError("not an eviction_mask document")
    if obj.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"unsupported format_version {obj.get('format_version')!r}")
    try:
        return EvictionMask(
            policy=str(obj["policy"]),
            keep=np.asarray(obj["keep"], dtype=bool),
            warnings=[str(w) for w in obj.get("warnings", [])],
        )
    except KeyError as exc:
        raise FormatError(f"bad mask field: {exc}") from None
