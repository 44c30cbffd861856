"""Conflict detection and orthogonal gradient projection over adapter blocks.

Two task gradients conflict when their inner product is negative. A
conflicting gradient is repaired by projecting it onto the normal plane of
the other task's gradient:

    gi <- gi - (gi . gj / ||gj||^2) gj      (applied only when gi . gj < 0)

``surgery`` runs the pairwise conditional projection over every task in a
freshly shuffled order each step. The scope controls what "a gradient" means:

* FLAT            - all adapter blocks of a task concatenated into one vector
* PER_MATRIX      - each (layer, A|B) matrix projected independently
* PER_ROLE_CONCAT - all A blocks as one vector, all B blocks as another

Head gradients are never projected. By default each task is projected
against the other tasks' ORIGINAL gradients (order-robust; the randomized
order still matters because projections compound on the task being fixed).
``project_against="mutated"`` switches to projecting against whatever the
other task's gradient currently is, for comparison.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dense import Matrix, Rng
from .errors import NumericError, ParameterError, ShapeError
from .model import BlockId, TaskGradient

FLAT = "FLAT"
PER_MATRIX = "PER_MATRIX"
PER_ROLE_CONCAT = "PER_ROLE_CONCAT"
SCOPES = (FLAT, PER_MATRIX, PER_ROLE_CONCAT)

PROJECT_AGAINST_ORIGINAL = "original"
PROJECT_AGAINST_MUTATED = "mutated"

# ||gj|| below this with a negative dot means the conflict test itself sits
# inside rounding noise; refusing is safer than dividing by ~0.
DEGENERATE_NORM = 1e-30


@dataclass
class ConflictPair:
    i: int
    j: int
    block: str
    dot: float
    cosine: float
    conflicted: bool


@dataclass
class ConflictReport:
    step: int
    scope: str = PER_MATRIX
    pairs: list[ConflictPair] = field(default_factory=list)

    def conflict_count(self) -> int:
        return sum(p.conflicted for p in self.pairs)


@dataclass
class SurgeryStats:
    """Instrumentation: how many gradient floats the projection pass handled."""

    floats_touched: int = 0


def adapter_block_order(grad: TaskGradient) -> list[BlockId]:
    bids = [b for b in grad.blocks if b.role in ("A", "B")]
    return sorted(bids, key=lambda b: (b.index, b.role))


def scope_groups(grad: TaskGradient, scope: str) -> list[tuple[str, list[BlockId]]]:
    """Named groups of adapter blocks that each get projected as one vector."""
    bids = adapter_block_order(grad)
    if scope == FLAT:
        return [("flat", bids)]
    if scope == PER_MATRIX:
        return [(str(b), [b]) for b in bids]
    if scope == PER_ROLE_CONCAT:
        return [
            ("A", [b for b in bids if b.role == "A"]),
            ("B", [b for b in bids if b.role == "B"]),
        ]
    raise ParameterError(f"unknown projection scope {scope!r}; expected one of {SCOPES}")


def _group_vector(grad: TaskGradient, bids: list[BlockId]) -> np.ndarray:
    return np.concatenate([grad.blocks[b].ravel() for b in bids])


def _check_structures(grads: list[TaskGradient]) -> None:
    if not grads:
        raise ParameterError("surgery/merge needs at least one task gradient")
    ref = grads[0]
    ref_bids = adapter_block_order(ref)
    for g in grads[1:]:
        if adapter_block_order(g) != ref_bids:
            raise ShapeError(
                f"task {g.task_id} adapter blocks {adapter_block_order(g)} "
                f"differ from task {ref.task_id} blocks {ref_bids}"
            )
        for b in ref_bids:
            if g.blocks[b].shape != ref.blocks[b].shape:
                raise ShapeError(
                    f"block {b}: task {g.task_id} shape {g.blocks[b].shape} vs "
                    f"task {ref.task_id} shape {ref.blocks[b].shape}"
                )


def pairwise_cosine(
    gi: TaskGradient, gj: TaskGradient, scope: str, block: str | None = None
) -> float:
    """Cosine of the two gradients over the scoped entries; 0.0 when a norm is zero.

    For FLAT, block must be None; for the per-block scopes it names the group.
    """
    _check_structures([gi, gj])
    groups = dict(scope_groups(gi, scope))
    if scope == FLAT:
        if block is not None and block != "flat":
            raise ParameterError(f"FLAT scope has no block {block!r}")
        bids = groups["flat"]
    else:
        if block is None or block not in groups:
            raise ParameterError(
                f"scope {scope} needs a block label from {sorted(groups)}, got {block!r}"
            )
        bids = groups[block]
    vi = _group_vector(gi, bids)
    vj = _group_vector(gj, bids)
    return _cosine(float(vi @ vj), float(np.linalg.norm(vi)), float(np.linalg.norm(vj)))


def _cosine(dot: float, ni: float, nj: float) -> float:
    if ni == 0.0 or nj == 0.0:
        return 0.0
    return dot / (ni * nj)


def project_pair(gi_vec: np.ndarray, gj_vec: np.ndarray) -> np.ndarray:
    """Conditional projection of gi onto the normal plane of gj.

    Returns gi unchanged when the dot is non-negative; otherwise removes the
    component along gj, which zeroes the mutual inner product and can only
    shrink the norm.
    """
    if gi_vec.shape != gj_vec.shape:
        raise ShapeError(f"project_pair: lengths {gi_vec.shape} and {gj_vec.shape} differ")
    dot = float(gi_vec @ gj_vec)
    if dot >= 0.0:
        return gi_vec
    nj_sq = float(gj_vec @ gj_vec)
    if nj_sq < DEGENERATE_NORM * DEGENERATE_NORM:
        raise NumericError(
            f"project_pair: conflicting dot {dot} against a vector of norm "
            f"{np.sqrt(nj_sq)} below {DEGENERATE_NORM}"
        )
    return gi_vec - (dot / nj_sq) * gj_vec


def surgery(
    grads: list[TaskGradient],
    scope: str,
    rng: Rng,
    project_against: str = PROJECT_AGAINST_ORIGINAL,
    stats: SurgeryStats | None = None,
) -> list[TaskGradient]:
    """Pairwise conditional projection over all tasks, in one shuffled order.

    Inputs are not mutated; the returned gradients have fresh adapter arrays,
    and head blocks are copied through untouched.
    """
    _check_structures(grads)
    if project_against not in (PROJECT_AGAINST_ORIGINAL, PROJECT_AGAINST_MUTATED):
        raise ParameterError(f"project_against must be 'original' or 'mutated', got {project_against!r}")
    groups = scope_groups(grads[0], scope)
    t_count = len(grads)

    originals = [{label: _group_vector(g, bids) for label, bids in groups} for g in grads]
    working = [{label: vec.copy() for label, vec in o.items()} for o in originals]
    if stats is not None:
        stats.floats_touched += sum(vec.size for o in originals for vec in o.values())

    order = rng.permutation(t_count)
    for i in order:
        for j in order:
            if j == i:
                continue
            source = originals if project_against == PROJECT_AGAINST_ORIGINAL else working
            for label, _ in groups:
                working[i][label] = project_pair(working[i][label], source[j][label])

    out: list[TaskGradient] = []
    for pos, g in enumerate(grads):
        blocks: dict[BlockId, Matrix] = {}
        for label, bids in groups:
            vec = working[pos][label]
            offset = 0
            for b in bids:
                shape = g.blocks[b].shape
                size = g.blocks[b].size
                blocks[b] = vec[offset : offset + size].reshape(shape).copy()
                offset += size
        for b, arr in g.blocks.items():
            if b.role == "HEAD":
                blocks[b] = arr.copy()
        out.append(TaskGradient(task_id=g.task_id, blocks=blocks))
    return out


def merge(grads: list[TaskGradient]) -> dict[BlockId, Matrix]:
    """Blockwise sum; each task's head enters only from its own gradient."""
    _check_structures(grads)
    merged: dict[BlockId, Matrix] = {}
    for g in grads:
        for b, arr in g.blocks.items():
            if b in merged:
                if merged[b].shape != arr.shape:
                    raise ShapeError(
                        f"merge: block {b} shape {arr.shape} does not match {merged[b].shape}"
                    )
                merged[b] = merged[b] + arr
            else:
                merged[b] = arr.copy()
    return merged


def build_conflict_report(step: int, grads: list[TaskGradient], scope: str) -> ConflictReport:
    """Dot/cosine rows for every unordered task pair in every scoped block.

    Computed from the gradients as given (pre-surgery originals in the
    trainer), so the report does not depend on the shuffled projection order.
    """
    _check_structures(grads)
    report = ConflictReport(step=step, scope=scope)
    if len(grads) < 2:
        return report
    groups = scope_groups(grads[0], scope)
    ordered = sorted(grads, key=lambda g: g.task_id)
    vectors = [{label: _group_vector(g, bids) for label, bids in groups} for g in ordered]
    norms = [{label: float(np.linalg.norm(v)) for label, v in vecs.items()} for vecs in vectors]
    for a in range(len(ordered)):
        for b in range(a + 1, len(ordered)):
            for label, _ in groups:
                dot = float(vectors[a][label] @ vectors[b][label])
                report.pairs.append(
                    ConflictPair(
                        i=ordered[a].task_id,
                        j=ordered[b].task_id,
                        block=label,
                        dot=dot,
                        cosine=_cosine(dot, norms[a][label], norms[b][label]),
                        conflicted=dot < 0.0,
                    )
                )
    return report
