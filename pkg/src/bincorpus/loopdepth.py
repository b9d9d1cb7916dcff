"""Natural-loop nesting depths for basic blocks.

Depths come from dominator analysis rather than path enumeration: a back
edge is an edge whose destination dominates its source, each back edge
induces a natural loop, loops sharing a header are merged, and a block's
depth is the number of distinct headers whose loop body contains it.
Blocks outside every loop (including blocks unreachable from the entry)
get depth 0. A wall-clock budget guards against pathological CFGs; callers
treat a timeout as "loop depth unavailable" for the whole function.
"""

from __future__ import annotations

import time

from .model import ControlFlowGraph


class LoopDepthTimeout(Exception):
    pass


def _immediate_dominators(
    order: list[int],
    preds: dict[int, list[int]],
    entry: int,
    deadline: float | None,
) -> dict[int, int]:
    """Iterative idom computation over a reverse-postorder worklist."""
    index = {b: i for i, b in enumerate(order)}
    idom: dict[int, int] = {entry: entry}

    def intersect(a: int, b: int) -> int:
        while a != b:
            while index[a] > index[b]:
                a = idom[a]
            while index[b] > index[a]:
                b = idom[b]
        return a

    changed = True
    while changed:
        if deadline is not None and time.monotonic() > deadline:
            raise LoopDepthTimeout
        changed = False
        for b in order:
            if b == entry:
                continue
            candidates = [p for p in preds[b] if p in idom]
            if not candidates:
                continue
            new = candidates[0]
            for p in candidates[1:]:
                new = intersect(new, p)
            if idom.get(b) != new:
                idom[b] = new
                changed = True
    return idom


def _dominates(idom: dict[int, int], entry: int, a: int, b: int) -> bool:
    # walk b's dominator chain up to the entry
    node = b
    while True:
        if node == a:
            return True
        if node == entry:
            return False
        node = idom[node]


def loop_depth_analysis(
    cfg: ControlFlowGraph, entry: int, timeout: float | None = None
) -> dict[int, int]:
    """Per-block natural-loop nesting depth, computed from the given entry.

    ``timeout`` is in seconds; raises LoopDepthTimeout when exceeded.
    """
    ids = [b.id for b in cfg.blocks]
    if entry not in set(ids):
        raise KeyError(f"entry block {entry} not in CFG")
    deadline = time.monotonic() + timeout if timeout is not None else None

    succs: dict[int, list[int]] = {b: [] for b in ids}
    preds: dict[int, list[int]] = {b: [] for b in ids}
    for s, d in cfg.edges:
        succs[s].append(d)
        preds[d].append(s)

    # reverse postorder over the reachable subgraph
    visited: set[int] = set()
    postorder: list[int] = []
    stack: list[tuple[int, int]] = [(entry, 0)]
    visited.add(entry)
    while stack:
        node, i = stack.pop()
        if i < len(succs[node]):
            stack.append((node, i + 1))
            nxt = succs[node][i]
            if nxt not in visited:
                visited.add(nxt)
                stack.append((nxt, 0))
        else:
            postorder.append(node)
    rpo = list(reversed(postorder))

    idom = _immediate_dominators(rpo, preds, entry, deadline)

    # natural loop of a back edge (s, d): d plus everything reaching s
    # without passing through d; loops with one header are merged
    bodies: dict[int, set[int]] = {}
    for s in rpo:
        for d in succs[s]:
            if deadline is not None and time.monotonic() > deadline:
                raise LoopDepthTimeout
            if d not in visited or not _dominates(idom, entry, d, s):
                continue
            body = bodies.setdefault(d, {d})
            work = [s]
            while work:
                node = work.pop()
                if node in body:
                    continue
                body.add(node)
                work.extend(p for p in preds[node] if p in visited)

    depths = {b: 0 for b in ids}
    for body in bodies.values():
        for node in body:
            depths[node] += 1
    return depths
