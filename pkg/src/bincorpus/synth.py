"""Seeded synthetic export corpora for evaluation and testing.

Samples get per-sample opcode-category profiles (spiky Dirichlet draws) and
randomized CFG/FCG shapes. Because evaluation treats distinct bases as true
negatives, the generator enforces pairwise separation: a candidate sample
joins the corpus only if its hybrid similarity against every accepted
sample stays below a margin under the recommended feature configuration.
"""

from __future__ import annotations

import datetime
import hashlib
import json
import random

from .dedup import SimilarityConfig, SimilarityMetric, hybrid_similarity
from .features import FeatureConfig, extract_sample
from .model import (
    BasicBlock,
    ControlFlowGraph,
    FunctionRecord,
    Instruction,
    SampleRecord,
)
from .taxonomy import OpcodeCategory, TaxonomyTable, builtin_taxonomy

SEPARATION_MARGIN = 0.98

_SEPARATION_CONFIG = FeatureConfig()  # numerical, XY, opcode on, size weighting, h=1
_SEPARATION_METRIC = SimilarityConfig(gamma=5.0, tau=1.0, metric=SimilarityMetric.HYBRID)


def content_sha256(functions, fcg_edges, salt: str) -> str:
    """Stable content hash over the structural payload plus a salt."""
    payload = {
        "salt": salt,
        "functions": [
            {
                "id": fn.function_id,
                "addr": fn.start_address,
                "blocks": [
                    [b.id, [[ins.mnemonic, ins.operand_count] for ins in b.instructions]]
                    for b in fn.cfg.blocks
                ],
                "edges": sorted(fn.cfg.edges),
            }
            for fn in functions
        ],
        "fcg": sorted(fcg_edges),
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def _category_pools(taxonomy: TaxonomyTable) -> dict[OpcodeCategory, list[str]]:
    pools: dict[OpcodeCategory, list[str]] = {}
    for mnem, cat in taxonomy.mapping.items():
        pools.setdefault(cat, []).append(mnem)
    for pool in pools.values():
        pool.sort()
    return pools


def _dirichlet(rng: random.Random, k: int, alpha: float) -> list[float]:
    draws = [rng.gammavariate(alpha, 1.0) for _ in range(k)]
    total = sum(draws) or 1.0
    return [d / total for d in draws]


def synthetic_function(
    rng: random.Random,
    function_id: str,
    start_address: int,
    profile: list[tuple[list[str], float]],
    min_blocks: int = 1,
    max_blocks: int = 12,
) -> FunctionRecord:
    n_blocks = rng.randint(min_blocks, max_blocks)
    ids = []
    cur = rng.randint(0, 40)
    for _ in range(n_blocks):
        ids.append(cur)
        cur += rng.randint(1, 3)
    blocks = []
    for bid in ids:
        n_ins = rng.randint(2, 10)
        instructions = []
        for _ in range(n_ins):
            r = rng.random()
            acc = 0.0
            pool = profile[-1][0]
            for mnems, p in profile:
                acc += p
                if r <= acc:
                    pool = mnems
                    break
            instructions.append(Instruction(rng.choice(pool)))
        blocks.append(BasicBlock(bid, tuple(instructions)))
    edges = []
    for i in range(n_blocks - 1):
        edges.append((ids[i], ids[i + 1]))
        if i + 2 < n_blocks and rng.random() < 0.4:
            edges.append((ids[i], ids[rng.randint(i + 2, n_blocks - 1)]))
        if rng.random() < 0.15:
            edges.append((ids[rng.randint(i, n_blocks - 1)], ids[i]))
    edges = sorted(set(edges))
    return FunctionRecord(function_id, start_address, ControlFlowGraph(tuple(blocks), tuple(edges)))


def synthetic_sample(
    rng: random.Random,
    index: int,
    taxonomy: TaxonomyTable | None = None,
    orgs: tuple[str, ...] = ("org-a", "org-b", "org-c", "org-d"),
    min_functions: int = 4,
    max_functions: int = 20,
    profile_alpha: float = 0.25,
) -> SampleRecord:
    taxonomy = taxonomy or builtin_taxonomy("x86")
    pools = _category_pools(taxonomy)
    usable = [cat for cat in OpcodeCategory if pools.get(cat)]
    weights = _dirichlet(rng, len(usable), profile_alpha)
    profile = [(pools[cat], w) for cat, w in zip(usable, weights)]

    n_fns = rng.randint(min_functions, max_functions)
    functions = []
    for i in range(n_fns):
        functions.append(
            synthetic_function(
                rng,
                function_id=f"f{i}",
                start_address=0x401000 + i * 0x100,
                profile=profile,
            )
        )
    fcg = set()
    for i in range(1, n_fns):
        fcg.add((f"f{rng.randrange(i)}", f"f{i}"))
    for _ in range(n_fns // 3):
        a, b = rng.randrange(n_fns), rng.randrange(n_fns)
        fcg.add((f"f{a}", f"f{b}"))

    functions = tuple(functions)
    fcg_edges = tuple(sorted(fcg))
    sha = content_sha256(functions, fcg_edges, salt=f"base:{index}")
    return SampleRecord(
        sha256=sha,
        org_labels=((rng.choice(orgs), "synthetic"),),
        first_seen=datetime.date(2006 + rng.randrange(19), rng.randint(1, 12), rng.randint(1, 28)),
        file_type="pe",
        functions=functions,
        fcg_edges=fcg_edges,
    )


def synthetic_corpus(
    n: int,
    seed: int,
    taxonomy: TaxonomyTable | None = None,
    ensure_separation: bool = True,
    max_similarity: float = SEPARATION_MARGIN,
    max_attempts_factor: int = 50,
    **sample_kwargs,
) -> list[SampleRecord]:
    """Generate n mutually dissimilar samples (deterministic per seed)."""
    taxonomy = taxonomy or builtin_taxonomy("x86")
    rng = random.Random(seed)
    accepted: list[SampleRecord] = []
    accepted_vectors = []
    attempts = 0
    index = 0
    while len(accepted) < n:
        attempts += 1
        if attempts > max_attempts_factor * n:
            raise RuntimeError(
                f"could not reach {n} separated samples after {attempts} attempts; "
                f"loosen max_similarity or raise sample diversity"
            )
        candidate = synthetic_sample(rng, index, taxonomy=taxonomy, **sample_kwargs)
        index += 1
        if not ensure_separation:
            accepted.append(candidate)
            continue
        gv = extract_sample(candidate, taxonomy, _SEPARATION_CONFIG).global_vectors
        if any(
            hybrid_similarity(gv, other, _SEPARATION_METRIC) >= max_similarity
            for other in accepted_vectors
        ):
            continue
        accepted.append(candidate)
        accepted_vectors.append(gv)
    return accepted
