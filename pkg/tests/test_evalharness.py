import random

import numpy as np
import pytest

from bincorpus.evalharness import (
    ABLATION_MATRIX,
    DEFAULT_THRESHOLDS,
    MutationOperator,
    MutationSpec,
    ThresholdMetrics,
    build_ground_truth,
    mutate,
    run_ablation,
    sample_group_sizes,
    write_ablation_csv,
)
from bincorpus.features import FeatureConfig, Representation, StructuralMode, extract_sample
from bincorpus.synth import synthetic_corpus

from conftest import make_sample, three_block_function


def rates(**kw):
    base = {op: 0.0 for op in MutationOperator}
    for name, value in kw.items():
        base[MutationOperator[name]] = value
    return base


@pytest.fixture(scope="module")
def bases():
    return synthetic_corpus(10, seed=77)


def test_mutant_hash_always_differs(bases):
    spec = MutationSpec(rates=rates(), seed=1)
    m = mutate(bases[0], spec)
    assert m.sha256 != bases[0].sha256
    assert m.functions == bases[0].functions  # no operators fired
    assert m.fcg_edges == bases[0].fcg_edges


def test_mutate_deterministic(bases):
    spec = MutationSpec(seed=5)
    assert mutate(bases[0], spec, nonce=3) == mutate(bases[0], spec, nonce=3)
    assert mutate(bases[0], spec, nonce=3).sha256 != mutate(bases[0], spec, nonce=4).sha256


def test_register_rename_feature_identical(bases, x86):
    spec = MutationSpec(rates=rates(REGISTER_RENAME=1.0, CONSTANT_EDIT=1.0), seed=2)
    cfg = FeatureConfig()
    for base in bases[:4]:
        m = mutate(base, spec)
        g0 = extract_sample(base, x86, cfg).global_vectors
        g1 = extract_sample(m, x86, cfg).global_vectors
        assert np.array_equal(g0.v_struct, g1.v_struct)
        assert np.array_equal(g0.v_sem, g1.v_sem)


def test_block_reorder_changes_x_not_w(x86):
    sample = make_sample(functions=[three_block_function()])
    spec = MutationSpec(rates=rates(BLOCK_REORDER=1.0), seed=3)
    m = mutate(sample, spec)
    cfg = FeatureConfig(cfg_size_weighting=False)
    from bincorpus.features import function_opcode_cfg

    v0 = function_opcode_cfg(sample.functions[0], x86, cfg)
    v1 = function_opcode_cfg(m.functions[0], x86, cfg)
    assert v1.w == v0.w
    assert v1.x != v0.x
    assert v1.y == v0.y  # degree structure preserved on this fixture


def test_nop_pad_adds_ignorable_instructions(bases, x86):
    spec = MutationSpec(rates=rates(NOP_PAD=1.0), seed=4)
    base = bases[0]
    m = mutate(base, spec)
    before = sum(b.n for fn in base.functions for b in fn.cfg.blocks)
    after = sum(b.n for fn in m.functions for b in fn.cfg.blocks)
    assert after > before
    added = after - before
    nops_before = sum(
        1 for fn in base.functions for b in fn.cfg.blocks
        for i in b.instructions if i.mnemonic == "nop"
    )
    nops_after = sum(
        1 for fn in m.functions for b in fn.cfg.blocks
        for i in b.instructions if i.mnemonic == "nop"
    )
    assert nops_after - nops_before == added


def test_helper_refactor_splits_one_block(bases):
    spec = MutationSpec(rates=rates(HELPER_REFACTOR=1.0), seed=6)
    base = bases[1]
    m = mutate(base, spec)
    assert sum(fn.cfg_size for fn in m.functions) == sum(fn.cfg_size for fn in base.functions) + 1
    assert m.functions[0] == base.functions[0]  # entry function untouched


def test_mutate_rejects_metadata_only():
    doc = make_sample(functions=[])
    with pytest.raises(ValueError):
        mutate(doc, MutationSpec())


# ---------------------------------------------------------------------------
# ground truth

def test_ground_truth_counts(bases):
    spec = MutationSpec(seed=9)
    gt = build_ground_truth(bases, [2, 3], isolated=1, spec=spec)
    assert len(gt.samples) == 6
    assert gt.positive_pairs() == 1 + 3
    assert len(set(s.sha256 for s in gt.samples)) == 6


def test_ground_truth_no_groups_all_negative(bases):
    gt = build_ground_truth(bases, [], isolated=4, spec=MutationSpec(seed=1))
    assert gt.positive_pairs() == 0


def test_ground_truth_pairs_equal_groups_at_size_two(bases):
    gt = build_ground_truth(bases, [2, 2, 2], isolated=0, spec=MutationSpec(seed=1))
    assert gt.positive_pairs() == 3


def test_ground_truth_needs_enough_bases(bases):
    with pytest.raises(ValueError):
        build_ground_truth(bases[:2], [2, 2], isolated=1, spec=MutationSpec())
    with pytest.raises(ValueError):
        build_ground_truth(bases, [1], isolated=0, spec=MutationSpec())


def test_group_size_distribution_shape():
    rng = random.Random(13)
    sizes = sample_group_sizes(3000, rng)
    assert min(sizes) >= 2 and max(sizes) <= 69
    assert sum(sizes) / len(sizes) == pytest.approx(8.06, abs=0.5)


# ---------------------------------------------------------------------------
# metrics and the matrix

def test_threshold_metrics_hand_arithmetic():
    m = ThresholdMetrics(threshold=0.9, tp=3, fp=1, tn=10, fn=1)
    assert m.precision == 0.75
    assert m.recall == 0.75
    assert m.f1 == pytest.approx(0.75)
    empty = ThresholdMetrics(0.9, 0, 0, 5, 0)
    assert empty.f1 == 0.0  # 0/0 convention


def test_matrix_has_seventeen_rows():
    assert len(ABLATION_MATRIX) == 17
    assert set(ABLATION_MATRIX) == {
        "B1", "B2", "B3", "N1", "N2", "N3", "O1", "O2", "O3", "O4",
        "W1", "W2", "W3", "H1", "H2", "H3", "H4",
    }
    h3 = ABLATION_MATRIX["H3"]
    assert h3.features.representation is Representation.NUMERICAL
    assert h3.features.structural_mode is StructuralMode.XY
    assert h3.features.enable_opcode_features
    assert h3.features.cfg_size_weighting
    assert h3.features.wl_rounds == 1
    b1 = ABLATION_MATRIX["B1"]
    assert b1.features.representation is Representation.STRING_HASH
    assert b1.features.structural_mode is StructuralMode.CENTROID
    assert not b1.features.enable_opcode_features


def test_exact_copies_perfect_under_any_config(bases, x86):
    # every sample is a copy of one base: all pairs positive, no negatives
    spec = MutationSpec(rates=rates(), seed=21)  # hash-only mutants
    gt = build_ground_truth(bases, [6], isolated=0, spec=spec)
    assert gt.positive_pairs() == 15
    for cid in ("H3", "N2", "B2", "W1", "O3"):
        rows = run_ablation(gt, [ABLATION_MATRIX[cid]], taxonomy=x86)[0]
        for row in rows.rows:
            assert row.precision == 1.0, (cid, row.threshold)
            assert row.recall == 1.0, (cid, row.threshold)
            assert row.f1 == 1.0


def test_pair_counts_complete(bases, x86):
    gt = build_ground_truth(bases, [3, 2], isolated=2, spec=MutationSpec(seed=2))
    n = len(gt.samples)
    res = run_ablation(gt, [ABLATION_MATRIX["H3"]], taxonomy=x86)[0]
    for row in res.rows:
        assert row.tp + row.fp + row.tn + row.fn == n * (n - 1) // 2


def test_feature_identical_mutants_always_recalled(bases, x86):
    spec = MutationSpec(rates=rates(REGISTER_RENAME=1.0, CONSTANT_EDIT=1.0), seed=31)
    gt = build_ground_truth(bases, [2, 2, 2, 2], isolated=0, spec=spec)
    for cid in ("N2", "O3", "W2", "H3"):
        res = run_ablation(gt, [ABLATION_MATRIX[cid]], taxonomy=x86)[0]
        for row in res.rows:
            assert row.recall == 1.0, (cid, row.threshold)


def test_run_ablation_reproducible(bases, x86):
    gt = build_ground_truth(bases, [3, 2], isolated=2, spec=MutationSpec(seed=2))
    r1 = run_ablation(gt, [ABLATION_MATRIX["H3"], ABLATION_MATRIX["B1"]], taxonomy=x86)
    r2 = run_ablation(gt, [ABLATION_MATRIX["H3"], ABLATION_MATRIX["B1"]], taxonomy=x86)
    for a, b in zip(r1, r2):
        assert [(m.tp, m.fp, m.tn, m.fn) for m in a.rows] == [
            (m.tp, m.fp, m.tn, m.fn) for m in b.rows
        ]
        assert a.best_f1_threshold == b.best_f1_threshold


def test_partial_flag_on_z_timeout(x86):
    from conftest import block, function

    n = 20000
    blocks = [block(i, ["nop"]) for i in range(n)]
    edges = [(i, i + 1) for i in range(n - 1)] + [(i + 1, i) for i in range(0, n - 1, 2)]
    monster = make_sample(functions=[function("f0", 0x10, blocks, edges)])
    gt = build_ground_truth(
        [monster] + synthetic_corpus(2, seed=400), [2], isolated=1, spec=MutationSpec(rates=rates(), seed=1)
    )
    res = run_ablation(gt, [ABLATION_MATRIX["H4"]], taxonomy=x86, z_timeout_s=1e-6)[0]
    assert res.partial


def test_csv_output(tmp_path, bases, x86):
    gt = build_ground_truth(bases, [2], isolated=1, spec=MutationSpec(seed=2))
    res = run_ablation(gt, [ABLATION_MATRIX["H3"]], taxonomy=x86)
    out = tmp_path / "ablation.csv"
    write_ablation_csv(out, res)
    lines = out.read_text().strip().splitlines()
    assert lines[0].startswith("config_id,threshold,tp,fp,tn,fn")
    assert len(lines) == 1 + len(DEFAULT_THRESHOLDS)
    assert lines[1].startswith("H3,0.99,")
