"""Command-line entry points for the corpus toolkit."""

from __future__ import annotations

import json
import logging
import random
import sys
from pathlib import Path

import click
import tomli

from . import alias as aliasmod
from . import evalharness
from . import qc as qcmod
from .dedup import SimilarityConfig, SimilarityMetric, dedup
from .features import extract_sample, read_features, write_features
from .funcreuse import ANNConfig, cluster_functions, points_from_features
from .ingest import load_corpus
from .model import sample_to_json
from .pipeline import (
    PipelineConfig,
    PipelineConfigError,
    StageFailure,
    _feature_config_from_dict,
    _frc_to_dict,
    run_pipeline,
)
from .synth import synthetic_corpus
from .taxonomy import builtin_taxonomy, load_taxonomy

EXIT_CONFIG_ERROR = 2
EXIT_STAGE_FAILURE = 3


def _taxonomy_from_arg(arg: str):
    if arg in ("x86", "managed"):
        return builtin_taxonomy(arg)
    return load_taxonomy(arg)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Enable debug logging.")
def main(verbose: bool):
    """Curate binary corpora from disassembly exports."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )


@main.command()
@click.option("--in", "inputs", required=True, type=click.Path(exists=True), help="Export JSONL file or directory.")
@click.option("--taxonomy", default="x86", help="Builtin table name (x86, managed) or config file path.")
@click.option("--config", "config_path", type=click.Path(exists=True), help="TOML file with feature settings.")
@click.option("--out", required=True, type=click.Path(), help="Features output file.")
def extract(inputs, taxonomy, config_path, out):
    """Extract per-function vectors and per-sample global vectors."""
    fcfg_dict = {}
    if config_path:
        raw = tomli.loads(Path(config_path).read_text(encoding="utf-8"))
        fcfg_dict = raw.get("features", raw)
    try:
        fcfg = _feature_config_from_dict(fcfg_dict)
        table = _taxonomy_from_arg(taxonomy)
    except (ValueError, FileNotFoundError) as e:
        raise click.ClickException(str(e))
    samples = load_corpus(inputs)
    records = [extract_sample(s, table, fcfg) for s in samples if s.functions]
    skipped = len(samples) - len(records)
    write_features(out, records, fcfg, taxonomy_name=table.name)
    click.echo(f"extracted {len(records)} samples ({skipped} metadata-only skipped) -> {out}")


@main.command(name="dedup")
@click.option("--features", "features_path", required=True, type=click.Path(exists=True))
@click.option("--tau", default=0.9999, show_default=True)
@click.option("--gamma", default=5.0, show_default=True)
@click.option("--metric", default="hybrid", type=click.Choice(["hybrid", "cosine"]), show_default=True)
@click.option("--within-label", is_flag=True, help="Only merge samples sharing an org label.")
@click.option("--out", required=True, type=click.Path(), help="Clusters JSONL output.")
@click.option("--ledger", "ledger_path", required=True, type=click.Path(), help="Removal ledger JSONL output.")
def dedup_cmd(features_path, tau, gamma, metric, within_label, out, ledger_path):
    """Collapse near-duplicate samples at the given similarity threshold."""
    records, _ = read_features(features_path)
    featurized = [r for r in records if r.global_vectors is not None]
    first_seen = {r.sha256: r.first_seen for r in featurized}
    cfg = SimilarityConfig(gamma=gamma, tau=tau, metric=SimilarityMetric(metric))
    groups = {"": featurized}
    if within_label:
        groups = {}
        for r in featurized:
            groups.setdefault(r.org, []).append(r)
    n_clusters = 0
    with open(out, "w", encoding="utf-8") as cf, open(ledger_path, "w", encoding="utf-8") as lf:
        for key in sorted(groups):
            result = dedup([(r.sha256, r.global_vectors) for r in groups[key]], cfg, first_seen)
            for members in result.clusters:
                rep = result.representatives[members[0]]
                cf.write(
                    json.dumps(
                        {"representative": rep, "size": len(members), "members": members},
                        sort_keys=True,
                    )
                    + "\n"
                )
                n_clusters += 1
            for e in result.ledger:
                lf.write(
                    json.dumps(
                        {
                            "removed_hash": e.removed_hash,
                            "representative_hash": e.representative_hash,
                            "similarity": e.similarity,
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )
    click.echo(f"{len(featurized)} samples -> {n_clusters} clusters at tau={tau}")


@main.command()
@click.option("--features", "features_path", required=True, type=click.Path(exists=True))
@click.option("--tau", default=0.999, show_default=True)
@click.option("--gamma", default=5.0, show_default=True)
@click.option("--k", default=64, show_default=True, help="Candidates per query.")
@click.option("--max-rounds", default=10, show_default=True)
@click.option("--include-singletons", is_flag=True)
@click.option("--out", required=True, type=click.Path(), help="Reuse clusters JSONL output.")
def funcluster(features_path, tau, gamma, k, max_rounds, include_singletons, out):
    """Cluster functions across samples into reuse clusters."""
    records, _ = read_features(features_path)
    points = points_from_features(records)
    result = cluster_functions(points, tau=tau, gamma=gamma, ann=ANNConfig(k=k, max_rounds=max_rounds))
    written = 0
    with open(out, "w", encoding="utf-8") as fh:
        for c in result.clusters:
            if c.size < 2 and not include_singletons:
                continue
            fh.write(json.dumps(_frc_to_dict(c), sort_keys=True) + "\n")
            written += 1
    cross = sum(1 for c in result.clusters if c.cross_org)
    click.echo(
        f"{len(points)} functions -> {written} clusters written "
        f"({cross} cross-org) after {result.rounds} rounds"
    )


# ---------------------------------------------------------------------------
# alias subcommands

@main.group()
def alias():
    """Query and maintain the actor alias knowledge base."""


def _load_kb_arg(kb_path):
    if kb_path is None:
        from importlib import resources

        ref = resources.files("bincorpus.data").joinpath("kb_seed.json")
        with resources.as_file(ref) as p:
            return aliasmod.load_kb(p)
    return aliasmod.load_kb(kb_path)


@alias.command()
@click.argument("name")
@click.option("--kb", "kb_path", type=click.Path(exists=True), help="KB JSON (default: bundled seed).")
def query(name, kb_path):
    """Match one actor name against the knowledge base."""
    kb = _load_kb_arg(kb_path)
    res = kb.match(name)
    out = {"query": name, "status": res.status.value, "score": round(res.score, 4)}
    if res.entry is not None:
        out["canonical_name"] = res.entry.canonical_name
        out["matched_alias"] = res.matched_alias
        out["aliases"] = sorted(res.entry.aliases)
        out["sources"] = sorted(n for n, _ in res.entry.sources)
    click.echo(json.dumps(out, indent=2))


@alias.command()
@click.option("--in", "inputs", required=True, type=click.Path(exists=True))
@click.option("--kb", "kb_path", type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--review", "review_path", required=True, type=click.Path())
def normalize(inputs, kb_path, out, review_path):
    """Rewrite accepted org labels to canonical names."""
    kb = _load_kb_arg(kb_path)
    samples = load_corpus(inputs)
    relabeled, queue, report = aliasmod.normalize_labels(samples, kb)
    with open(out, "w", encoding="utf-8") as fh:
        for s in relabeled:
            fh.write(sample_to_json(s) + "\n")
    with open(review_path, "w", encoding="utf-8") as fh:
        for item in queue:
            fh.write(json.dumps(vars(item), sort_keys=True) + "\n")
    click.echo(
        f"accepted={report.accepted} review={report.review} "
        f"no_match={report.no_match} unified_groups={report.unified_label_groups}"
    )


@alias.command()
@click.option("--kb", "kb_path", required=True, type=click.Path(exists=True))
@click.option("--jaccard", "threshold", default=0.5, show_default=True)
@click.option("--out", "out_path", type=click.Path(), help="Merged KB output (default: in place).")
@click.option("--conflicts", "conflicts_path", type=click.Path())
def merge(kb_path, threshold, out_path, conflicts_path):
    """Merge entries whose alias sets overlap above the Jaccard threshold."""
    kb = aliasmod.load_kb(kb_path)
    before = len(kb.entries)
    merged, conflicts = aliasmod.merge_entities(kb, jaccard_threshold=threshold)
    aliasmod.save_kb(merged, out_path or kb_path)
    if conflicts_path:
        with open(conflicts_path, "w", encoding="utf-8") as fh:
            for c in conflicts:
                fh.write(json.dumps(vars(c), sort_keys=True) + "\n")
    click.echo(f"{before} entries -> {len(merged.entries)} ({len(conflicts)} conflicts)")


# ---------------------------------------------------------------------------
# qc subcommands

@main.group()
def qc():
    """Dataset quality-control statistics."""


@qc.command()
@click.option("--in", "inputs", required=True, type=click.Path(exists=True),
              help="JSONL of {key, counts:{label: count}}.")
@click.option("--threshold", default=0.2, show_default=True)
@click.option("--out", type=click.Path())
def gini(inputs, threshold, out):
    """Label consensus per group: majority label or unknown."""
    lines = []
    with open(inputs, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            group = qcmod.LabelGroup(obj["key"], {k: int(v) for k, v in obj["counts"].items()})
            lines.append(
                {
                    "key": group.key,
                    "gini": qcmod.gini(group.counts),
                    "resolved": qcmod.gini_consensus(group, threshold),
                }
            )
    text = "\n".join(json.dumps(x, sort_keys=True) for x in lines) + "\n"
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        click.echo(text, nl=False)


@qc.command()
@click.option("--in", "inputs", required=True, type=click.Path(exists=True),
              help="JSON of {category: count}.")
def diversity(inputs):
    """Normalized entropy and HHI of a count distribution."""
    dist = json.loads(Path(inputs).read_text(encoding="utf-8"))
    h_norm, hhi = qcmod.diversity({k: int(v) for k, v in dist.items()})
    click.echo(json.dumps({"h_norm": h_norm, "hhi": hhi, "categories": len(dist)}, indent=2))


@qc.command()
@click.option("--in", "inputs", required=True, type=click.Path(exists=True),
              help="JSON of {org: size}.")
@click.option("--seed", default=0, show_default=True)
@click.option("--out", type=click.Path())
def plan(inputs, seed, out):
    """Tiered stratified sampling allocations."""
    sizes = {k: int(v) for k, v in json.loads(Path(inputs).read_text(encoding="utf-8")).items()}
    p = qcmod.sampling_plan(sizes, seed)
    payload = json.dumps(
        {"seed": p.seed, "total": p.total, "allocations": p.allocations}, sort_keys=True, indent=2
    )
    if out:
        Path(out).write_text(payload + "\n", encoding="utf-8")
    else:
        click.echo(payload)


@qc.command()
@click.option("--successes", "-s", required=True, type=int)
@click.option("--trials", "-n", required=True, type=int)
@click.option("--confidence", default=0.95, show_default=True)
def ci(successes, trials, confidence):
    """Exact binomial confidence interval."""
    try:
        r = qcmod.clopper_pearson(successes, trials, confidence)
    except ValueError as e:
        raise click.ClickException(str(e))
    click.echo(
        json.dumps(
            {
                "point": r.point,
                "ci_low": r.ci_low,
                "ci_high": r.ci_high,
                "confidence": r.confidence,
            },
            indent=2,
        )
    )


@qc.command()
@click.option("--type", "kind", default="cohen", type=click.Choice(["cohen", "fleiss"]), show_default=True)
@click.option("--in", "inputs", required=True, type=click.Path(exists=True),
              help="JSON matrix: contingency (cohen) or items x categories (fleiss).")
def kappa(kind, inputs):
    """Chance-corrected inter-rater agreement."""
    matrix = json.loads(Path(inputs).read_text(encoding="utf-8"))
    value = qcmod.cohen_kappa(matrix) if kind == "cohen" else qcmod.fleiss_kappa(matrix)
    click.echo(json.dumps({"kappa": value, "type": kind}))


# ---------------------------------------------------------------------------

@main.command()
@click.option("--base", "base_path", type=click.Path(exists=True),
              help="Base exports (JSONL/dir); synthesized when omitted.")
@click.option("--groups", default=221, show_default=True)
@click.option("--isolated", default=85, show_default=True)
@click.option("--configs", default="all", show_default=True,
              help='"all" or comma-separated row ids (e.g. H3,B1).')
@click.option("--thresholds", default="default", show_default=True,
              help='"default" or comma-separated values.')
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
def ablate(base_path, groups, isolated, configs, thresholds, seed, out):
    """Run the configuration ablation matrix on a mutation ground truth."""
    rng = random.Random(seed)
    if base_path:
        bases = [s for s in load_corpus(base_path) if s.functions]
    else:
        click.echo(f"synthesizing {groups + isolated} separated base samples...")
        bases = synthetic_corpus(groups + isolated, seed=seed)
    if configs == "all":
        cfg_list = list(evalharness.ABLATION_MATRIX.values())
    else:
        try:
            cfg_list = [evalharness.ABLATION_MATRIX[c.strip()] for c in configs.split(",")]
        except KeyError as e:
            raise click.ClickException(f"unknown config row {e}")
    taus = (
        evalharness.DEFAULT_THRESHOLDS
        if thresholds == "default"
        else tuple(float(t) for t in thresholds.split(","))
    )
    sizes = evalharness.sample_group_sizes(groups, rng)
    spec = evalharness.MutationSpec(seed=seed)
    gt = evalharness.build_ground_truth(bases, sizes, isolated, spec)
    click.echo(f"ground truth: {len(gt.samples)} samples, {gt.positive_pairs()} positive pairs")
    results = evalharness.run_ablation(gt, cfg_list, taus)
    evalharness.write_ablation_csv(out, results)
    for res in results:
        best = res.best
        click.echo(
            f"{res.config_id}: best F1 {best.f1:.4f} at T={best.threshold:g} "
            f"(P={best.precision:.4f} R={best.recall:.4f})"
            + (" [partial]" if res.partial else "")
        )


@main.command()
@click.option("--n", default=20, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
@click.option("--no-separation", is_flag=True, help="Skip pairwise separation checks.")
def synth(n, seed, out, no_separation):
    """Write a synthetic export corpus (JSONL)."""
    samples = synthetic_corpus(n, seed=seed, ensure_separation=not no_separation)
    with open(out, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(sample_to_json(s) + "\n")
    click.echo(f"wrote {len(samples)} samples -> {out}")


@main.group()
def pipeline():
    """Multi-stage pipeline runs."""


@pipeline.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
def run(config_path):
    """Run all pipeline stages from a TOML config."""
    try:
        cfg = PipelineConfig.from_toml(config_path)
    except PipelineConfigError as e:
        click.echo(f"config error: {e}", err=True)
        sys.exit(EXIT_CONFIG_ERROR)
    try:
        manifest = run_pipeline(cfg)
    except StageFailure as e:
        click.echo(f"pipeline failed: {e}", err=True)
        sys.exit(EXIT_STAGE_FAILURE)
    for stage in manifest.stages:
        click.echo(f"{stage.name}: {stage.count_in} -> {stage.count_out} [{stage.status}]")
    click.echo(f"manifest: {cfg.outdir / 'manifest.json'}")


if __name__ == "__main__":
    main()
