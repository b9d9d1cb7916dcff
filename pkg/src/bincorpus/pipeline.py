"""End-to-end pipeline: ingest, relabel, clean, extract, dedup, cluster, QC.

Stage outputs are content-addressed files keyed on the digest of the stage's
input plus its parameter snapshot, so an interrupted run resumes from the
last completed stage and identical runs reuse identical outputs. The run
manifest records, per stage, the input/output digests, parameters, counts,
and timestamps.
"""

from __future__ import annotations

import datetime
import hashlib
import json
import logging
import os
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from . import alias as aliasmod
from . import evalharness
from . import qc as qcmod
from .dedup import SimilarityConfig, SimilarityMetric, dedup
from .features import (
    FeatureConfig,
    Representation,
    StructuralMode,
    extract_sample,
    read_features,
    write_features,
)
from .funcreuse import ANNConfig, cluster_functions, points_from_features
from .ingest import exact_hash_dedup, load_corpus
from .model import SampleRecord, sample_to_json
from .synth import synthetic_corpus
from .taxonomy import builtin_taxonomy, load_taxonomy

logger = logging.getLogger(__name__)

WORKERS_ENV = "BINCORPUS_WORKERS"


class PipelineConfigError(ValueError):
    pass


class StageFailure(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {cause}")


def _feature_config_from_dict(d: dict) -> FeatureConfig:
    kwargs = dict(d)
    if "representation" in kwargs:
        kwargs["representation"] = Representation(kwargs["representation"])
    if "structural_mode" in kwargs:
        kwargs["structural_mode"] = StructuralMode(kwargs["structural_mode"])
    try:
        return FeatureConfig(**kwargs)
    except (TypeError, ValueError) as e:
        raise PipelineConfigError(f"bad [features] section: {e}") from e


@dataclass
class PipelineConfig:
    corpus: Path
    outdir: Path
    kb: Path | None = None
    taxonomy: str = "x86"
    seed: int = 0
    features: FeatureConfig = field(default_factory=FeatureConfig)
    dedup_tau: float = 0.9999
    dedup_gamma: float = 5.0
    dedup_metric: SimilarityMetric = SimilarityMetric.HYBRID
    within_label_only: bool = False
    fc_tau: float = 0.999
    fc_gamma: float = 5.0
    fc_k: int = 64
    fc_max_rounds: int = 10
    gini_threshold: float = 0.2
    ablation: dict | None = None

    @classmethod
    def from_toml(cls, path: str | Path) -> "PipelineConfig":
        path = Path(path)
        try:
            raw = tomli.loads(path.read_text(encoding="utf-8"))
        except (OSError, tomli.TOMLDecodeError) as e:
            raise PipelineConfigError(f"cannot read {path}: {e}") from e
        paths = raw.get("paths", {})
        if "corpus" not in paths or "outdir" not in paths:
            raise PipelineConfigError("[paths] must define corpus and outdir")
        base = path.parent

        def resolve(p: str) -> Path:
            q = Path(p)
            return q if q.is_absolute() else base / q

        corpus = resolve(paths["corpus"])
        if not corpus.exists():
            raise PipelineConfigError(f"corpus path does not exist: {corpus}")
        kb = None
        if paths.get("kb"):
            kb = resolve(paths["kb"])
            if not kb.exists():
                raise PipelineConfigError(f"kb path does not exist: {kb}")
        taxonomy = paths.get("taxonomy", "x86")
        if taxonomy not in ("x86", "managed"):
            tpath = resolve(taxonomy)
            if not tpath.exists():
                raise PipelineConfigError(f"taxonomy path does not exist: {tpath}")
            taxonomy = str(tpath)

        d = raw.get("dedup", {})
        f = raw.get("funcluster", {})
        q = raw.get("qc", {})
        try:
            metric = SimilarityMetric(d.get("metric", "hybrid"))
        except ValueError as e:
            raise PipelineConfigError(f"bad dedup metric: {e}") from e
        cfg = cls(
            corpus=corpus,
            outdir=resolve(paths["outdir"]),
            kb=kb,
            taxonomy=taxonomy,
            seed=int(raw.get("seed", 0)),
            features=_feature_config_from_dict(raw.get("features", {})),
            dedup_tau=float(d.get("tau", 0.9999)),
            dedup_gamma=float(d.get("gamma", 5.0)),
            dedup_metric=metric,
            within_label_only=bool(d.get("within_label_only", False)),
            fc_tau=float(f.get("tau", 0.999)),
            fc_gamma=float(f.get("gamma", 5.0)),
            fc_k=int(f.get("k", 64)),
            fc_max_rounds=int(f.get("max_rounds", 10)),
            gini_threshold=float(q.get("gini_threshold", 0.2)),
            ablation=raw.get("ablation"),
        )
        if not (0.0 < cfg.dedup_tau <= 1.0) or not (0.0 < cfg.fc_tau <= 1.0):
            raise PipelineConfigError("thresholds must be in (0, 1]")
        return cfg

    def load_taxonomy_table(self):
        if self.taxonomy in ("x86", "managed"):
            return builtin_taxonomy(self.taxonomy)
        return load_taxonomy(self.taxonomy)

    def params_snapshot(self) -> dict:
        return {
            "seed": self.seed,
            "taxonomy": self.taxonomy,
            "features": {
                "c_offset": self.features.c_offset,
                "enable_z": self.features.enable_z,
                "enable_opcode_features": self.features.enable_opcode_features,
                "cfg_size_weighting": self.features.cfg_size_weighting,
                "wl_rounds": self.features.wl_rounds,
                "representation": self.features.representation.value,
                "structural_mode": self.features.structural_mode.value,
                "z_timeout_ms": self.features.z_timeout_ms,
            },
            "dedup": {
                "tau": self.dedup_tau,
                "gamma": self.dedup_gamma,
                "metric": self.dedup_metric.value,
                "within_label_only": self.within_label_only,
            },
            "funcluster": {
                "tau": self.fc_tau,
                "gamma": self.fc_gamma,
                "k": self.fc_k,
                "max_rounds": self.fc_max_rounds,
            },
            "qc": {"gini_threshold": self.gini_threshold},
            "ablation": self.ablation,
        }


@dataclass
class StageRecord:
    name: str
    input_digest: str
    output_digest: str
    output_path: str
    params_digest: str
    started_utc: str
    finished_utc: str
    count_in: int
    count_out: int
    status: str = "ok"
    error: str | None = None


@dataclass
class RunManifest:
    config_digest: str
    params: dict
    stages: list[StageRecord] = field(default_factory=list)
    status: str = "ok"

    def to_json(self) -> str:
        return json.dumps(
            {
                "schema_version": 1,
                "status": self.status,
                "config_digest": self.config_digest,
                "params": self.params,
                "stages": [vars(s) for s in self.stages],
            },
            sort_keys=True,
            indent=2,
        )


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _sha256_input(path: Path) -> str:
    if path.is_dir():
        h = hashlib.sha256()
        for child in sorted(p for p in path.rglob("*") if p.is_file()):
            h.update(child.name.encode())
            h.update(_sha256_file(child).encode())
        return h.hexdigest()
    return _sha256_file(path)


def _utcnow() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def _extract_one(args):
    sample, taxonomy, fcfg = args
    return extract_sample(sample, taxonomy, fcfg)


class PipelineRunner:
    def __init__(self, config: PipelineConfig):
        self.config = config
        self.stages_dir = config.outdir / "stages"
        self.stages_dir.mkdir(parents=True, exist_ok=True)

    def _stage_path(self, index: int, name: str, input_digest: str, params: dict, suffix: str) -> Path:
        params_json = json.dumps(params, sort_keys=True)
        key = hashlib.sha256((input_digest + params_json).encode()).hexdigest()[:12]
        return self.stages_dir / f"{index:02d}_{name}_{key}{suffix}"

    def run(self) -> RunManifest:
        cfg = self.config
        params = cfg.params_snapshot()
        manifest = RunManifest(
            config_digest=hashlib.sha256(
                json.dumps(params, sort_keys=True).encode()
            ).hexdigest(),
            params=params,
        )
        taxonomy = cfg.load_taxonomy_table()

        def run_stage(index, name, input_digest, stage_params, suffix, count_in, fn):
            """fn(out_path) -> count_out; skipped when the output already exists."""
            started = _utcnow()
            out_path = self._stage_path(index, name, input_digest, stage_params, suffix)
            try:
                if out_path.exists():
                    logger.info("stage %s: cache hit at %s", name, out_path.name)
                    count_out = fn(out_path, cached=True)
                else:
                    tmp = out_path.with_suffix(out_path.suffix + ".tmp")
                    count_out = fn(tmp, cached=False)
                    tmp.replace(out_path)
            except Exception as e:
                manifest.stages.append(
                    StageRecord(
                        name=name,
                        input_digest=input_digest,
                        output_digest="",
                        output_path=str(out_path),
                        params_digest=hashlib.sha256(
                            json.dumps(stage_params, sort_keys=True).encode()
                        ).hexdigest(),
                        started_utc=started,
                        finished_utc=_utcnow(),
                        count_in=count_in,
                        count_out=0,
                        status="failed",
                        error=str(e),
                    )
                )
                manifest.status = "failed"
                self._write_manifest(manifest)
                raise StageFailure(name, e) from e
            manifest.stages.append(
                StageRecord(
                    name=name,
                    input_digest=input_digest,
                    output_digest=_sha256_file(out_path),
                    output_path=str(out_path),
                    params_digest=hashlib.sha256(
                        json.dumps(stage_params, sort_keys=True).encode()
                    ).hexdigest(),
                    started_utc=started,
                    finished_utc=_utcnow(),
                    count_in=count_in,
                    count_out=count_out,
                    status="ok",
                )
            )
            return out_path

        # 1. ingest ---------------------------------------------------------
        corpus_digest = _sha256_input(cfg.corpus)
        samples: list[SampleRecord] = []

        def ingest_stage(out: Path, cached: bool) -> int:
            nonlocal samples
            if cached:
                samples = load_corpus(out)
            else:
                samples = load_corpus(cfg.corpus)
                _write_samples(out, samples)
            return len(samples)

        prev = run_stage(1, "ingest", corpus_digest, {"corpus": str(cfg.corpus)}, ".jsonl", 0, ingest_stage)
        prev_digest = _sha256_file(prev)

        # 2. normalize labels -------------------------------------------------
        def normalize_stage(out: Path, cached: bool) -> int:
            nonlocal samples
            if cached:
                samples = load_corpus(out)
                return len(samples)
            if cfg.kb is not None:
                kb = aliasmod.load_kb(cfg.kb)
                samples, queue, report = aliasmod.normalize_labels(samples, kb)
                review_path = cfg.outdir / "review_queue.jsonl"
                with review_path.open("w", encoding="utf-8") as fh:
                    for item in queue:
                        fh.write(json.dumps(vars(item), sort_keys=True) + "\n")
                logger.info(
                    "alias normalization: %d accepted, %d review, %d no-match",
                    report.accepted, report.review, report.no_match,
                )
            _write_samples(out, samples)
            return len(samples)

        count = len(samples)
        prev = run_stage(
            2, "normalize", prev_digest,
            {"kb": str(cfg.kb) if cfg.kb else None}, ".jsonl", count, normalize_stage,
        )
        prev_digest = _sha256_file(prev)

        # 3. clean: exact-hash collapse + label consensus ---------------------
        def clean_stage(out: Path, cached: bool) -> int:
            nonlocal samples
            if cached:
                samples = load_corpus(out)
                return len(samples)
            kept, groups = exact_hash_dedup(samples)
            resolved = []
            for s in kept:
                distinct = {label for label, _ in s.org_labels}
                if len(distinct) > 1:
                    counts = Counter(label for label, _ in s.org_labels)
                    winner = qcmod.gini_consensus(
                        qcmod.LabelGroup(s.sha256, dict(counts)), cfg.gini_threshold
                    )
                    s = SampleRecord(
                        sha256=s.sha256,
                        org_labels=((winner, "label-consensus"),),
                        first_seen=s.first_seen,
                        file_type=s.file_type,
                        functions=s.functions,
                        fcg_edges=s.fcg_edges,
                        packed=s.packed,
                    )
                resolved.append(s)
            samples = resolved
            _write_samples(out, samples)
            return len(samples)

        count = len(samples)
        prev = run_stage(
            3, "clean", prev_digest, {"gini_threshold": cfg.gini_threshold},
            ".jsonl", count, clean_stage,
        )
        prev_digest = _sha256_file(prev)

        # 4. extract features --------------------------------------------------
        features_list = []

        def extract_stage(out: Path, cached: bool) -> int:
            nonlocal features_list
            if cached:
                features_list, _ = read_features(out)
                return len(features_list)
            analyzable = [s for s in samples if s.functions]
            workers = worker_count()
            if workers > 1 and len(analyzable) > 1:
                import multiprocessing

                with multiprocessing.Pool(workers) as pool:
                    features_list = pool.map(
                        _extract_one, [(s, taxonomy, cfg.features) for s in analyzable]
                    )
            else:
                features_list = [extract_sample(s, taxonomy, cfg.features) for s in analyzable]
            write_features(out, features_list, cfg.features, taxonomy_name=taxonomy.name)
            return len(features_list)

        count = len(samples)
        prev = run_stage(
            4, "extract", prev_digest, params["features"], ".jsonl", count, extract_stage
        )
        prev_digest = _sha256_file(prev)
        features_path = prev

        # 5. near-duplicate dedup ---------------------------------------------
        kept_hashes: set[str] = set()

        def dedup_stage(out: Path, cached: bool) -> int:
            nonlocal kept_hashes
            if cached:
                with out.open(encoding="utf-8") as fh:
                    obj = json.load(fh)
                kept_hashes = set(obj["kept"])
                return len(obj["kept"])
            sim_cfg = SimilarityConfig(
                gamma=cfg.dedup_gamma, tau=cfg.dedup_tau, metric=cfg.dedup_metric
            )
            featurized = [f for f in features_list if f.global_vectors is not None]
            first_seen = {f.sha256: f.first_seen for f in featurized}
            if cfg.within_label_only:
                by_org: dict[str, list] = {}
                for f in featurized:
                    by_org.setdefault(f.org, []).append(f)
                clusters, ledger = [], []
                for org in sorted(by_org):
                    part = dedup(
                        [(f.sha256, f.global_vectors) for f in by_org[org]], sim_cfg, first_seen
                    )
                    clusters.extend(part.clusters)
                    ledger.extend(part.ledger)
            else:
                result = dedup(
                    [(f.sha256, f.global_vectors) for f in featurized], sim_cfg, first_seen
                )
                clusters, ledger = result.clusters, result.ledger
            removed = {e.removed_hash for e in ledger}
            metadata_only = [f.sha256 for f in features_list if f.global_vectors is None]
            kept_hashes = {f.sha256 for f in featurized} - removed
            kept_hashes.update(metadata_only)
            payload = {
                "kept": sorted(kept_hashes),
                "clusters": [sorted(c) for c in clusters],
                "ledger": [
                    {
                        "removed_hash": e.removed_hash,
                        "representative_hash": e.representative_hash,
                        "similarity": e.similarity,
                    }
                    for e in ledger
                ],
            }
            out.write_text(json.dumps(payload, sort_keys=True, indent=1), encoding="utf-8")
            return len(payload["kept"])

        count = len(samples)
        prev = run_stage(5, "dedup", prev_digest, params["dedup"], ".json", count, dedup_stage)
        prev_digest = _sha256_file(prev)

        # 6. function reuse clustering ----------------------------------------
        def funcluster_stage(out: Path, cached: bool) -> int:
            if cached:
                with out.open(encoding="utf-8") as fh:
                    return sum(1 for _ in fh)
            kept_features = [f for f in features_list if f.sha256 in kept_hashes]
            points = points_from_features(kept_features)
            result = cluster_functions(
                points,
                tau=cfg.fc_tau,
                gamma=cfg.fc_gamma,
                ann=ANNConfig(k=cfg.fc_k, max_rounds=cfg.fc_max_rounds),
            )
            n = 0
            with out.open("w", encoding="utf-8") as fh:
                for c in result.clusters:
                    if c.size < 2:
                        continue
                    fh.write(json.dumps(_frc_to_dict(c), sort_keys=True) + "\n")
                    n += 1
            return n

        count_in = len([f for f in features_list if f.sha256 in kept_hashes])
        prev_fc = run_stage(
            6, "funcluster", prev_digest, params["funcluster"], ".jsonl", count_in, funcluster_stage
        )

        # 7. quality report -----------------------------------------------------
        def qc_stage(out: Path, cached: bool) -> int:
            if cached:
                return len(kept_hashes)
            kept_samples = [s for s in samples if s.sha256 in kept_hashes]
            org_counts = Counter(s.primary_org for s in kept_samples)
            type_counts = Counter(s.file_type for s in kept_samples)
            report = {"samples": len(kept_samples)}
            if org_counts:
                h, hhi = qcmod.diversity(org_counts)
                report["org_diversity"] = {"h_norm": h, "hhi": hhi, "orgs": len(org_counts)}
            if type_counts:
                h, hhi = qcmod.diversity(type_counts)
                report["file_type_diversity"] = {
                    "h_norm": h, "hhi": hhi, "types": len(type_counts)
                }
            out.write_text(json.dumps(report, sort_keys=True, indent=1), encoding="utf-8")
            return len(kept_samples)

        run_stage(7, "qc", prev_digest, {"kind": "qc"}, ".json", len(kept_hashes), qc_stage)

        # 8. optional ablation ---------------------------------------------------
        if cfg.ablation is not None:
            ab = cfg.ablation

            def ablate_stage(out: Path, cached: bool) -> int:
                if cached:
                    with out.open(encoding="utf-8") as fh:
                        return max(0, sum(1 for _ in fh) - 1)
                import random as _random

                rng = _random.Random(ab.get("seed", cfg.seed))
                n_groups = int(ab.get("groups", 20))
                isolated = int(ab.get("isolated", 8))
                analyzable = [s for s in samples if s.functions]
                bases = analyzable
                if len(bases) < n_groups + isolated:
                    bases = bases + synthetic_corpus(
                        n_groups + isolated - len(bases), seed=ab.get("seed", cfg.seed)
                    )
                sizes = evalharness.sample_group_sizes(n_groups, rng)
                spec = evalharness.MutationSpec(seed=ab.get("seed", cfg.seed))
                gt = evalharness.build_ground_truth(bases, sizes, isolated, spec)
                config_ids = ab.get("configs", list(evalharness.ABLATION_MATRIX))
                configs = [evalharness.ABLATION_MATRIX[c] for c in config_ids]
                results = evalharness.run_ablation(gt, configs, taxonomy=taxonomy)
                evalharness.write_ablation_csv(out, results)
                return len(results)

            run_stage(
                8, "ablate", prev_digest,
                {k: v for k, v in ab.items()}, ".csv", len(kept_hashes), ablate_stage,
            )

        self._write_manifest(manifest)
        return manifest

    def _write_manifest(self, manifest: RunManifest) -> None:
        (self.config.outdir / "manifest.json").write_text(
            manifest.to_json() + "\n", encoding="utf-8"
        )


def _write_samples(path: Path, samples: list[SampleRecord]) -> None:
    with path.open("w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(sample_to_json(s) + "\n")


def _frc_to_dict(c) -> dict:
    return {
        "cluster_id": c.cluster_id,
        "size": c.size,
        "org_distribution": dict(sorted(c.org_distribution.items())),
        "representative": {
            "sha256": c.representative.key.sample_sha256,
            "function_id": c.representative.key.function_id,
            "start_address": c.representative.key.start_address,
            "cfg": {
                "blocks": [[i, n] for i, n in c.representative.cfg_blocks],
                "edges": [[s, d] for s, d in c.representative.cfg_edges],
            },
            "asm_summary": c.representative.asm_summary,
        },
        "cross_org": c.cross_org,
        "members": [k.as_string() for k in c.members],
    }


def run_pipeline(config: PipelineConfig) -> RunManifest:
    return PipelineRunner(config).run()
