"""
Stage orchestration.

Each stage reads the previous stage's files from the run directory and
writes its own, so any stage can be re-run on its own. ``manifest.json``
collects the effective configuration, seeds, backend ids and everything
that was dropped or failed along the way.
"""
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Sequence, Tuple

from loguru import logger

from ruleforge.services import analytics_service as analytics
from ruleforge.services.baseline_service import run_baseline
from ruleforge.services.cluster_service import (
    choose_k,
    cluster_manifest,
    clusters_from_manifest,
    filter_clusters,
    kmeans,
    select_representatives,
)
from ruleforge.services.corpus_service import (
    RegistryClient,
    dedup_corpus,
    discover_archives,
    load_corpus,
    records_from_json,
    records_to_json,
)
from ruleforge.services.embedding_service import EmbeddingService
from ruleforge.services.errors import (
    AlignmentFailure,
    EmptyInput,
    NoRuleFound,
    StageInputMissing,
    UnitTooLarge,
)
from ruleforge.services.llm_service import PromptBuilder, complete, create_backend, parse_rule_output
from ruleforge.services.matcher_service import (
    report_from_files,
    report_to_dict,
    scan_corpus,
    write_findings_jsonl,
)
from ruleforge.services.models import (
    BasicUnit,
    CodeCluster,
    Label,
    MemberRef,
    MetadataFlag,
    PackageArchive,
    PackageRecord,
    Provenance,
    Rule,
    RuleDraft,
    RuleFormat,
)
from ruleforge.services.segmenter_service import SegmenterService
from ruleforge.services.settings import RunConfig
from ruleforge.services.validator_service import (
    RuleValidator,
    align_rule,
    ensure_unique_name,
    rule_from_record,
    write_rule,
)

STAGES = ("ingest", "segment", "cluster", "generate", "validate", "scan", "eval", "baseline", "analyze")
STAGE_TITLES = {
    "ingest": "Unpacking packages",
    "segment": "Segmenting sources",
    "cluster": "Clustering code units",
    "generate": "Generating rules",
    "validate": "Validating rules",
    "scan": "Scanning corpus",
    "eval": "Computing metrics",
    "baseline": "Building score baseline",
    "analyze": "Analyzing rule set",
}


def _dump(data: Any) -> str:
    return json.dumps(data, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


class RunManifest:
    """``manifest.json`` of a run directory; rewritten after every stage."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self.data: Dict[str, Any] = {}
        if self.path.is_file():
            self.data = json.loads(self.path.read_text(encoding="utf-8"))

    def record(self, stage: str, config: RunConfig, **entries: Any) -> None:
        self.data["config"] = config.dump()
        self.data["seeds"] = config.seeds
        stages = self.data.setdefault("stages", {})
        stages[stage] = entries
        self.data["stage_order"] = [s for s in STAGES if s in stages]
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(_dump(self.data), encoding="utf-8")

    def set_backend(self, kind: str, backend_id: str) -> None:
        self.data.setdefault("backends", {})[kind] = backend_id


class Pipeline:
    """
    Runs pipeline stages against one run directory.

    Args:
        config: Validated run configuration
    """

    def __init__(self, config: RunConfig):
        self.config = config
        self.run_dir = Path(config.output_dir)
        self.manifest = RunManifest(self.run_dir / "manifest.json")
        self.validator = RuleValidator.from_settings(config.validator)

    # ------------------------------------------------------------------
    # helpers

    def path(self, *parts: str) -> Path:
        return self.run_dir.joinpath(*parts)

    def _require(self, stage: str, *parts: str) -> Path:
        path = self.path(*parts)
        if not path.exists():
            raise StageInputMissing(stage, "/".join(parts))
        return path

    def _read_json(self, stage: str, *parts: str) -> Any:
        return json.loads(self._require(stage, *parts).read_text(encoding="utf-8"))

    def _write(self, content: str, *parts: str) -> Path:
        path = self.path(*parts)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(content, encoding="utf-8")
        return path

    def load_records(self, stage: str) -> List[PackageRecord]:
        return records_from_json(self._read_json(stage, "ingest", "packages.json"), self.run_dir)

    def load_units(self, stage: str) -> Tuple[List[BasicUnit], Dict[MemberRef, Label]]:
        entries = self._read_json(stage, "segment", "units.json")
        units = [BasicUnit.from_dict(e) for e in entries]
        labels = {u.ref: Label(e["label"]) for u, e in zip(units, entries)}
        return units, labels

    def load_rules(self, stage: str) -> List[Rule]:
        entries = self._read_json(stage, "generate", "rules.json")
        return self._rules_from_entries(entries, self.path("generate"))

    def _rules_from_entries(self, entries: Sequence[Dict], base: Path) -> List[Rule]:
        rules = []
        for entry in entries:
            text = (base / entry["file"]).read_text(encoding="utf-8")
            rules.append(rule_from_record(text, RuleFormat(entry["format"]), entry, self.validator))
        return rules

    # ------------------------------------------------------------------
    # stages

    def ingest(self) -> List[PackageRecord]:
        corpus = self.config.corpus
        archives: List[PackageArchive] = []
        for label, locations in ((Label.MALICIOUS, corpus.malicious), (Label.LEGITIMATE, corpus.legitimate)):
            for location in locations:
                location = Path(location)
                if location.is_file():
                    archives.append(PackageArchive(str(location), corpus.ecosystem, label))
                else:
                    archives.extend(discover_archives(location, label, corpus.ecosystem))
        if not archives:
            raise EmptyInput("no package archives found in corpus.malicious / corpus.legitimate")

        registry = None
        if corpus.allow_network:
            registry = RegistryClient(corpus.registry_endpoints, corpus.registry_timeout)
        try:
            records, dropped = load_corpus(
                archives, self.path("ingest", "unpacked"), corpus.allow_network, self.config.jobs, registry,
                corpus.max_member_bytes, corpus.max_archive_bytes,
            )
        finally:
            if registry is not None:
                registry.close()

        unique = dedup_corpus(records)
        kept_ids = {id(r) for r in unique}
        duplicates = sorted(Path(r.archive).name for r in records if id(r) not in kept_ids)

        survivors, seen = [], set()
        for record in unique:
            if record.name in seen:
                dropped.append({
                    "archive": Path(record.archive).name,
                    "error": "name_collision",
                    "message": f"package name '{record.name}' already taken by another archive",
                })
                continue
            seen.add(record.name)
            survivors.append(record)

        self._write(_dump(records_to_json(survivors, self.run_dir)), "ingest", "packages.json")
        counts = {label.value: sum(1 for r in survivors if r.label is label) for label in (Label.MALICIOUS, Label.LEGITIMATE)}
        logger.info(f"✅ Ingested {len(survivors)} packages ({counts['malicious']} malicious, "
                    f"{counts['legitimate']} legitimate); {len(duplicates)} duplicate(s), {len(dropped)} dropped")
        self.manifest.record(
            "ingest", self.config,
            archives=len(archives),
            packages=len(survivors),
            labels=counts,
            duplicates=duplicates,
            dropped=sorted(dropped, key=lambda d: d["archive"]),
        )
        return survivors

    def segment(self) -> List[BasicUnit]:
        records = self.load_records("segment")
        segmenter = SegmenterService.from_settings(self.config.segmenter)
        units_out, flags_out, all_units = [], {}, []
        for record in records:
            units = segmenter.units_for_record(record)
            all_units.extend(units)
            units_out.extend(dict(u.to_dict(), label=record.label.value) for u in units)
            flags = segmenter.audit(record.metadata)
            if flags:
                flags_out[record.name] = [f.to_dict() for f in flags]
        self._write(_dump(units_out), "segment", "units.json")
        self._write(_dump(flags_out), "segment", "flags.json")
        logger.info(f"✅ Extracted {len(all_units)} basic units; {len(flags_out)} package(s) with metadata flags")
        self.manifest.record("segment", self.config, units=len(all_units), flagged_packages=sorted(flags_out))
        return all_units

    def _cluster_group(self, units: Sequence[BasicUnit], embedder: EmbeddingService,
                       segmenter: SegmenterService) -> Tuple[List[CodeCluster], int, List[int]]:
        settings = self.config.cluster
        pairs = []
        for unit in units:
            segments = [s for s in segmenter.segments_for_unit(unit) if s.tokens]
            if segments:
                pairs.append((unit, segments))
        if not pairs:
            return [], 0, []
        vectors = embedder.embed_units(pairs)
        k = choose_k(len(vectors), settings.k)
        clusters = kmeans(vectors, k, settings.seed, settings.max_iter, settings.similarity)
        retained = [c.id for c in filter_clusters(clusters, settings.intra_threshold)]
        return clusters, k, retained

    def cluster(self) -> List[CodeCluster]:
        units, labels = self.load_units("cluster")
        minimum = self.config.segmenter.min_unit_chars
        eligible = [u for u in units if u.char_len >= minimum]
        malicious = [u for u in eligible if labels[u.ref] is Label.MALICIOUS]
        legitimate = [u for u in eligible if labels[u.ref] is Label.LEGITIMATE]
        if not malicious:
            raise EmptyInput("no malicious basic units to cluster")

        embedder = EmbeddingService.from_settings(self.config.embedding)
        segmenter = SegmenterService.from_settings(self.config.segmenter)
        clusters, k, retained = self._cluster_group(malicious, embedder, segmenter)
        legit_clusters, legit_k, legit_retained = self._cluster_group(legitimate, embedder, segmenter)

        seed = self.config.cluster.seed
        self._write(cluster_manifest(clusters, k, seed, retained), "cluster", "manifest.json")
        self._write(cluster_manifest(legit_clusters, legit_k, seed, legit_retained), "cluster", "legit_manifest.json")
        logger.info(f"✅ {len(clusters)} malicious clusters (k={k}), {len(retained)} retained; "
                    f"{len(legit_clusters)} legitimate clusters")
        self.manifest.set_backend("embedding", embedder.backend_id)
        self.manifest.record(
            "cluster", self.config,
            k=k,
            legit_k=legit_k,
            clusters=len(clusters),
            retained=retained,
            legit_clusters=len(legit_clusters),
        )
        return [c for c in clusters if c.id in set(retained)]

    def _retained_clusters(self, stage: str, name: str = "manifest.json", retained_only: bool = True) -> List[CodeCluster]:
        data = self._read_json(stage, "cluster", name)
        clusters = clusters_from_manifest(data)
        if not retained_only:
            return clusters
        keep = {entry["id"] for entry in data["clusters"] if entry.get("retained")}
        return [c for c in clusters if c.id in keep]

    def generate(self) -> List[Rule]:
        """Craft, refine and align one draft per (retained cluster or flagged package, format)."""
        settings = self.config.generate
        units, _ = self.load_units("generate")
        unit_map = {u.ref: u for u in units}
        clusters = self._retained_clusters("generate")
        flags_data = self._read_json("generate", "segment", "flags.json")
        records = {r.name: r for r in self.load_records("generate")}

        builder = PromptBuilder.from_settings(settings)
        backend = create_backend(self.config.llm)
        self.manifest.set_backend("llm", backend.backend_id)

        jobs: List[Tuple[RuleFormat, Dict[str, Any]]] = []
        for rule_format in settings.formats:
            for cluster in clusters:
                jobs.append((rule_format, {"cluster": cluster}))
            if settings.metadata_rules:
                for package in sorted(flags_data):
                    record = records.get(package)
                    if record is not None and record.label is Label.MALICIOUS:
                        flags = [MetadataFlag.from_dict(f) for f in flags_data[package]]
                        jobs.append((rule_format, {"package": record, "flags": flags}))

        def run(job) -> Dict[str, Any]:
            rule_format, source = job
            return self._generate_one(rule_format, source, unit_map, builder, backend)

        with ThreadPoolExecutor(max_workers=self.config.jobs) as pool:
            outcomes = list(pool.map(run, jobs))

        rules: List[Rule] = []
        failures, skipped = [], []
        taken: Dict[RuleFormat, set] = {fmt: set() for fmt in RuleFormat}
        for outcome in outcomes:
            if "rule" in outcome:
                rules.append(ensure_unique_name(outcome["rule"], taken[outcome["rule"].rule_format], self.validator))
            elif "failure" in outcome:
                failures.append(outcome["failure"])
            else:
                skipped.append(outcome["skipped"])

        entries = []
        for rule in rules:
            folder = self.path("generate", "rules", rule.rule_format.value)
            path = write_rule(rule, folder, self.config.validator.line_endings)
            entries.append({
                "name": rule.name,
                "format": rule.rule_format.value,
                "file": path.relative_to(self.path("generate")).as_posix(),
                "provenance": rule.provenance.to_dict(),
                "scores": rule.scores.to_dict(),
                "attempts": rule.attempts,
            })
        self._write(_dump(entries), "generate", "rules.json")
        self._write(_dump(failures), "generate", "failures.json")
        logger.info(f"✅ Generated {len(rules)} rule(s); {len(failures)} alignment failure(s), "
                    f"{len(skipped)} skipped craft(s)")
        self.manifest.record(
            "generate", self.config,
            rules=len(rules),
            failed_alignments=failures,
            skipped_crafts=skipped,
            refine=settings.refine,
            align=settings.align,
        )
        return rules

    def _generate_one(self, rule_format: RuleFormat, source: Dict[str, Any], unit_map: Dict[MemberRef, BasicUnit],
                      builder: PromptBuilder, backend) -> Dict[str, Any]:
        settings = self.config.generate
        if "cluster" in source:
            cluster: CodeCluster = source["cluster"]
            label = f"cluster {cluster.id}"
            try:
                representatives = select_representatives(cluster, unit_map, self.config.cluster.representatives)
                prompt = builder.build_craft_prompt(rule_format, units=representatives)
            except UnitTooLarge as exc:
                return {"skipped": {"source": label, "format": rule_format.value, "error": exc.code, "message": str(exc)}}
            provenance = Provenance(
                cluster_id=cluster.id,
                representatives=tuple(f"{u.package}:{u.file}#{u.index}" for u in representatives),
            )
        else:
            record: PackageRecord = source["package"]
            label = f"package {record.name}"
            prompt = builder.build_craft_prompt(rule_format, metadata=record.metadata, flags=source["flags"])
            provenance = Provenance(package=record.name, flags=tuple(f.kind.value for f in source["flags"]))

        try:
            draft = parse_rule_output(complete(prompt, backend), rule_format)
        except NoRuleFound as exc:
            logger.warning(f"⚠️  Craft for {label} ({rule_format.value}) produced no rule")
            return {"skipped": {"source": label, "format": rule_format.value, "error": exc.code, "message": str(exc)}}
        draft = replace(draft, provenance=provenance)

        if settings.refine and draft.analysis_text.strip():
            refine_prompt = builder.build_refine_prompt(draft.analysis_text, draft.rule_text, rule_format)
            try:
                refined = parse_rule_output(complete(refine_prompt, backend), rule_format)
                draft = RuleDraft(
                    analysis_text=refined.analysis_text or draft.analysis_text,
                    rule_text=refined.rule_text,
                    rule_format=rule_format,
                    provenance=provenance,
                    scores=draft.scores.merged(refined.scores),
                )
            except NoRuleFound:
                logger.warning(f"⚠️  Refine for {label} returned no rule; keeping the crafted draft")

        attempts = settings.max_fix_attempts if settings.align else 0
        try:
            rule = align_rule(draft, backend, self.validator, attempts, settings.memory_size, builder.build_fix_prompt)
        except AlignmentFailure as exc:
            logger.warning(f"⚠️  {exc}")
            return {"failure": dict(exc.to_dict(), source=label, format=rule_format.value)}
        return {"rule": rule}

    def validate(self) -> Dict[str, Any]:
        """Recompile every generated rule file."""
        entries = self._read_json("validate", "generate", "rules.json")
        results = []
        for entry in entries:
            text = self.path("generate", entry["file"]).read_bytes()
            outcome = self.validator.validate(text, RuleFormat(entry["format"]))
            errors = [] if isinstance(outcome, Rule) else [e.to_dict() for e in outcome]
            results.append({"name": entry["name"], "format": entry["format"], "ok": not errors, "errors": errors})
        report = {
            "rules": len(results),
            "passed": sum(1 for r in results if r["ok"]),
            "results": results,
        }
        self._write(_dump(report), "validate", "report.json")
        logger.info(f"✅ Validated {report['passed']}/{report['rules']} rule(s)")
        self.manifest.record("validate", self.config, rules=report["rules"], passed=report["passed"])
        return report

    def _scan(self, rules: Sequence[Rule], records: Sequence[PackageRecord], *folder: str) -> Dict[str, Any]:
        matcher = self.config.matcher
        report = scan_corpus(rules, records, matcher.threshold, self.config.jobs, matcher.timeout_seconds,
                             matcher.semgrep_binary)
        self._write(_dump(report_to_dict(report)), *folder, "verdicts.json")
        self._write(_dump(report.tallies), *folder, "tallies.json")
        write_findings_jsonl(report.matches, self.path(*folder, "findings.jsonl"))
        return {"rules": len(rules), "timeouts": report.timeouts, "approximate": report.approximate}

    def scan(self) -> Dict[str, Any]:
        rules = self.load_rules("scan")
        records = self.load_records("scan")
        summary = {}
        for rule_format in self.config.generate.formats:
            subset = [r for r in rules if r.rule_format is rule_format]
            summary[rule_format.value] = self._scan(subset, records, "scan", rule_format.value)
        self.manifest.record("scan", self.config, threshold=self.config.matcher.threshold, formats=summary)
        return summary

    def _load_report(self, stage: str, *folder: str):
        verdicts = self._read_json(stage, *folder, "verdicts.json")
        tallies = self._read_json(stage, *folder, "tallies.json")
        return report_from_files(verdicts, tallies)

    def _evaluate(self, report, *folder: str) -> Dict[str, Any]:
        metrics = analytics.confusion_metrics(report.verdicts)
        summary = dict(metrics.to_dict(), threshold=report.threshold, approximate=report.approximate)
        analytics.write_json(self.path(*folder, "metrics.json"), summary)

        labels = report.labels
        precision = analytics.per_rule_precision(report.tallies, labels)
        analytics.write_json(self.path(*folder, "per_rule_precision.json"), precision)
        self._write(analytics.per_rule_precision_csv(precision), *folder, "per_rule_precision.csv")

        coverage = analytics.coverage_cdf(analytics.coverage_counts(report.tallies, labels))
        self._write(analytics.coverage_cdf_csv(coverage), *folder, "coverage_cdf.csv")

        sweep = analytics.threshold_sweep(report, self.config.analytics.sweep_thresholds)
        self._write(analytics.threshold_sweep_csv(sweep), *folder, "threshold_sweep.csv")
        return summary

    def eval(self) -> Dict[str, Any]:
        results = {}
        for rule_format in self.config.generate.formats:
            report = self._load_report("eval", "scan", rule_format.value)
            results[rule_format.value] = self._evaluate(report, "eval", rule_format.value)
            pct = {k: "n/a" if v is None else f"{v}%" for k, v in results[rule_format.value]["percent"].items()}
            logger.info(f"📊 {rule_format.display_name}: accuracy {pct['accuracy']}, precision {pct['precision']}, "
                        f"recall {pct['recall']}, F1 {pct['f1']}")
        self.manifest.record("eval", self.config, formats=sorted(results))
        return results

    def _file_index(self, records: Sequence[PackageRecord]) -> Dict[Tuple[str, str], Any]:
        return {(r.name, f.relative_path): f for r in records for f in r.files}

    def baseline(self) -> Dict[str, Any]:
        mal_clusters = self._retained_clusters("baseline")
        legit_clusters = self._retained_clusters("baseline", "legit_manifest.json", retained_only=False)
        records = self.load_records("baseline")
        rules, skipped = run_baseline(mal_clusters, legit_clusters, self._file_index(records), self.config.baseline)

        taken: set = set()
        entries = []
        for rule in rules:
            rule = ensure_unique_name(rule, taken, self.validator)
            path = write_rule(rule, self.path("baseline", "rules"), self.config.validator.line_endings)
            entries.append({
                "name": rule.name,
                "format": rule.rule_format.value,
                "file": path.relative_to(self.path("baseline")).as_posix(),
                "provenance": rule.provenance.to_dict(),
                "scores": rule.scores.to_dict(),
                "attempts": 0,
            })
        self._write(_dump(entries), "baseline", "rules.json")
        self._write(_dump(skipped), "baseline", "skipped.json")
        scan_summary = self._scan(rules, records, "baseline", "scan")
        summary = self._evaluate(self._load_report("baseline", "baseline", "scan"), "baseline", "eval")
        self.manifest.record("baseline", self.config, rules=len(rules), skipped_pairs=len(skipped),
                             timeouts=scan_summary["timeouts"])
        return summary

    def _reference_rules(self) -> List[Rule]:
        reference = self.config.analytics.reference_rules
        if reference is None:
            return []
        paths = [reference] if Path(reference).is_file() else sorted(
            p for p in Path(reference).rglob("*") if p.suffix in (".yar", ".yara", ".yaml", ".yml")
        )
        rules = []
        for path in paths:
            rule_format = RuleFormat.YARA if path.suffix in (".yar", ".yara") else RuleFormat.SEMGREP
            outcome = self.validator.validate(path.read_bytes(), rule_format)
            if isinstance(outcome, Rule):
                rules.append(outcome)
            else:
                logger.warning(f"⚠️  Reference rule {path.name} does not compile; skipped")
        return rules

    def analyze(self) -> Dict[str, Any]:
        settings = self.config.analytics
        rules = self.load_rules("analyze")
        records = self.load_records("analyze")
        labels = {r.name: r.label for r in records}
        taxonomy = analytics.load_taxonomy(settings.taxonomy)

        tags = {rule.name + rule.rule_format.file_suffix: analytics.classify_rule(rule, taxonomy) for rule in rules}
        analytics.write_json(self.path("analyze", "taxonomy.json"), {
            "note": "keyword heuristic approximation of manual rule labeling",
            "rules": {name: [[t.category, t.subcategory] for t in sorted(rule_tags)] for name, rule_tags in sorted(tags.items())},
            "subcategories": analytics.subcategory_counts(tags.values()),
        })
        matrix = analytics.category_heatmap(tags.values(), taxonomy.categories)
        self._write(analytics.category_heatmap_csv(matrix, taxonomy.categories), "analyze", "heatmap.csv")

        scores = analytics.score_cdf(rules)
        for name, entry in scores.items():
            self._write(analytics.score_cdf_csv(entry), "analyze", f"score_cdf_{name}.csv")
        analytics.write_json(self.path("analyze", "score_excluded.json"), {k: v["excluded"] for k, v in scores.items()})

        tallies: Dict[str, List[str]] = {}
        for rule_format in self.config.generate.formats:
            report = self._load_report("analyze", "scan", rule_format.value)
            for rule_id, packages in report.tallies.items():
                tallies[rule_id + rule_format.file_suffix] = packages
        ranges = analytics.category_detection_range(tags, tallies, labels, taxonomy.categories)
        self._write(analytics.category_detection_range_csv(ranges), "analyze", "category_range.csv")

        reference = self._reference_rules()
        if not reference and self.path("baseline", "rules.json").is_file():
            entries = json.loads(self.path("baseline", "rules.json").read_text(encoding="utf-8"))
            reference = self._rules_from_entries(entries, self.path("baseline"))
        overlap = analytics.rule_overlap(
            [r for r in rules if r.rule_format is RuleFormat.YARA],
            reference,
            settings.overlap_threshold,
        )
        analytics.write_json(self.path("analyze", "overlap.json"), overlap)

        variants = self._variant_detection(rules, records)
        analytics.write_json(self.path("analyze", "variant_detection.json"), variants)

        self.manifest.record("analyze", self.config, tagged_rules=len(tags), overlap=overlap["overlap_count"],
                             variant_rate=variants["rate"])
        return {"taxonomy": len(tags), "overlap": overlap["overlap_count"], "variants": variants}

    def _variant_detection(self, rules: Sequence[Rule], records: Sequence[PackageRecord]) -> Dict[str, Any]:
        by_name = {r.name: r for r in records}
        clusters = {c.id: c for c in self._retained_clusters("analyze")}
        per_cluster = []
        detected = total = 0
        for cluster_id in sorted(clusters):
            cluster_rules = [r for r in rules if r.provenance.cluster_id == cluster_id]
            represented = {ref.split(":", 1)[0] for r in cluster_rules for ref in r.provenance.representatives}
            held_out = [by_name[p] for p in clusters[cluster_id].packages if p not in represented and p in by_name]
            if not cluster_rules or not held_out:
                continue
            result = analytics.variant_detection(cluster_rules, held_out, self.config.matcher.timeout_seconds)
            per_cluster.append(dict(result, cluster_id=cluster_id))
            detected += result["detected"]
            total += result["variants"]
        return {"clusters": per_cluster, "variants": total, "detected": detected,
                "rate": detected / total if total else None}

    # ------------------------------------------------------------------

    def run_stage(self, stage: str) -> Any:
        if stage not in STAGES:
            raise ValueError(f"unknown stage '{stage}'")
        logger.info(f"Step {STAGES.index(stage) + 1}/{len(STAGES)}: {STAGE_TITLES[stage]}...")
        return getattr(self, stage)()

