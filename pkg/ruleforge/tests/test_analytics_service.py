import random
from dataclasses import replace

import pytest

from ruleforge.services.analytics_service import (
    category_detection_range,
    category_heatmap,
    category_heatmap_csv,
    classify_rule,
    confusion_metrics,
    coverage_cdf,
    coverage_cdf_csv,
    coverage_counts,
    load_taxonomy,
    normalize_rule_text,
    per_rule_precision,
    per_rule_precision_csv,
    rule_overlap,
    score_cdf,
    similarity,
    subcategory_counts,
    threshold_sweep,
    threshold_sweep_csv,
    variant_detection,
)
from ruleforge.services.errors import BadTaxonomyFile, EmptyInput
from ruleforge.services.llm_service import (
    HeuristicBackend,
    PromptBuilder,
    RecordingBackend,
    ReplayBackend,
    complete,
    parse_rule_output,
)
from ruleforge.services.matcher_service import build_verdicts
from ruleforge.services.models import (
    Label,
    PackageMetadata,
    PackageRecord,
    PackageVerdict,
    Rule,
    RuleFormat,
    RuleScores,
    ScanReport,
    SourceFile,
    TaxonomyTag,
    UnitKind,
)
from ruleforge.services.segmenter_service import extract_basic_units
from ruleforge.services.settings import DATA_DIR
from ruleforge.tests.conftest import BASE_YARA
from ruleforge.tests.corpus_builder import legit_source, stealer_source

PLAIN_YARA = '''rule plain_marker
{
    meta:
        note = "x"
    strings:
        $a = "qqqq"
    condition:
        $a
}
'''


def _verdict(package, label, predicted):
    return PackageVerdict(package, frozenset({"r"}) if predicted else frozenset(), label)


def _levenshtein_dp(a, b):
    previous = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        current = [i]
        for j, cb in enumerate(b, 1):
            current.append(min(previous[j] + 1, current[j - 1] + 1, previous[j - 1] + (ca != cb)))
        previous = current
    return previous[-1]


def _record(name, source, label=Label.MALICIOUS):
    file = SourceFile.from_bytes(f"{name}/__init__.py", source.encode())
    return PackageRecord(PackageMetadata(name=name), (file,), signature=name, label=label)


def test_confusion_metrics():
    verdicts = (
        [_verdict(f"tp{i}", Label.MALICIOUS, True) for i in range(2)]
        + [_verdict("fp0", Label.LEGITIMATE, True)]
        + [_verdict("fn0", Label.MALICIOUS, False)]
        + [_verdict(f"tn{i}", Label.LEGITIMATE, False) for i in range(6)]
    )
    metrics = confusion_metrics(verdicts)
    assert (metrics.tp, metrics.fp, metrics.fn, metrics.tn) == (2, 1, 1, 6)
    assert metrics.accuracy == pytest.approx(0.8)
    assert metrics.precision == pytest.approx(2 / 3)
    assert metrics.recall == pytest.approx(2 / 3)
    assert metrics.f1 == pytest.approx(2 / 3)
    assert metrics.to_dict()["percent"]["accuracy"] == 80.0


def test_confusion_metrics_undefined_ratios():
    metrics = confusion_metrics([_verdict("a", Label.LEGITIMATE, False)])
    assert metrics.precision is None
    assert metrics.recall is None
    assert metrics.f1 is None
    assert metrics.accuracy == 1.0

    with pytest.raises(EmptyInput):
        confusion_metrics([])
    with pytest.raises(ValueError):
        confusion_metrics([_verdict("a", Label.UNKNOWN, True)])


def test_threshold_sweep():
    tallies = {"r1": ["a", "b"], "r2": ["a"]}
    labels = {"a": Label.MALICIOUS, "b": Label.LEGITIMATE, "c": Label.MALICIOUS}
    report = ScanReport(build_verdicts(tallies, labels, 1), tallies, [])
    rows = threshold_sweep(report, [1, 2])
    assert [(r["threshold"], r["tp"], r["fp"], r["tn"], r["fn"]) for r in rows] == [
        (1, 1, 1, 0, 1),
        (2, 1, 0, 1, 1),
    ]
    text = threshold_sweep_csv(rows)
    assert text.splitlines()[0] == "threshold,tp,fp,tn,fn,accuracy,precision,recall,f1"
    assert text.splitlines()[2] == "2,1,0,1,1,0.666667,1.000000,0.500000,0.666667"


def test_per_rule_precision():
    labels = {"a": Label.MALICIOUS, "b": Label.LEGITIMATE}
    result = per_rule_precision({"r1": ["a", "b"], "r2": ["a"]}, labels, rule_ids=["r1", "r2", "r3"])
    assert [(r["rule_id"], r["precision"]) for r in result["rules"]] == [("r1", 0.5), ("r2", 1.0)]
    assert result["unmatched"] == ["r3"]
    counts = {h["bin"]: h["count"] for h in result["histogram"]}
    assert counts["0.5-0.6"] == 1
    assert counts["0.9-1.0"] == 1
    assert sum(counts.values()) == 2
    assert per_rule_precision_csv(result).splitlines()[-1] == "r3,0,0,0,"


def test_coverage_cdf_golden():
    table = coverage_cdf({"r1": 1, "r2": 1, "r3": 3, "r4": 0})
    assert table == [(0, 0.25), (1, 0.75), (3, 1.0)]
    assert coverage_cdf_csv(table) == "detected_packages,cumulative_fraction\n0,0.250000\n1,0.750000\n3,1.000000\n"
    assert coverage_cdf({}) == []


def test_coverage_counts_only_malicious():
    labels = {"a": Label.MALICIOUS, "b": Label.LEGITIMATE, "c": Label.MALICIOUS}
    assert coverage_counts({"r1": ["a", "b", "c"], "r2": ["b"]}, labels) == {"r1": 2, "r2": 0}


def test_score_cdf_counts_missing(validator):
    rule = validator.compile_yara(BASE_YARA)
    rules = [
        replace(rule, scores=RuleScores(confidence=0.9)),
        replace(rule, scores=RuleScores(confidence=0.5, risk=0.2)),
        rule,
    ]
    result = score_cdf(rules)
    assert result["confidence"] == {"table": [(0.5, 0.5), (0.9, 1.0)], "excluded": 1}
    assert result["risk"] == {"table": [(0.2, 1.0)], "excluded": 2}
    assert result["maliciousness"] == {"table": [], "excluded": 3}


def test_similarity():
    assert similarity("abc", "abd") == pytest.approx(2 / 3)
    assert similarity("", "") == 1.0
    assert similarity("abc", "") == 0.0


def test_similarity_matches_edit_distance():
    rng = random.Random(1234)
    for _ in range(500):
        a = "".join(rng.choice("abc") for _ in range(rng.randint(0, 12)))
        b = "".join(rng.choice("abc") for _ in range(rng.randint(0, 12)))
        longest = max(len(a), len(b))
        expected = 1.0 if longest == 0 else 1.0 - _levenshtein_dp(a, b) / longest
        assert similarity(a, b) == pytest.approx(expected)


def test_normalize_rule_text():
    text = "rule  A // note\n{\n  /* block\n comment */ condition:\n    TRUE\n}"
    assert normalize_rule_text(text) == "rule a { condition: true }"


def test_rule_overlap(validator):
    rule = validator.compile_yara(BASE_YARA)
    commented = validator.compile_yara("// copied\n" + BASE_YARA.replace("    condition:", "    condition:  "))
    plain = validator.compile_yara(PLAIN_YARA)

    result = rule_overlap([rule], [commented, plain])
    assert result["overlap_count"] == 1
    assert result["pairs"] == [{"a": "pypi_hostinfo_stealer", "b": "pypi_hostinfo_stealer", "similarity": 1.0}]
    assert (result["a_overlapping"], result["b_overlapping"]) == (1, 1)
    assert (result["a_total"], result["b_total"]) == (1, 2)

    assert rule_overlap([rule], [plain], sim_threshold=0.0)["overlap_count"] == 1
    assert rule_overlap([], [plain])["pairs"] == []


def test_bundled_taxonomy():
    taxonomy = load_taxonomy(DATA_DIR / "taxonomy.yaml")
    assert len(taxonomy.categories) == 11
    assert taxonomy.fallback == TaxonomyTag("Other Rules", "Unknown or Undetermined")
    assert "Credential Theft" in taxonomy.subcategories("Data Exfiltration")


def test_classify_rules(validator):
    taxonomy = load_taxonomy(DATA_DIR / "taxonomy.yaml")
    tags = classify_rule(validator.compile_yara(BASE_YARA), taxonomy)
    assert TaxonomyTag("Network Related", "DNS/Protocol Abuse") in tags
    assert TaxonomyTag("Malware Family", "Known Trojan Families") in tags
    assert TaxonomyTag("Data Exfiltration", "Credential Theft") in tags
    assert taxonomy.fallback not in tags

    assert classify_rule(validator.compile_yara(PLAIN_YARA), taxonomy) == frozenset({taxonomy.fallback})


@pytest.mark.parametrize("body", [
    "categories: []\n",
    "- just a list\n",
    "fallback: {category: A, subcategory: missing}\ncategories:\n  - name: A\n    subcategories:\n      - name: B\n",
    "fallback: {category: A, subcategory: B}\ncategories:\n  - name: A\n    subcategories:\n"
    "      - name: B\n        patterns: ['(unclosed']\n",
    "fallback: {category: A, subcategory: B}\ncategories:\n  - name: A\n    subcategories:\n      - name: B\n"
    "  - name: A\n    subcategories:\n      - name: C\n",
])
def test_bad_taxonomy_files(tmp_path, body):
    path = tmp_path / "taxonomy.yaml"
    path.write_text(body, encoding="utf-8")
    with pytest.raises(BadTaxonomyFile):
        load_taxonomy(path)


def test_bad_taxonomy_path(tmp_path):
    with pytest.raises(BadTaxonomyFile):
        load_taxonomy(tmp_path / "missing.yaml")


def test_category_heatmap_golden():
    a, b, c = TaxonomyTag("A", "x"), TaxonomyTag("B", "y"), TaxonomyTag("C", "z")
    tag_sets = [frozenset({a}), frozenset({a, b}), frozenset({b, c})]
    matrix = category_heatmap(tag_sets, ["A", "B", "C"])
    assert matrix == [[2, 1, 0], [1, 2, 1], [0, 1, 1]]
    assert category_heatmap_csv(matrix, ["A", "B", "C"]) == "category,A,B,C\nA,2,1,0\nB,1,2,1\nC,0,1,1\n"
    assert subcategory_counts(tag_sets) == [
        {"category": "A", "subcategory": "x", "rules": 2},
        {"category": "B", "subcategory": "y", "rules": 2},
        {"category": "C", "subcategory": "z", "rules": 1},
    ]


def test_category_detection_range():
    a, b = TaxonomyTag("A", "x"), TaxonomyTag("B", "y")
    tags = {"r1": frozenset({a}), "r2": frozenset({a, b}), "r3": frozenset({b})}
    tallies = {"r1": ["p1", "p2"], "r2": ["p2", "legit"], "r3": []}
    labels = {"p1": Label.MALICIOUS, "p2": Label.MALICIOUS, "legit": Label.LEGITIMATE}
    rows = category_detection_range(tags, tallies, labels, ["A", "B", "C"])
    assert rows == [
        {"category": "A", "rules": 2, "detected_packages": 2, "avg_packages_per_rule": 1.5},
        {"category": "B", "rules": 2, "detected_packages": 1, "avg_packages_per_rule": 0.5},
        {"category": "C", "rules": 0, "detected_packages": 0, "avg_packages_per_rule": 0.0},
    ]


def _crafted_rule(validator, fixtures):
    units = []
    for i in range(2):
        source = SourceFile.from_bytes(f"hostinfo-{i}/__init__.py", stealer_source(i).encode())
        units.append(next(u for u in extract_basic_units(source, package=f"hostinfo-{i}")
                          if u.kind is UnitKind.FUNCTION))
    prompt = PromptBuilder().build_craft_prompt(RuleFormat.YARA, units)
    complete(prompt, RecordingBackend(HeuristicBackend(), fixtures))
    draft = parse_rule_output(complete(prompt, ReplayBackend(fixtures)), RuleFormat.YARA)
    rule = validator.compile_yara(draft.rule_text)
    assert isinstance(rule, Rule)
    return rule


def test_variant_detection(validator, tmp_path):
    rules = [_crafted_rule(validator, tmp_path / "llm.jsonl")]
    held_out = [_record(f"variant-{i}", stealer_source(i)) for i in range(2, 7)]
    assert variant_detection(rules, held_out)["detected"] >= 4

    result = variant_detection(rules, held_out + [_record("mathkit", legit_source("mathkit"))])
    assert result["variants"] == 6
    assert "mathkit" in result["missed"]
    assert result["rate"] == pytest.approx(result["detected"] / 6)

    assert variant_detection(rules, [])["rate"] is None
