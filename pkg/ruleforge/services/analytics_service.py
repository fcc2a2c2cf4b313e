"""
Evaluation artifacts: confusion metrics, per-rule precision, coverage and
score CDFs, rule overlap, taxonomy tagging and category co-occurrence.

Everything here is pure aggregation over scan reports and rule sets; the
writers emit CSV with ``\\n`` line endings and canonical JSON.
"""
import csv
import io
import json
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple

import yaml
from loguru import logger
from rapidfuzz.distance import Levenshtein

from ruleforge.services.errors import BadTaxonomyFile, EmptyInput
from ruleforge.services.matcher_service import RuleEngine, rescore
from ruleforge.services.models import (
    Label,
    Metrics,
    PackageRecord,
    PackageVerdict,
    Rule,
    RuleFormat,
    ScanReport,
    TaxonomyTag,
)

DEFAULT_OVERLAP_THRESHOLD = 0.8
SCORE_FIELDS = ("confidence", "maliciousness", "risk")


# ---------------------------------------------------------------------------
# writers

def write_json(path: Path, data: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, sort_keys=True, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    return path


def csv_text(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buffer.getvalue()


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(csv_text(header, rows), encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# metrics

def _ratio(num: int, den: int) -> Optional[float]:
    return num / den if den else None


def confusion_metrics(verdicts: Sequence[PackageVerdict]) -> Metrics:
    """
    Confusion counts and ratios for package verdicts.

    Precision and recall are None when their denominator is zero; F1 is
    None unless both are defined (and None when both are zero).

    Raises:
        EmptyInput: no verdicts
        ValueError: a verdict has no ground-truth label
    """
    if not verdicts:
        raise EmptyInput("confusion_metrics needs at least one verdict")
    tp = fp = tn = fn = 0
    for v in verdicts:
        if v.label is Label.UNKNOWN:
            raise ValueError(f"package '{v.package}' has no ground-truth label")
        positive = v.label is Label.MALICIOUS
        if v.predicted and positive:
            tp += 1
        elif v.predicted:
            fp += 1
        elif positive:
            fn += 1
        else:
            tn += 1
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    f1 = None
    if precision is not None and recall is not None and precision + recall > 0:
        f1 = 2 * precision * recall / (precision + recall)
    return Metrics(tp, fp, tn, fn, (tp + tn) / len(verdicts), precision, recall, f1)


def threshold_sweep(report: ScanReport, thresholds: Sequence[int]) -> List[Dict[str, Any]]:
    """Metrics at each matched-rule threshold, without rescanning."""
    rows = []
    for threshold in thresholds:
        metrics = confusion_metrics(rescore(report, threshold).verdicts)
        rows.append(dict(metrics.to_dict(), threshold=threshold))
    return rows


def threshold_sweep_csv(rows: Sequence[Dict[str, Any]]) -> str:
    header = ["threshold", "tp", "fp", "tn", "fn", "accuracy", "precision", "recall", "f1"]
    return csv_text(header, ([_cell(row[h]) for h in header] for row in rows))


def _cell(value: Any) -> Any:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6f}"
    return value


# ---------------------------------------------------------------------------
# per-rule distributions

def per_rule_precision(
    tallies: Mapping[str, Sequence[str]],
    labels: Mapping[str, Label],
    rule_ids: Optional[Iterable[str]] = None,
) -> Dict[str, Any]:
    """
    Precision of each rule over the packages it matched.

    Returns:
        {"rules": [...], "unmatched": [rule ids], "histogram": [{"bin", "count"}]}
        with ten bins of width 0.1 (1.0 falls in the last one)
    """
    ids = sorted(set(rule_ids) if rule_ids is not None else set(tallies))
    rows, unmatched = [], []
    bins = [0] * 10
    for rule_id in ids:
        packages = tallies.get(rule_id, [])
        if not packages:
            unmatched.append(rule_id)
            continue
        malicious = sum(1 for p in packages if labels.get(p) is Label.MALICIOUS)
        precision = malicious / len(packages)
        bins[min(int(precision * 10), 9)] += 1
        rows.append({
            "rule_id": rule_id,
            "matched": len(packages),
            "malicious": malicious,
            "legitimate": len(packages) - malicious,
            "precision": precision,
        })
    histogram = [{"bin": f"{i / 10:.1f}-{(i + 1) / 10:.1f}", "count": count} for i, count in enumerate(bins)]
    return {"rules": rows, "unmatched": unmatched, "histogram": histogram}


def per_rule_precision_csv(result: Dict[str, Any]) -> str:
    rows = [(r["rule_id"], r["matched"], r["malicious"], r["legitimate"], f"{r['precision']:.6f}")
            for r in result["rules"]]
    rows += [(rule_id, 0, 0, 0, "") for rule_id in result["unmatched"]]
    return csv_text(["rule_id", "matched", "malicious", "legitimate", "precision"], rows)


def coverage_counts(tallies: Mapping[str, Sequence[str]], labels: Mapping[str, Label]) -> Dict[str, int]:
    """Distinct malicious packages matched per rule."""
    return {
        rule_id: sum(1 for p in set(packages) if labels.get(p) is Label.MALICIOUS)
        for rule_id, packages in tallies.items()
    }


def _cdf(values: Sequence[float]) -> List[Tuple[float, float]]:
    if not values:
        return []
    counts = Counter(values)
    total = len(values)
    running = 0
    table = []
    for x in sorted(counts):
        running += counts[x]
        table.append((x, running / total))
    return table


def coverage_cdf(match_counts: Mapping[str, int]) -> List[Tuple[int, float]]:
    """(detected package count, cumulative fraction of rules) steps."""
    return _cdf(list(match_counts.values()))


def coverage_cdf_csv(table: Sequence[Tuple[int, float]]) -> str:
    return csv_text(["detected_packages", "cumulative_fraction"], ((x, f"{y:.6f}") for x, y in table))


def score_cdf(rules: Sequence[Rule]) -> Dict[str, Dict[str, Any]]:
    """CDF per score kind over the rules that carry it; absent scores are counted, not defaulted."""
    result = {}
    for name in SCORE_FIELDS:
        values = [getattr(r.scores, name) for r in rules if getattr(r.scores, name) is not None]
        result[name] = {"table": _cdf(values), "excluded": len(rules) - len(values)}
    return result


def score_cdf_csv(entry: Dict[str, Any]) -> str:
    return csv_text(["score", "cumulative_fraction"], ((f"{x:.6f}", f"{y:.6f}") for x, y in entry["table"]))


# ---------------------------------------------------------------------------
# overlap

_YARA_COMMENTS = re.compile(r"//[^\n]*|/\*[\s\S]*?\*/")
_YAML_COMMENTS = re.compile(r"(?:^|(?<=\s))#[^\n]*", re.MULTILINE)


def normalize_rule_text(text: str, rule_format: RuleFormat = RuleFormat.YARA) -> str:
    """Comments stripped, whitespace collapsed, lowercased."""
    pattern = _YARA_COMMENTS if rule_format is RuleFormat.YARA else _YAML_COMMENTS
    return " ".join(pattern.sub(" ", text).split()).lower()


def similarity(a: str, b: str) -> float:
    """1 - levenshtein(a, b) / max(len(a), len(b)); two empty strings are identical."""
    longest = max(len(a), len(b))
    if longest == 0:
        return 1.0
    return 1.0 - Levenshtein.distance(a, b) / longest


def rule_overlap(set_a: Sequence[Rule], set_b: Sequence[Rule],
                 sim_threshold: float = DEFAULT_OVERLAP_THRESHOLD) -> Dict[str, Any]:
    """
    Pairs of rules from the two sets whose normalized texts are at least
    ``sim_threshold`` similar.
    """
    norm_a = [(r.name, normalize_rule_text(r.text, r.rule_format)) for r in set_a]
    norm_b = [(r.name, normalize_rule_text(r.text, r.rule_format)) for r in set_b]
    pairs = []
    for name_a, text_a in norm_a:
        for name_b, text_b in norm_b:
            score = similarity(text_a, text_b)
            if score >= sim_threshold:
                pairs.append({"a": name_a, "b": name_b, "similarity": round(score, 6)})
    return {
        "threshold": sim_threshold,
        "overlap_count": len(pairs),
        "a_overlapping": len({p["a"] for p in pairs}),
        "b_overlapping": len({p["b"] for p in pairs}),
        "a_total": len(set_a),
        "b_total": len(set_b),
        "pairs": pairs,
    }


# ---------------------------------------------------------------------------
# taxonomy

@dataclass(frozen=True)
class SubcategoryTrigger:
    tag: TaxonomyTag
    keywords: Tuple[str, ...]
    patterns: Tuple["re.Pattern[str]", ...]

    def matches(self, lowered: str, original: str) -> bool:
        return any(k in lowered for k in self.keywords) or any(p.search(original) for p in self.patterns)


@dataclass(frozen=True)
class Taxonomy:
    categories: Tuple[str, ...]
    triggers: Tuple[SubcategoryTrigger, ...]
    fallback: TaxonomyTag

    def subcategories(self, category: str) -> List[str]:
        return [t.tag.subcategory for t in self.triggers if t.tag.category == category]


def load_taxonomy(path: Path) -> Taxonomy:
    """
    Load the category/subcategory table with its keyword triggers.

    Raises:
        BadTaxonomyFile: unreadable file, bad structure or a pattern that does not compile
    """
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as exc:
        raise BadTaxonomyFile(f"cannot read taxonomy {path}: {exc}") from exc
    if not isinstance(data, dict) or not isinstance(data.get("categories"), list) or not data["categories"]:
        raise BadTaxonomyFile(f"taxonomy {path} needs a non-empty 'categories' list")

    categories, triggers = [], []
    for entry in data["categories"]:
        if not isinstance(entry, dict) or not entry.get("name") or not isinstance(entry.get("subcategories"), list):
            raise BadTaxonomyFile(f"taxonomy {path}: every category needs a name and a subcategories list")
        categories.append(str(entry["name"]))
        for sub in entry["subcategories"]:
            if not isinstance(sub, dict) or not sub.get("name"):
                raise BadTaxonomyFile(f"taxonomy {path}: subcategory without a name in '{entry['name']}'")
            try:
                patterns = tuple(re.compile(p, re.IGNORECASE) for p in sub.get("patterns") or ())
            except re.error as exc:
                raise BadTaxonomyFile(f"taxonomy {path}: bad pattern in '{sub['name']}': {exc}") from exc
            triggers.append(SubcategoryTrigger(
                tag=TaxonomyTag(str(entry["name"]), str(sub["name"])),
                keywords=tuple(str(k).lower() for k in sub.get("keywords") or ()),
                patterns=patterns,
            ))

    fallback = data.get("fallback") or {}
    tag = TaxonomyTag(str(fallback.get("category", "")), str(fallback.get("subcategory", "")))
    if tag not in {t.tag for t in triggers}:
        raise BadTaxonomyFile(f"taxonomy {path}: fallback {tag} is not one of its subcategories")
    if len(set(categories)) != len(categories):
        raise BadTaxonomyFile(f"taxonomy {path}: duplicate category names")
    return Taxonomy(tuple(categories), tuple(triggers), tag)


def classify_rule(rule: Rule, taxonomy: Taxonomy) -> FrozenSet[TaxonomyTag]:
    """Every tag whose triggers occur in the rule text; the fallback tag when none do."""
    lowered = rule.text.lower()
    tags = frozenset(t.tag for t in taxonomy.triggers if t.tag != taxonomy.fallback and t.matches(lowered, rule.text))
    return tags or frozenset({taxonomy.fallback})


def category_heatmap(tag_sets: Iterable[FrozenSet[TaxonomyTag]], categories: Sequence[str]) -> List[List[int]]:
    """Symmetric matrix of rule counts tagged with both categories (diagonal: rules in the category)."""
    index = {name: i for i, name in enumerate(categories)}
    matrix = [[0] * len(categories) for _ in categories]
    for tags in tag_sets:
        present = sorted({index[t.category] for t in tags if t.category in index})
        for i in present:
            for j in present:
                matrix[i][j] += 1
    return matrix


def category_heatmap_csv(matrix: Sequence[Sequence[int]], categories: Sequence[str]) -> str:
    return csv_text(["category", *categories], ([name, *row] for name, row in zip(categories, matrix)))


def subcategory_counts(tag_sets: Iterable[FrozenSet[TaxonomyTag]]) -> List[Dict[str, Any]]:
    counts = Counter(tag for tags in tag_sets for tag in tags)
    return [
        {"category": tag.category, "subcategory": tag.subcategory, "rules": count}
        for tag, count in sorted(counts.items())
    ]


def category_detection_range(
    tags: Mapping[str, FrozenSet[TaxonomyTag]],
    tallies: Mapping[str, Sequence[str]],
    labels: Mapping[str, Label],
    categories: Sequence[str],
) -> List[Dict[str, Any]]:
    """Per category: rules tagged with it, malicious packages they detect, average packages per rule."""
    rows = []
    for category in categories:
        rule_ids = sorted(r for r, rule_tags in tags.items() if any(t.category == category for t in rule_tags))
        detected = set()
        per_rule = []
        for rule_id in rule_ids:
            hits = {p for p in tallies.get(rule_id, ()) if labels.get(p) is Label.MALICIOUS}
            detected |= hits
            per_rule.append(len(hits))
        rows.append({
            "category": category,
            "rules": len(rule_ids),
            "detected_packages": len(detected),
            "avg_packages_per_rule": sum(per_rule) / len(per_rule) if per_rule else 0.0,
        })
    return rows


def category_detection_range_csv(rows: Sequence[Dict[str, Any]]) -> str:
    header = ["category", "rules", "detected_packages", "avg_packages_per_rule"]
    return csv_text(header, ([_cell(row[h]) for h in header] for row in rows))


# ---------------------------------------------------------------------------
# variants

def variant_detection(rules: Sequence[Rule], variants: Sequence[PackageRecord], timeout: float = 2.0) -> Dict[str, Any]:
    """
    Fraction of held-out variants matched by at least one of ``rules``.

    Returns:
        {"variants", "detected", "rate", "missed"}
    """
    if not variants:
        return {"variants": 0, "detected": 0, "rate": None, "missed": []}
    engine = RuleEngine(rules, timeout)
    missed = []
    for record in variants:
        matches, _ = engine.scan_package(record)
        if not matches:
            missed.append(record.name)
    detected = len(variants) - len(missed)
    rate = detected / len(variants)
    logger.info(f"✅ Variant detection: {detected}/{len(variants)} ({rate:.1%})")
    return {"variants": len(variants), "detected": detected, "rate": rate, "missed": sorted(missed)}
