"""
Score-based baseline rule generator.

Candidate strings from a malicious group are ranked by a weighted mix of
isolation-forest anomaly, TF-IDF against a legitimate group and character
entropy; strings above the threshold fill a YARA template.
"""
import math
import re
import string
from collections import Counter
from itertools import islice, product
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from scipy.stats import entropy as shannon_entropy
from sklearn.ensemble import IsolationForest

from ruleforge.services.errors import DegenerateCorpus, NoSignal, RuleCompileFailed
from ruleforge.services.models import CodeCluster, Provenance, Rule, ScoredString, SourceFile
from ruleforge.services.settings import DATA_DIR
from ruleforge.services.validator_service import compile_yara
from ruleforge.services.yara_language import escape_text

DEFAULT_WEIGHTS = (1.2, 1.0, 0.8)
DEFAULT_THRESHOLD = 0.9
DEFAULT_TEMPLATE = DATA_DIR / "baseline_template.yar"

_LITERAL = re.compile(r"\"((?:\\.|[^\"\\\n])*)\"|'((?:\\.|[^'\\\n])*)'")
_CHAIN = re.compile(r"[A-Za-z_]\w*(?:\.[A-Za-z_]\w*)*")
_PUNCTUATION = set(string.punctuation)


def extract_candidate_strings(group: Sequence[SourceFile], min_length: int = 6) -> List[str]:
    """
    Literal bodies plus dotted identifier n-grams (n = 1..3) of at least ``min_length`` chars.

    Returns:
        Sorted, deduplicated candidates
    """
    candidates = set()
    for file in group:
        text = file.content
        for double, single in _LITERAL.findall(text):
            body = double or single
            if len(body) >= min_length:
                candidates.add(body)
        stripped = _LITERAL.sub(" ", text)
        for chain in _CHAIN.findall(stripped):
            parts = chain.split(".")
            for n in range(1, 4):
                for i in range(len(parts) - n + 1):
                    gram = ".".join(parts[i:i + n])
                    if len(gram) >= min_length:
                        candidates.add(gram)
    return sorted(candidates)


def entropy_score(text: str) -> float:
    """Shannon entropy (bits) of the characters, normalized by log2 of the distinct-character count."""
    counts = Counter(text)
    if len(counts) <= 1:
        return 0.0
    value = float(shannon_entropy(list(counts.values()), base=2))
    return float(min(1.0, max(0.0, value / math.log2(len(counts)))))


def tfidf_scores(candidates: Sequence[str], mal_docs: Sequence[str], legit_docs: Sequence[str]) -> Dict[str, float]:
    """
    tf = occurrences across the malicious documents; idf = log(N / df) over
    both groups. Max-normalized to [0, 1].

    Raises:
        DegenerateCorpus: every candidate has zero score
    """
    documents = list(mal_docs) + list(legit_docs)
    n_docs = len(documents)
    raw = {}
    for candidate in candidates:
        tf = sum(doc.count(candidate) for doc in mal_docs)
        df = sum(1 for doc in documents if candidate in doc)
        idf = math.log(n_docs / df) if df else 0.0
        raw[candidate] = tf * idf
    peak = max(raw.values(), default=0.0)
    if peak <= 0.0:
        raise DegenerateCorpus("every candidate string occurs in every document; TF-IDF is zero throughout")
    return {c: v / peak for c, v in raw.items()}


def string_features(text: str) -> List[float]:
    length = len(text)
    digits = sum(ch.isdigit() for ch in text)
    punct = sum(ch in _PUNCTUATION for ch in text)
    return [float(length), entropy_score(text), digits / length if length else 0.0, punct / length if length else 0.0]


def isolation_scores(candidates: Sequence[str], population: Sequence[str], seed: int = 42,
                     n_estimators: int = 100) -> Dict[str, float]:
    """
    Anomaly score 2^(-E[h(x)]/c(psi)) in [0, 1] per candidate, from a forest
    fitted on ``population`` (trees = ``n_estimators``, psi = min(256, N)).
    """
    population = sorted(set(population))
    if len(population) < 2:
        return {c: 0.5 for c in candidates}
    features = np.array([string_features(s) for s in population], dtype=np.float64)
    forest = IsolationForest(
        n_estimators=n_estimators,
        max_samples=min(256, len(population)),
        random_state=seed,
    )
    forest.fit(features)
    scores = -forest.score_samples(np.array([string_features(c) for c in candidates], dtype=np.float64))
    return {c: float(np.clip(s, 0.0, 1.0)) for c, s in zip(candidates, scores)}


def combine(iso: float, tfidf: float, entropy: float, weights: Tuple[float, float, float] = DEFAULT_WEIGHTS) -> float:
    w_iso, w_tfidf, w_entropy = weights
    return (w_iso * iso + w_tfidf * tfidf + w_entropy * entropy) / 3.0


def score_strings(
    mal_group: Sequence[SourceFile],
    legit_group: Sequence[SourceFile],
    weights: Tuple[float, float, float] = DEFAULT_WEIGHTS,
    seed: int = 42,
    n_estimators: int = 100,
    min_length: int = 6,
) -> List[ScoredString]:
    """
    Score the malicious group's candidate strings.

    Args:
        mal_group: Documents of the malicious group
        legit_group: Documents of the legitimate group
        weights: (isolation forest, TF-IDF, entropy)

    Returns:
        ScoredString per candidate, sorted by text
    """
    if not mal_group or not legit_group:
        raise DegenerateCorpus("score_strings needs a non-empty malicious and legitimate group")
    candidates = extract_candidate_strings(mal_group, min_length)
    if not candidates:
        raise DegenerateCorpus("malicious group yields no candidate strings")
    legit_candidates = extract_candidate_strings(legit_group, min_length)

    mal_docs = [f.content for f in mal_group]
    legit_docs = [f.content for f in legit_group]
    tfidf = tfidf_scores(candidates, mal_docs, legit_docs)
    iso = isolation_scores(candidates, candidates + legit_candidates, seed, n_estimators)

    scored = []
    for text in candidates:
        ent = entropy_score(text)
        scored.append(ScoredString(
            text=text,
            iso_score=iso[text],
            tfidf_score=tfidf[text],
            entropy_score=ent,
            combined=combine(iso[text], tfidf[text], ent, weights),
        ))
    return scored


def _rule_name(group_id: str) -> str:
    return "baseline_" + re.sub(r"[^A-Za-z0-9_]", "_", group_id)


def generate_baseline_rule(
    scored: Sequence[ScoredString],
    threshold: float = DEFAULT_THRESHOLD,
    template: Optional[str] = None,
    group_id: str = "0",
    date: str = "1970-01-01",
    max_strings: int = 20,
) -> Rule:
    """
    Fill the YARA template with strings scoring at least ``threshold``.

    Raises:
        NoSignal: no string reaches the threshold
        RuleCompileFailed: the filled template does not compile
    """
    picked = sorted((s for s in scored if s.combined >= threshold), key=lambda s: (-s.combined, s.text))
    picked = list(islice(picked, max_strings))
    if not picked:
        raise NoSignal(f"no candidate string in group {group_id} scores >= {threshold}")

    template = template if template is not None else DEFAULT_TEMPLATE.read_text(encoding="utf-8")
    name = _rule_name(group_id)
    strings_block = "\n".join(f'        $s{i} = "{escape_text(s.text)}"' for i, s in enumerate(picked))
    text = template.format(rule_name=name, generator="score-baseline", date=date, group_id=group_id,
                           strings=strings_block)
    compiled = compile_yara(text)
    if not isinstance(compiled, Rule):
        raise RuleCompileFailed(name, compiled)
    return Rule(
        text=compiled.text,
        rule_format=compiled.rule_format,
        name=compiled.name,
        sections=compiled.sections,
        provenance=Provenance(generator="baseline"),
    )


def cluster_documents(cluster: CodeCluster, files: Dict[Tuple[str, str], SourceFile]) -> List[SourceFile]:
    """Distinct member files of a cluster, in (package, path) order."""
    keys = sorted({(m.package, m.file) for m in cluster.members})
    return [files[k] for k in keys if k in files]


def run_baseline(
    mal_clusters: Sequence[CodeCluster],
    legit_clusters: Sequence[CodeCluster],
    files: Dict[Tuple[str, str], SourceFile],
    settings=None,
) -> Tuple[List[Rule], List[Dict]]:
    """
    One baseline rule per (malicious cluster, legitimate cluster) pair.

    Pairs follow cluster id order and stop at ``max_pairs``. Pairs without
    signal are reported, not raised.

    Returns:
        (rules, skipped) where skipped lists {pair, reason}
    """
    weights = DEFAULT_WEIGHTS
    threshold, seed, n_estimators, min_length = DEFAULT_THRESHOLD, 42, 100, 6
    max_pairs, max_strings, date, template = 50, 20, "1970-01-01", None
    if settings is not None:
        weights = (settings.weights.iso, settings.weights.tfidf, settings.weights.entropy)
        threshold, seed, n_estimators = settings.threshold, settings.seed, settings.n_estimators
        min_length, max_pairs, max_strings = settings.min_length, settings.max_pairs, settings.max_strings
        date = settings.rule_date
        template = Path(settings.template).read_text(encoding="utf-8")

    if not legit_clusters:
        logger.warning("⚠️  No legitimate clusters; skipping the score-based baseline")
        return [], []

    rules: List[Rule] = []
    skipped: List[Dict] = []
    pairs = islice(product(sorted(mal_clusters, key=lambda c: c.id), sorted(legit_clusters, key=lambda c: c.id)),
                   max_pairs)
    for mal, legit in pairs:
        group_id = f"m{mal.id}_l{legit.id}"
        try:
            scored = score_strings(cluster_documents(mal, files), cluster_documents(legit, files),
                                   weights, seed, n_estimators, min_length)
            rules.append(generate_baseline_rule(scored, threshold, template, group_id, date, max_strings))
        except (NoSignal, DegenerateCorpus) as exc:
            skipped.append({"pair": group_id, "reason": exc.code, "message": str(exc)})
    logger.info(f"✅ Baseline produced {len(rules)} rule(s), {len(skipped)} pair(s) without signal")
    return rules, skipped
