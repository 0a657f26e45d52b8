"""Expression-level recognition metrics and manifest/report I/O.

``exprate_le1`` uses token-level edit distance. It approximates the "at most
one symbol or structural error" criterion of graph-based evaluation; the two
disagree for some relabelling cases, which is accepted here.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Sequence, Tuple, Union

import Levenshtein
import yaml

from .errors import DataError, InputError
from .tokens import STRUCTURAL, Group, parse_tokens, split_tokens

logger = logging.getLogger(__name__)

PLACEHOLDER = "□"

TokenLike = Union[str, Sequence[str]]


@dataclass(frozen=True, slots=True)
class StructureSkeleton:
    """Layout-bearing view of a token sequence.

    Every non-structural token becomes :data:`PLACEHOLDER`; ``nesting`` is the
    brace depth after each token. A sequence that does not parse yields
    ``ok=False`` instead of raising.
    """

    placeholders: Tuple[str, ...]
    nesting: Tuple[int, ...]
    ok: bool

    def matches(self, other: "StructureSkeleton") -> bool:
        """Equal layouts match; an unparsable skeleton only matches an identical one."""

        return self.ok == other.ok and self.placeholders == other.placeholders


def parse_structure(tokens: TokenLike) -> StructureSkeleton:
    tokens = split_tokens(tokens)
    placeholders = tuple(t if t in STRUCTURAL else PLACEHOLDER for t in tokens)
    nesting: List[int] = []
    depth = 0
    for token in tokens:
        depth += (token == "{") - (token == "}")
        nesting.append(depth)
    try:
        parse_tokens(tokens)
    except InputError:
        return StructureSkeleton(placeholders, tuple(nesting), False)
    return StructureSkeleton(placeholders, tuple(nesting), True)


def token_edit_distance(a: TokenLike, b: TokenLike) -> int:
    """Levenshtein distance counted in tokens rather than characters."""

    a, b = split_tokens(a), split_tokens(b)
    alphabet: Dict[str, str] = {}
    for token in (*a, *b):
        alphabet.setdefault(token, chr(0xE000 + len(alphabet)))
    return Levenshtein.distance("".join(alphabet[t] for t in a), "".join(alphabet[t] for t in b))


def _pairs(preds: Sequence[TokenLike], refs: Sequence[TokenLike]) -> List[Tuple[List[str], List[str]]]:
    if len(preds) != len(refs):
        raise InputError(f"Got {len(preds)} predictions for {len(refs)} references.")
    return [(split_tokens(p), split_tokens(r)) for p, r in zip(preds, refs)]


def _percent(hits: int, total: int) -> float:
    return 100.0 * hits / total if total else 0.0


def exprate(preds: Sequence[TokenLike], refs: Sequence[TokenLike]) -> float:
    """Percentage of predictions that equal their reference token for token."""

    pairs = _pairs(preds, refs)
    return _percent(sum(p == r for p, r in pairs), len(pairs))


def exprate_le1(preds: Sequence[TokenLike], refs: Sequence[TokenLike]) -> float:
    pairs = _pairs(preds, refs)
    return _percent(sum(token_edit_distance(p, r) <= 1 for p, r in pairs), len(pairs))


def strurate(preds: Sequence[TokenLike], refs: Sequence[TokenLike]) -> float:
    """Percentage of predictions whose structure skeleton matches the reference's.

    An unparsable prediction is a structural error unless the reference has
    the same skeleton, so an exact match always counts.
    """

    pairs = _pairs(preds, refs)
    return _percent(sum(parse_structure(p).matches(parse_structure(r)) for p, r in pairs), len(pairs))


@dataclass(slots=True)
class MetricsReport:
    count: int
    exprate: float
    exprate_le1: float
    strurate: float
    malformed: int = 0

    def as_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def row(self) -> str:
        return f"{self.exprate:6.2f} {self.exprate_le1:6.2f} {self.strurate:6.2f}"


def evaluate(preds: Sequence[TokenLike], refs: Sequence[TokenLike]) -> MetricsReport:
    pairs = _pairs(preds, refs)
    return MetricsReport(
        count=len(pairs),
        exprate=exprate(preds, refs),
        exprate_le1=exprate_le1(preds, refs),
        strurate=strurate(preds, refs),
        malformed=sum(not is_well_formed(p) for p, _ in pairs),
    )


def evaluate_manifests(predictions: str | Path, references: str | Path) -> MetricsReport:
    """Score a prediction manifest against a reference manifest by sample id.

    Samples missing from the predictions are scored as empty predictions.
    """

    preds = read_manifest(predictions)
    refs = read_manifest(references)
    unknown = set(preds) - set(refs)
    if unknown:
        logger.warning("ignoring %d predictions without a reference", len(unknown))
    return evaluate([preds.get(k, []) for k in refs], list(refs.values()))


def read_manifest(path: str | Path) -> Dict[str, List[str]]:
    """Read ``id<TAB>tokens`` lines into an ordered mapping.

    Raises
    ------
    DataError
        If the file is missing, a line lacks the tab or an id repeats.
    """

    path = Path(path)
    if not path.is_file():
        raise DataError(f"Manifest '{path}' does not exist.")
    entries: Dict[str, List[str]] = {}
    for number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise DataError(f"{path}:{number}: expected 'id<TAB>tokens'.")
        sample_id, text = line.split("\t", 1)
        if sample_id in entries:
            raise DataError(f"{path}:{number}: duplicate id '{sample_id}'.")
        entries[sample_id] = text.split()
    return entries


def write_predictions(path: str | Path, predictions: Mapping[str, Sequence[str]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{k}\t{' '.join(v)}\n" for k, v in predictions.items()), encoding="utf-8")
    return path


def write_report(path: str | Path, report: MetricsReport | Sequence[Mapping[str, Any]], **meta: Any) -> Path:
    """Dump a report (or a list of grid rows) as YAML, with optional metadata."""

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body: Dict[str, Any] = dict(meta)
    if isinstance(report, MetricsReport):
        body["metrics"] = report.as_dict()
    else:
        body["rows"] = [dict(r) for r in report]
    path.write_text(yaml.safe_dump(body, sort_keys=False), encoding="utf-8")
    return path


def is_well_formed(tokens: TokenLike) -> bool:
    try:
        return isinstance(parse_tokens(tokens), Group)
    except InputError:
        return False
