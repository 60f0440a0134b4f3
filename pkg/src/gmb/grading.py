"""Gleason / ISUP ordinal algebra.

Patterns are stored as ordinal codes: 0 = benign, 1 = pattern 3,
2 = pattern 4, 3 = pattern 5. A score is a (primary, secondary) pair of
codes; it is either fully benign (0+0) or fully malignant.
"""

from __future__ import annotations

from dataclasses import dataclass

__all__ = [
    "GradingError",
    "GleasonPattern",
    "GleasonScore",
    "IsupGrade",
    "GS_ORDINAL_TABLE",
    "correct_pattern_pair",
    "encode_gs_ordinal",
    "decode_gs_ordinal",
    "gs_to_isup",
    "is_significant_error",
    "parse_pattern",
    "parse_score",
    "parse_isup",
]

BENIGN = 0
_CLINICAL_TO_CODE = {0: 0, 3: 1, 4: 2, 5: 3}
_CODE_TO_CLINICAL = {v: k for k, v in _CLINICAL_TO_CODE.items()}


class GradingError(ValueError):
    """Raised for invalid patterns, scores or grades."""


@dataclass(frozen=True, order=True)
class GleasonPattern:
    code: int

    def __post_init__(self):
        if self.code not in _CODE_TO_CLINICAL:
            raise GradingError(f"pattern code must be in 0..3, got {self.code!r}")

    @classmethod
    def from_clinical(cls, value: int) -> "GleasonPattern":
        if value not in _CLINICAL_TO_CODE:
            raise GradingError(f"clinical pattern must be 0 (benign), 3, 4 or 5, got {value!r}")
        return cls(_CLINICAL_TO_CODE[value])

    @property
    def clinical(self) -> int:
        return _CODE_TO_CLINICAL[self.code]

    @property
    def is_benign(self) -> bool:
        return self.code == BENIGN


@dataclass(frozen=True)
class GleasonScore:
    primary: GleasonPattern
    secondary: GleasonPattern

    def __post_init__(self):
        if self.primary.is_benign != self.secondary.is_benign:
            raise GradingError(
                f"mixed benign/malignant pattern pair {self.primary.clinical}+{self.secondary.clinical}"
            )

    @classmethod
    def from_codes(cls, primary: int, secondary: int) -> "GleasonScore":
        return cls(GleasonPattern(primary), GleasonPattern(secondary))

    @classmethod
    def benign(cls) -> "GleasonScore":
        return cls.from_codes(0, 0)

    @property
    def is_benign(self) -> bool:
        return self.primary.is_benign

    @property
    def codes(self) -> tuple[int, int]:
        return self.primary.code, self.secondary.code

    def __str__(self) -> str:
        if self.is_benign:
            return "benign"
        return f"{self.primary.clinical}+{self.secondary.clinical}"


@dataclass(frozen=True, order=True)
class IsupGrade:
    grade: int

    def __post_init__(self):
        if not isinstance(self.grade, int) or not 0 <= self.grade <= 5:
            raise GradingError(f"ISUP grade must be an integer in 0..5, got {self.grade!r}")

    def __str__(self) -> str:
        return str(self.grade)


# Ordinal encoding of Gleason scores, indexed by position.
GS_ORDINAL_TABLE: tuple[tuple[int, int], ...] = (
    (0, 0),  # benign
    (3, 3),
    (3, 4),
    (4, 3),
    (3, 5),
    (4, 4),
    (5, 3),
    (4, 5),
    (5, 4),
    (5, 5),
)
_CLINICAL_PAIR_TO_ORDINAL = {pair: i for i, pair in enumerate(GS_ORDINAL_TABLE)}

_ISUP_BY_CLINICAL_PAIR = {
    (0, 0): 0,
    (3, 3): 1,
    (3, 4): 2,
    (4, 3): 3,
    (4, 4): 4,
    (3, 5): 4,
    (5, 3): 4,
    (4, 5): 5,
    (5, 4): 5,
    (5, 5): 5,
}


def correct_pattern_pair(raw_primary: GleasonPattern, raw_secondary: GleasonPattern) -> GleasonScore:
    """Turn a raw (possibly mixed) pattern pair into a valid score.

    A single non-zero pattern is duplicated into both slots, so 0+3 and
    3+0 both become 3+3. Any other pair passes through unchanged.
    """
    if raw_primary.is_benign and not raw_secondary.is_benign:
        return GleasonScore(raw_secondary, raw_secondary)
    if raw_secondary.is_benign and not raw_primary.is_benign:
        return GleasonScore(raw_primary, raw_primary)
    return GleasonScore(raw_primary, raw_secondary)


def encode_gs_ordinal(score: GleasonScore) -> int:
    pair = (score.primary.clinical, score.secondary.clinical)
    try:
        return _CLINICAL_PAIR_TO_ORDINAL[pair]
    except KeyError:  # unreachable for validated scores
        raise GradingError(f"score {pair} has no ordinal encoding") from None


def decode_gs_ordinal(value: int) -> GleasonScore:
    if not isinstance(value, int) or not 0 <= value < len(GS_ORDINAL_TABLE):
        raise GradingError(f"GS ordinal must be in 0..9, got {value!r}")
    p, s = GS_ORDINAL_TABLE[value]
    return GleasonScore(GleasonPattern.from_clinical(p), GleasonPattern.from_clinical(s))


def gs_to_isup(score: GleasonScore) -> IsupGrade:
    return IsupGrade(_ISUP_BY_CLINICAL_PAIR[(score.primary.clinical, score.secondary.clinical)])


def is_significant_error(reference: IsupGrade, predicted: IsupGrade) -> bool:
    """ISUP >= 2 called benign, or benign called ISUP >= 2."""
    return (reference.grade >= 2 and predicted.grade == 0) or (
        reference.grade == 0 and predicted.grade >= 2
    )


def parse_pattern(text: str) -> GleasonPattern:
    t = str(text).strip().lower()
    if t in ("benign", "0"):
        return GleasonPattern(0)
    try:
        value = int(t)
    except ValueError:
        raise GradingError(f"unparseable Gleason pattern {text!r}") from None
    return GleasonPattern.from_clinical(value)


def parse_score(text: str) -> GleasonScore:
    """Parse "P+S" or "benign" clinical notation.

    Mixed pairs such as "0+3" are corrected by duplication; patterns
    below 3 (e.g. "2+3") and partial reports are rejected.
    """
    t = str(text).strip().lower().replace(" ", "")
    if t in ("benign", "0", "0+0"):
        return GleasonScore.benign()
    if t.count("+") != 1:
        raise GradingError(f"unparseable Gleason score {text!r}")
    a, b = t.split("+")
    return correct_pattern_pair(parse_pattern(a), parse_pattern(b))


def parse_isup(text) -> IsupGrade:
    t = str(text).strip().lower()
    if t == "benign":
        return IsupGrade(0)
    try:
        value = int(t)
    except ValueError:
        raise GradingError(f"unparseable ISUP grade {text!r}") from None
    return IsupGrade(value)
