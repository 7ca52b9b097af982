# models/manifest.py
"""
TriggerTune - Dataset Manifest Models
Tab-separated utterance records and their validation
"""
from enum import Enum
from pathlib import Path
from typing import List, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from utils.errors import DataError

# Column order of every manifest file; "-" marks an absent optional field
MANIFEST_COLUMNS = (
    "utt_id", "feature_path", "speaker_id", "phrase_label",
    "kw_start", "kw_end", "phonemes", "duration_hours", "split",
)
MISSING = "-"


class Split(str, Enum):
    TRAIN = "train"
    EVAL = "eval"
    VALIDATION = "validation"


class ManifestRecord(BaseModel):
    """One utterance line of a manifest"""
    model_config = ConfigDict(frozen=True)

    utt_id: str = Field(..., min_length=1, description="Unique utterance id")
    feature_path: str = Field(..., min_length=1, description="Feature or audio file, relative to the manifest")
    speaker_id: Optional[str] = Field(None, description="Speaker label")
    phrase_label: int = Field(..., ge=0, le=1, description="1 if the keyword is present")
    keyword_segment: Optional[Tuple[int, int]] = Field(None, description="[start, end) frames of the keyword")
    phonemes: Optional[Tuple[int, ...]] = Field(None, description="Phoneme label sequence")
    duration_hours: Optional[float] = Field(None, gt=0, description="Nominal duration of a negative trial")
    split: Split = Split.TRAIN

    @model_validator(mode="after")
    def check_record(self):
        if self.keyword_segment is not None:
            start, end = self.keyword_segment
            if not 0 <= start < end:
                raise ValueError(f"{self.utt_id}: keyword segment must satisfy 0 <= start < end")
        if self.phonemes is not None and any(p < 0 for p in self.phonemes):
            raise ValueError(f"{self.utt_id}: phoneme labels must be non-negative")
        return self

    def to_line(self) -> str:
        def opt(value):
            return MISSING if value is None else str(value)

        start, end = self.keyword_segment if self.keyword_segment else (None, None)
        phonemes = " ".join(map(str, self.phonemes)) if self.phonemes is not None else None
        fields = [
            self.utt_id, self.feature_path, opt(self.speaker_id), str(self.phrase_label),
            opt(start), opt(end), opt(phonemes),
            MISSING if self.duration_hours is None else repr(self.duration_hours),
            self.split.value,
        ]
        return "\t".join(fields)

    @classmethod
    def from_fields(cls, fields: List[str]) -> "ManifestRecord":
        if len(fields) != len(MANIFEST_COLUMNS):
            raise ValueError(f"expected {len(MANIFEST_COLUMNS)} columns, got {len(fields)}")
        row = dict(zip(MANIFEST_COLUMNS, fields))

        def opt(key):
            return None if row[key] == MISSING else row[key]

        segment = None
        if opt("kw_start") is not None or opt("kw_end") is not None:
            segment = (int(row["kw_start"]), int(row["kw_end"]))
        phonemes = opt("phonemes")
        return cls(
            utt_id=row["utt_id"],
            feature_path=row["feature_path"],
            speaker_id=opt("speaker_id"),
            phrase_label=int(row["phrase_label"]),
            keyword_segment=segment,
            phonemes=tuple(int(p) for p in phonemes.split()) if phonemes is not None else None,
            duration_hours=float(row["duration_hours"]) if opt("duration_hours") is not None else None,
            split=row["split"],
        )


def write_manifest(path: Union[str, Path], records: List[ManifestRecord]) -> Path:
    """Write records with a header line"""
    path = Path(path)
    lines = ["\t".join(MANIFEST_COLUMNS)] + [r.to_line() for r in records]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_manifest(path: Union[str, Path], check_files: bool = True) -> List[ManifestRecord]:
    """
    Read and validate a manifest

    Args:
        path (Union[str, Path]): Manifest file
        check_files (bool): Require every referenced feature file to exist

    Returns:
        List[ManifestRecord]: Records in file order

    Raises:
        DataError: on malformed lines, duplicate ids or missing files

    Example:
        records = read_manifest("data/synth/voice_trigger.tsv")
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or tuple(lines[0].split("\t")) != MANIFEST_COLUMNS:
        raise DataError(f"{path}: missing or unexpected header line")

    records: List[ManifestRecord] = []
    seen = set()
    for number, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            record = ManifestRecord.from_fields(line.split("\t"))
        except (ValueError, ValidationError) as e:
            raise DataError(f"{path}:{number}: {e}") from e
        if record.utt_id in seen:
            raise DataError(f"{path}:{number}: duplicate utterance id {record.utt_id}")
        seen.add(record.utt_id)
        if check_files and not (path.parent / record.feature_path).is_file():
            raise DataError(f"{path}:{number}: feature file {record.feature_path} does not exist")
        records.append(record)
    return records
