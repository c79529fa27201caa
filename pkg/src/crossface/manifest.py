"""Dataset manifest: one record per image, header-bearing TSV.

Columns: path, subject_id, modality, session, condition, enrollment_order.
Comment lines start with ``#``; ``#param key=value`` lines carry dataset
provenance (e.g. the synthetic transform parameters) and survive round-trips.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .errors import InvalidInputError

COLUMNS = ("path", "subject_id", "modality", "session", "condition", "enrollment_order")


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    subject_id: str
    modality: str
    session: int
    condition: str
    enrollment_order: int

    @property
    def image_id(self) -> str:
        return f"{self.subject_id}/{self.modality}/{self.session}"


@dataclass
class Manifest:
    records: list[ManifestRecord]
    params: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        paths = [r.path for r in self.records]
        if len(set(paths)) != len(paths):
            raise InvalidInputError("manifest paths must be unique")

    def subjects(self) -> list[str]:
        return sorted({r.subject_id for r in self.records})

    def filter(
        self,
        *,
        subjects=None,
        modality: str | None = None,
        sessions=None,
        condition: str | None = None,
    ) -> list[ManifestRecord]:
        subjects = set(subjects) if subjects is not None else None
        sessions = set(sessions) if sessions is not None else None
        out = []
        for r in self.records:
            if subjects is not None and r.subject_id not in subjects:
                continue
            if modality is not None and r.modality != modality:
                continue
            if sessions is not None and r.session not in sessions:
                continue
            if condition is not None and r.condition != condition:
                continue
            out.append(r)
        return out

    def save(self, path: str | Path) -> None:
        lines = [f"#param {k}={v}" for k, v in sorted(self.params.items())]
        lines.append("\t".join(COLUMNS))
        for r in self.records:
            lines.append(
                "\t".join(
                    [r.path, r.subject_id, r.modality, str(r.session), r.condition, str(r.enrollment_order)]
                )
            )
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Manifest":
        path = Path(path)
        if not path.exists():
            raise InvalidInputError(f"manifest not found: {path}")
        params: dict[str, str] = {}
        records: list[ManifestRecord] = []
        header: list[str] | None = None
        for lineno, line in enumerate(path.read_text().splitlines(), start=1):
            if not line.strip():
                continue
            if line.startswith("#param "):
                key, _, value = line[len("#param ") :].partition("=")
                params[key.strip()] = value.strip()
                continue
            if line.startswith("#"):
                continue
            cells = line.split("\t")
            if header is None:
                header = cells
                if tuple(header) != COLUMNS:
                    raise InvalidInputError(
                        f"{path}:{lineno}: bad manifest header {header!r}, expected {list(COLUMNS)}"
                    )
                continue
            if len(cells) != len(COLUMNS):
                raise InvalidInputError(f"{path}:{lineno}: expected {len(COLUMNS)} columns")
            records.append(
                ManifestRecord(
                    path=cells[0],
                    subject_id=cells[1],
                    modality=cells[2],
                    session=int(cells[3]),
                    condition=cells[4],
                    enrollment_order=int(cells[5]),
                )
            )
        if header is None:
            raise InvalidInputError(f"{path}: empty manifest")
        return cls(records, params)
