"""Cohort construction: filters, temporal derivation, 30-day labels.

An admission enters the cohort only if it has a discharge note and no
death timestamp. Records are ordered by (patient, admit time, admission
id), and per-patient ordering drives both the temporal derivations and
the readmission label (gap of at most 30.0 days counts as readmitted;
the boundary is inclusive).
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, replace

from . import schema
from .datagen import RawTables
from .errors import IntegrityError, ParseError

READMIT_WINDOW_MINUTES = 30 * schema.MINUTES_PER_DAY


@dataclass(frozen=True)
class AdmissionRecord:
    patient_id: int
    admission_id: int
    admit_time: int
    discharge_time: int
    gender: str
    age: int
    insurance: str
    language: str
    marital_status: str
    ethnicity: str
    admission_type: str
    admission_location: str
    discharge_location: str
    month_of_admission: int
    length_of_stay_hours: float = 0.0
    days_since_previous: float = schema.DAYS_SINCE_PREV_SENTINEL
    previous_admission_type: str = schema.PREV_TYPE_NONE
    label_readmit_30d: bool = False


@dataclass
class Cohort:
    records: list[AdmissionRecord]
    # patient_id -> admission ids sorted by admit time
    patient_index: dict[int, list[int]]

    def __len__(self) -> int:
        return len(self.records)

    def row_of(self) -> dict[int, int]:
        """admission_id -> row index in `records`."""
        return {r.admission_id: i for i, r in enumerate(self.records)}


def build_cohort(tables: RawTables) -> Cohort:
    """Apply cohort filters and join patient demographics.

    Excludes admissions without a discharge note and admissions with a
    death timestamp. Raises IntegrityError for admissions referencing an
    unknown patient.
    """
    patients = {p.subject_id: p for p in tables.patients}
    noted = {n.hadm_id for n in tables.discharge_notes}

    records = []
    for adm in tables.admissions:
        if adm.deathtime is not None or adm.hadm_id not in noted:
            continue
        patient = patients.get(adm.subject_id)
        if patient is None:
            raise IntegrityError(
                f"admission {adm.hadm_id} references unknown patient {adm.subject_id}"
            )
        language = "ENGLISH" if adm.language == "ENGLISH" else (
            adm.language if adm.language == schema.MISSING else "OTHER"
        )
        records.append(
            AdmissionRecord(
                patient_id=adm.subject_id,
                admission_id=adm.hadm_id,
                admit_time=adm.admittime,
                discharge_time=adm.dischtime,
                gender=patient.gender,
                age=patient.anchor_age,
                insurance=adm.insurance,
                language=language,
                marital_status=adm.marital_status,
                ethnicity=adm.ethnicity,
                admission_type=adm.admission_type,
                admission_location=adm.admission_location,
                discharge_location=adm.discharge_location,
                month_of_admission=schema.month_of(adm.admittime),
            )
        )

    records.sort(key=lambda r: (r.patient_id, r.admit_time, r.admission_id))
    index: dict[int, list[int]] = {}
    for r in records:
        index.setdefault(r.patient_id, []).append(r.admission_id)
    return Cohort(records=records, patient_index=index)


def derive_temporal(cohort: Cohort) -> Cohort:
    """Fill length of stay, days since previous admission, previous type."""
    out = []
    prev: AdmissionRecord | None = None
    for r in cohort.records:
        los_hours = (r.discharge_time - r.admit_time) / schema.MINUTES_PER_HOUR
        if prev is not None and prev.patient_id == r.patient_id:
            gap_days = (r.admit_time - prev.discharge_time) / schema.MINUTES_PER_DAY
            out.append(
                replace(
                    r,
                    length_of_stay_hours=los_hours,
                    days_since_previous=gap_days,
                    previous_admission_type=prev.admission_type,
                )
            )
        else:
            out.append(
                replace(
                    r,
                    length_of_stay_hours=los_hours,
                    days_since_previous=schema.DAYS_SINCE_PREV_SENTINEL,
                    previous_admission_type=schema.PREV_TYPE_NONE,
                )
            )
        prev = r
    return Cohort(records=out, patient_index=cohort.patient_index)


def label_readmissions(cohort: Cohort) -> Cohort:
    """Set label_readmit_30d: next admission of the same patient starts
    within 30.0 days (inclusive) of this discharge."""
    out = list(cohort.records)
    for i, r in enumerate(out):
        label = False
        if i + 1 < len(out):
            nxt = out[i + 1]
            if nxt.patient_id == r.patient_id:
                label = (nxt.admit_time - r.discharge_time) <= READMIT_WINDOW_MINUTES
        out[i] = replace(r, label_readmit_30d=label)
    return Cohort(records=out, patient_index=cohort.patient_index)


def prepare_cohort(tables: RawTables) -> Cohort:
    """build_cohort + derive_temporal + label_readmissions."""
    return label_readmissions(derive_temporal(build_cohort(tables)))


COHORT_CSV_COLUMNS = (
    "patient_id",
    "admission_id",
    "admit_time",
    "discharge_time",
    "gender",
    "age",
    "insurance",
    "language",
    "marital_status",
    "ethnicity",
    "admission_type",
    "admission_location",
    "discharge_location",
    "month_of_admission",
    "length_of_stay_hours",
    "days_since_previous",
    "previous_admission_type",
    "label_readmit_30d",
)


def write_cohort_csv(cohort: Cohort, path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(COHORT_CSV_COLUMNS)
        for r in cohort.records:
            writer.writerow(
                (
                    r.patient_id,
                    r.admission_id,
                    r.admit_time,
                    r.discharge_time,
                    r.gender,
                    r.age,
                    r.insurance,
                    r.language,
                    r.marital_status,
                    r.ethnicity,
                    r.admission_type,
                    r.admission_location,
                    r.discharge_location,
                    r.month_of_admission,
                    repr(r.length_of_stay_hours),
                    repr(r.days_since_previous),
                    r.previous_admission_type,
                    int(r.label_readmit_30d),
                )
            )


def read_cohort_csv(path: str | os.PathLike) -> Cohort:
    if not os.path.exists(path):
        raise ParseError("missing cohort file", file=path)
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != COHORT_CSV_COLUMNS:
            raise ParseError(
                f"cohort header must be {COHORT_CSV_COLUMNS}", file=path, line=1
            )
        for r in reader:
            if len(r) != len(COHORT_CSV_COLUMNS):
                raise ParseError(
                    f"expected {len(COHORT_CSV_COLUMNS)} fields, got {len(r)}",
                    file=path,
                    line=reader.line_num,
                )
            try:
                records.append(
                    AdmissionRecord(
                        patient_id=int(r[0]),
                        admission_id=int(r[1]),
                        admit_time=int(r[2]),
                        discharge_time=int(r[3]),
                        gender=r[4],
                        age=int(r[5]),
                        insurance=r[6],
                        language=r[7],
                        marital_status=r[8],
                        ethnicity=r[9],
                        admission_type=r[10],
                        admission_location=r[11],
                        discharge_location=r[12],
                        month_of_admission=int(r[13]),
                        length_of_stay_hours=float(r[14]),
                        days_since_previous=float(r[15]),
                        previous_admission_type=r[16],
                        label_readmit_30d=bool(int(r[17])),
                    )
                )
            except ValueError as exc:
                raise ParseError(str(exc), file=path, line=reader.line_num) from None
    index: dict[int, list[int]] = {}
    for rec in records:
        index.setdefault(rec.patient_id, []).append(rec.admission_id)
    return Cohort(records=records, patient_index=index)
