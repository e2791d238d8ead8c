"""Deterministic generator for MIMIC-shaped synthetic tables.

The generator plants a latent per-patient cluster signal: admissions of
patients in the same cluster draw correlated diagnosis/procedure codes,
lab-abnormality profiles, and note token streams, and the probability
that an admission is followed by a readmission within 30 days increases
with ``homophily_strength`` for high-risk clusters. With
``homophily_strength = 0`` the outcome is independent of the cluster.

Everything is a pure function of :class:`GenConfig`: the same config
yields byte-identical CSV output.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field, fields

import numpy as np

from . import schema
from .errors import ConfigError, IntegrityError, ParseError

# Cluster-signal strengths. These are generator-internal calibration
# constants, not user configuration. The demographic affinity also shapes
# the similarity graph: admissions of same-cluster patients share most
# categorical values, so they land above the cosine threshold while
# cross-cluster pairs do not.
_DIAG_AFFINITY = 0.65  # prob. a diagnosis code comes from the cluster pool
_PROC_AFFINITY = 0.65
_NOTE_AFFINITY = 0.62  # prob. a note token comes from the cluster vocab
_NOTE_CLUSTER_VOCAB = 16
_DEMOG_AFFINITY = 0.97  # prob. a categorical takes the cluster's preferred value
_GENDER_SKEW = 0.80  # prob. a patient takes the cluster's majority gender
_AGE_BAND_WIDTH = 5  # cluster age bands (years); admissions cluster by age too
_LOS_BAND_SIGMA = 0.35  # lognormal sigma within a cluster's LOS band
# Lab panel: a cluster orders a consistent panel (its slot marker sets);
# most panel items get measured each admission and run abnormal, plus a
# little uniform background testing.
_PANEL_MEASURE_RATE = 0.85
_PANEL_REPEAT_MEAN = 0.6  # extra measurements per measured panel item
_LAB_MARKER_ABNORMAL = 0.95
_LAB_BASE_ABNORMAL = 0.10
_MEAN_BACKGROUND_LABS = 3.0
_MARKERS_PER_SLOT = 5
_DEATH_RATE = 0.04  # fraction of patients whose last admission is fatal
_DEMOG_MISSING_RATE = 0.02  # empty marital/discharge-location fields
# Mean-zero cluster risk multipliers: a low plateau plus a ramp of a few
# hot clusters carrying several times the base risk. The skew keeps risk
# classes separable (a flat ramp would leave positives and negatives
# overlapping in every cluster); spreading the heat over several clusters
# keeps any single high-risk group from dominating.
_COLD_RELATIVE_RISK = 0.05
_HOT_RAMP_HALFSPAN = 0.55


def _scramble(n: int) -> list[int]:
    """Fixed non-monotone reordering (stride coprime to n)."""
    stride = max(1, round(n * 0.618))
    while math.gcd(stride, n) != 1:
        stride += 1
    return [(i * stride) % n for i in range(n)]


def _cluster_spread(k: int) -> np.ndarray:
    hot = max(1, round(k / 3))
    cold = k - hot
    rel = np.full(k, _COLD_RELATIVE_RISK)
    if hot:
        hot_mean = (k - _COLD_RELATIVE_RISK * cold) / hot
        halfspan = _HOT_RAMP_HALFSPAN * hot_mean if hot > 1 else 0.0
        ramp = np.linspace(hot_mean - halfspan, hot_mean + halfspan, hot)
        # Scrambled so that clusters with overlapping content pools do not
        # carry adjacent risk levels.
        rel[cold:] = ramp[_scramble(hot)]
    return rel - 1.0

_SYLLABLES = [c + v for c in "bcdfghjklmnpqrstvwz" for v in "aeiou"]


def _word(i: int) -> str:
    """Deterministic pseudo-word for token index i (unique per i)."""
    n = len(_SYLLABLES)
    a, rem = divmod(i, n * n)
    b, c = divmod(rem, n)
    return _SYLLABLES[a % n] + _SYLLABLES[b] + _SYLLABLES[c]


@dataclass(frozen=True)
class GenConfig:
    seed: int
    n_patients: int
    mean_admissions_per_patient: float = 2.4
    readmission_base_rate: float = 0.17
    homophily_strength: float = 0.5
    n_lab_items: int = 856
    n_icd_diag: int = 2000
    n_icd_proc: int = 600
    n_clusters: int = 8
    note_char_scale: float = 0.04  # mean note chars = 10550 * scale
    missing_rate: float = 0.10  # per-modality missing fraction


@dataclass(frozen=True)
class AdmissionRow:
    subject_id: int
    hadm_id: int
    admittime: int
    dischtime: int
    deathtime: int | None
    admission_type: str
    admission_location: str
    discharge_location: str
    insurance: str
    language: str
    marital_status: str
    ethnicity: str


@dataclass(frozen=True)
class PatientRow:
    subject_id: int
    gender: str
    anchor_age: int


@dataclass(frozen=True)
class CodeRow:
    subject_id: int
    hadm_id: int
    seq_num: int
    icd_code: str
    icd_version: int


@dataclass(frozen=True)
class LabEventRow:
    subject_id: int
    hadm_id: int
    itemid: int
    charttime: int
    flag: str


@dataclass(frozen=True)
class NoteRow:
    subject_id: int
    hadm_id: int
    note_text: str


@dataclass
class RawTables:
    admissions: list[AdmissionRow] = field(default_factory=list)
    patients: list[PatientRow] = field(default_factory=list)
    diagnoses_icd: list[CodeRow] = field(default_factory=list)
    procedures_icd: list[CodeRow] = field(default_factory=list)
    labevents: list[LabEventRow] = field(default_factory=list)
    discharge_notes: list[NoteRow] = field(default_factory=list)


def validate_config(config: GenConfig) -> None:
    if config.n_patients <= 0:
        raise ConfigError(f"n_patients must be positive, got {config.n_patients}")
    if config.mean_admissions_per_patient < 1.0:
        raise ConfigError(
            "mean_admissions_per_patient must be >= 1, got "
            f"{config.mean_admissions_per_patient}"
        )
    if not 0.0 < config.readmission_base_rate < 1.0:
        raise ConfigError(
            f"readmission_base_rate must be in (0,1), got {config.readmission_base_rate}"
        )
    if not 0.0 <= config.homophily_strength <= 1.0:
        raise ConfigError(
            f"homophily_strength must be in [0,1], got {config.homophily_strength}"
        )
    for name in ("n_lab_items", "n_icd_diag", "n_icd_proc", "n_clusters"):
        if getattr(config, name) <= 0:
            raise ConfigError(f"{name} must be positive, got {getattr(config, name)}")
    if config.note_char_scale <= 0:
        raise ConfigError(f"note_char_scale must be positive, got {config.note_char_scale}")
    if not 0.0 <= config.missing_rate < 1.0:
        raise ConfigError(f"missing_rate must be in [0,1), got {config.missing_rate}")
    m = config.mean_admissions_per_patient
    if m > 1.0:
        per_transition = config.readmission_base_rate * m / (m - 1.0)
        if per_transition >= 0.5:
            raise ConfigError(
                "readmission_base_rate too high for mean_admissions_per_patient "
                f"(implied per-transition rate {per_transition:.3f} >= 0.5)"
            )
    elif config.readmission_base_rate > 0:
        raise ConfigError(
            "readmission_base_rate > 0 requires mean_admissions_per_patient > 1"
        )


def diag_code(i: int) -> str:
    return f"D{i:05d}"


def proc_code(i: int) -> str:
    return f"P{i:05d}"


def _code_version(i: int) -> int:
    return 9 if i % 3 == 0 else 10


def make_code_text_map(n_icd_diag: int, n_icd_proc: int) -> dict[tuple[str, int], str]:
    """Synthetic (icd_code, icd_version) -> long_title map covering both
    vocabularies. Titles are unique word pairs (no shared filler words, so
    distinct codes embed to near-orthogonal vectors)."""
    out: dict[tuple[str, int], str] = {}
    for i in range(n_icd_diag):
        out[(diag_code(i), _code_version(i))] = f"{_word(2 * i)} {_word(2 * i + 1)}"
    base = 2 * n_icd_diag
    for i in range(n_icd_proc):
        out[(proc_code(i), _code_version(i))] = (
            f"{_word(base + 2 * i)} {_word(base + 2 * i + 1)}"
        )
    return out


def generate(config: GenConfig) -> RawTables:
    validate_config(config)
    rng = np.random.default_rng(config.seed)
    k = config.n_clusters

    # Per-cluster readmission risk multipliers, mean-zero across clusters.
    spread = _cluster_spread(k)
    m = config.mean_admissions_per_patient
    q_base = 0.0 if m <= 1.0 else config.readmission_base_rate * m / (m - 1.0)
    q_cluster = np.clip(q_base * (1.0 + config.homophily_strength * spread), 0.0, 0.98)

    # Cluster content is keyed to shared "slot" pools rather than one
    # private pool per cluster: low-risk clusters own one slot, high-risk
    # clusters combine several slots through per-modality rotations. Any
    # single code/item/token then averages across risk levels, while the
    # combination of slots still identifies the cluster (and same-cluster
    # admissions still look alike to the cosine search).
    half = max(k // 2, 1)

    def slot_of(cluster: int, rotation: int) -> int:
        return cluster if cluster < half else (cluster - half + rotation) % half

    diag_pool_size = max(4, config.n_icd_diag // max(half, 1))
    proc_pool_size = max(2, config.n_icd_proc // max(half, 1))
    marker_size = min(_MARKERS_PER_SLOT, max(1, config.n_lab_items // max(half, 1)))
    diag_pools = [
        np.arange(s * diag_pool_size, (s + 1) * diag_pool_size) % config.n_icd_diag
        for s in range(half)
    ]
    proc_pools = [
        np.arange(s * proc_pool_size, (s + 1) * proc_pool_size) % config.n_icd_proc
        for s in range(half)
    ]
    markers = [
        (np.arange(s * marker_size, (s + 1) * marker_size) % config.n_lab_items)
        for s in range(half)
    ]

    # Note vocabularies: one shared pool plus one pool per slot.
    shared_vocab = [_word(10_000_000 + i) for i in range(600)]
    slot_vocab = [
        [_word(20_000_000 + s * 1000 + i) for i in range(_NOTE_CLUSTER_VOCAB)]
        for s in range(half)
    ]
    mean_chars = 10_550.0 * config.note_char_scale
    mean_tokens = max(4.0, mean_chars / 7.0)  # ~6-char pseudo-words plus space

    _N_ROT = 3  # rotations (slots) per content modality
    _DIAG_BASE, _PROC_BASE, _LAB_BASE, _NOTE_BASE = 1, 3, 5, 2

    # Preferred demographic values (everything except gender), slot-keyed
    # with one rotation per column.
    demog_vocabs = (
        schema.ADMISSION_TYPES,
        schema.ADMISSION_LOCATIONS,
        schema.DISCHARGE_LOCATIONS,
        schema.INSURANCES,
        schema.LANGUAGES,
        schema.MARITAL_STATUSES,
        schema.ETHNICITIES,
    )
    preferred = np.zeros((k, len(demog_vocabs)), dtype=int)
    for gi, vocab in enumerate(demog_vocabs):
        step = max(1, len(vocab) // half)
        for c in range(k):
            preferred[c, gi] = (slot_of(c, gi) * step) % len(vocab)

    tables = RawTables()
    next_hadm = 20_000_001
    day = schema.MINUTES_PER_DAY

    # Age, gender mix, and length-of-stay all band by cluster; the band
    # orders are scrambled so none of them encodes risk monotonically.
    age_centers = np.linspace(30, 80, k)[_scramble(k)]
    majority_gender = [c % 2 for c in _scramble(k)]
    los_medians = np.linspace(40.0, 240.0, k)[list(reversed(_scramble(k)))]

    for p in range(config.n_patients):
        subject_id = 10_000_001 + p
        cluster = int(rng.integers(0, k))
        if rng.random() < _GENDER_SKEW:
            gender = schema.GENDERS[majority_gender[cluster]]
        else:
            gender = schema.GENDERS[1 - majority_gender[cluster]]
        age = int(np.clip(round(rng.normal(age_centers[cluster], _AGE_BAND_WIDTH)), 18, 90))
        tables.patients.append(PatientRow(subject_id, gender, age))

        n_adm = 1 + int(rng.poisson(m - 1.0))
        dies = rng.random() < _DEATH_RATE
        admit = int(rng.integers(0, 5 * 365 * day))

        for j in range(n_adm):
            hadm_id = next_hadm
            next_hadm += 1
            los_minutes = int(
                np.clip(
                    rng.lognormal(math.log(los_medians[cluster] * 60), _LOS_BAND_SIGMA),
                    4 * 60,
                    60 * day,
                )
            )
            disch = admit + los_minutes
            last = j == n_adm - 1
            death = disch if (dies and last) else None

            demog = []
            for gi, vocab in enumerate(demog_vocabs):
                if rng.random() < _DEMOG_AFFINITY:
                    demog.append(vocab[preferred[cluster, gi]])
                else:
                    demog.append(vocab[int(rng.integers(0, len(vocab)))])
            adm_type, adm_loc, disch_loc, insurance, language, marital, ethnicity = demog
            if rng.random() < _DEMOG_MISSING_RATE:
                marital = schema.MISSING
            if rng.random() < _DEMOG_MISSING_RATE:
                disch_loc = schema.MISSING

            tables.admissions.append(
                AdmissionRow(
                    subject_id=subject_id,
                    hadm_id=hadm_id,
                    admittime=admit,
                    dischtime=disch,
                    deathtime=death,
                    admission_type=adm_type,
                    admission_location=adm_loc,
                    discharge_location=disch_loc,
                    insurance=insurance,
                    language=language,
                    marital_status=marital,
                    ethnicity=ethnicity,
                )
            )

            # Diagnoses (sometimes >10 so downstream truncation is exercised).
            if rng.random() >= config.missing_rate:
                n_diag = min(14, 1 + int(rng.poisson(5.0)))
                for s in range(n_diag):
                    if rng.random() < _DIAG_AFFINITY:
                        pool = diag_pools[
                            slot_of(cluster, _DIAG_BASE + int(rng.integers(0, _N_ROT)))
                        ]
                        idx = int(pool[int(rng.integers(0, len(pool)))])
                    else:
                        idx = int(rng.integers(0, config.n_icd_diag))
                    tables.diagnoses_icd.append(
                        CodeRow(subject_id, hadm_id, s + 1, diag_code(idx), _code_version(idx))
                    )

            # Procedures (sometimes >5).
            if rng.random() >= config.missing_rate:
                n_proc = min(8, 1 + int(rng.poisson(2.0)))
                for s in range(n_proc):
                    if rng.random() < _PROC_AFFINITY:
                        pool = proc_pools[
                            slot_of(cluster, _PROC_BASE + int(rng.integers(0, _N_ROT)))
                        ]
                        idx = int(pool[int(rng.integers(0, len(pool)))])
                    else:
                        idx = int(rng.integers(0, config.n_icd_proc))
                    tables.procedures_icd.append(
                        CodeRow(subject_id, hadm_id, s + 1, proc_code(idx), _code_version(idx))
                    )

            # Lab events: the cluster's panel items are measured on most
            # admissions and mostly run abnormal; background tests on
            # random items add noise.
            if rng.random() >= config.missing_rate:
                panel = np.concatenate(
                    [markers[slot_of(cluster, _LAB_BASE + r)] for r in range(_N_ROT)]
                )
                item_list: list[int] = []
                abn_list: list[bool] = []
                for item in panel:
                    if rng.random() >= _PANEL_MEASURE_RATE:
                        continue
                    repeats = 1 + int(rng.poisson(_PANEL_REPEAT_MEAN))
                    for _ in range(repeats):
                        item_list.append(int(item))
                        abn_list.append(rng.random() < _LAB_MARKER_ABNORMAL)
                for _ in range(int(rng.poisson(_MEAN_BACKGROUND_LABS))):
                    item_list.append(int(rng.integers(0, config.n_lab_items)))
                    abn_list.append(rng.random() < _LAB_BASE_ABNORMAL)
                if not item_list:
                    item_list.append(int(panel[0]))
                    abn_list.append(True)
                chart_offsets = rng.integers(0, max(los_minutes, 1), len(item_list))
                for t, (item, abn) in enumerate(zip(item_list, abn_list)):
                    tables.labevents.append(
                        LabEventRow(
                            subject_id,
                            hadm_id,
                            50_000 + item,
                            admit + int(chart_offsets[t]),
                            "abnormal" if abn else "normal",
                        )
                    )

            # Discharge note: pseudo-token stream mixing slot and shared vocab.
            if rng.random() >= config.missing_rate:
                n_tok = max(3, int(rng.normal(mean_tokens, 0.15 * mean_tokens)))
                vocabs = [slot_vocab[slot_of(cluster, _NOTE_BASE + r)] for r in range(_N_ROT)]
                from_cluster = rng.random(n_tok) < _NOTE_AFFINITY
                rot = rng.integers(0, _N_ROT, n_tok)
                c_idx = rng.integers(0, _NOTE_CLUSTER_VOCAB, n_tok)
                s_idx = rng.integers(0, len(shared_vocab), n_tok)
                words = [
                    vocabs[rot[t]][c_idx[t]] if from_cluster[t] else shared_vocab[s_idx[t]]
                    for t in range(n_tok)
                ]
                tables.discharge_notes.append(NoteRow(subject_id, hadm_id, " ".join(words)))

            if not last:
                if rng.random() < q_cluster[cluster]:
                    gap = rng.uniform(2.0, 29.5) * day
                else:
                    gap = (31.0 + rng.exponential(120.0)) * day
                admit = disch + int(gap)

    return tables


def _item_int(itemid: int) -> int:
    return itemid


def write_tables(tables: RawTables, directory: str | os.PathLike) -> None:
    """Write all six tables as UTF-8 CSV with header rows (RFC-4180 quoting)."""
    os.makedirs(directory, exist_ok=True)

    def dump(name, rows, to_record):
        path = os.path.join(directory, schema.TABLE_FILES[name])
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(schema.CSV_SCHEMAS[name])
            for row in rows:
                writer.writerow(to_record(row))

    dump(
        "admissions",
        tables.admissions,
        lambda r: (
            r.subject_id,
            r.hadm_id,
            r.admittime,
            r.dischtime,
            "" if r.deathtime is None else r.deathtime,
            r.admission_type,
            r.admission_location,
            r.discharge_location,
            r.insurance,
            r.language,
            r.marital_status,
            r.ethnicity,
        ),
    )
    dump("patients", tables.patients, lambda r: (r.subject_id, r.gender, r.anchor_age))
    dump(
        "diagnoses_icd",
        tables.diagnoses_icd,
        lambda r: (r.subject_id, r.hadm_id, r.seq_num, r.icd_code, r.icd_version),
    )
    dump(
        "procedures_icd",
        tables.procedures_icd,
        lambda r: (r.subject_id, r.hadm_id, r.seq_num, r.icd_code, r.icd_version),
    )
    dump(
        "labevents",
        tables.labevents,
        lambda r: (r.subject_id, r.hadm_id, r.itemid, r.charttime, r.flag),
    )
    dump(
        "discharge_notes",
        tables.discharge_notes,
        lambda r: (r.subject_id, r.hadm_id, r.note_text),
    )


def _open_table(directory, name):
    path = os.path.join(directory, schema.TABLE_FILES[name])
    if not os.path.exists(path):
        raise ParseError("missing table file", file=path)
    return path


def _check_header(path, header, name):
    expected = schema.CSV_SCHEMAS[name]
    if header is None:
        raise ParseError("empty file (no header)", file=path, line=1)
    for col in header:
        if col not in expected:
            raise ParseError(f"unknown column {col!r}", file=path, line=1, column=col)
    for col in expected:
        if col not in header:
            raise ParseError(f"missing column {col!r}", file=path, line=1, column=col)
    if tuple(header) != expected:
        raise ParseError(
            f"column order must be {expected}", file=path, line=1
        )


def _int_field(path, line, column, value):
    try:
        return int(value)
    except ValueError:
        raise ParseError(
            f"expected integer, got {value!r}", file=path, line=line, column=column
        ) from None


def _read_rows(directory, name):
    path = _open_table(directory, name)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        _check_header(path, header, name)
        n_cols = len(schema.CSV_SCHEMAS[name])
        for record in reader:
            if len(record) != n_cols:
                raise ParseError(
                    f"expected {n_cols} fields, got {len(record)}",
                    file=path,
                    line=reader.line_num,
                )
            yield path, reader.line_num, record


def read_tables(directory: str | os.PathLike) -> RawTables:
    """Inverse of :func:`write_tables`; raises ParseError on malformed input."""
    tables = RawTables()
    for path, line, r in _read_rows(directory, "admissions"):
        tables.admissions.append(
            AdmissionRow(
                subject_id=_int_field(path, line, "subject_id", r[0]),
                hadm_id=_int_field(path, line, "hadm_id", r[1]),
                admittime=_int_field(path, line, "admittime", r[2]),
                dischtime=_int_field(path, line, "dischtime", r[3]),
                deathtime=None if r[4] == "" else _int_field(path, line, "deathtime", r[4]),
                admission_type=r[5],
                admission_location=r[6],
                discharge_location=r[7],
                insurance=r[8],
                language=r[9],
                marital_status=r[10],
                ethnicity=r[11],
            )
        )
    for path, line, r in _read_rows(directory, "patients"):
        tables.patients.append(
            PatientRow(
                subject_id=_int_field(path, line, "subject_id", r[0]),
                gender=r[1],
                anchor_age=_int_field(path, line, "anchor_age", r[2]),
            )
        )
    for name, target in (("diagnoses_icd", tables.diagnoses_icd),
                         ("procedures_icd", tables.procedures_icd)):
        for path, line, r in _read_rows(directory, name):
            target.append(
                CodeRow(
                    subject_id=_int_field(path, line, "subject_id", r[0]),
                    hadm_id=_int_field(path, line, "hadm_id", r[1]),
                    seq_num=_int_field(path, line, "seq_num", r[2]),
                    icd_code=r[3],
                    icd_version=_int_field(path, line, "icd_version", r[4]),
                )
            )
    for path, line, r in _read_rows(directory, "labevents"):
        flag = r[4]
        if flag not in schema.LAB_FLAGS:
            raise ParseError(
                f"flag must be one of {schema.LAB_FLAGS}, got {flag!r}",
                file=path,
                line=line,
                column="flag",
            )
        tables.labevents.append(
            LabEventRow(
                subject_id=_int_field(path, line, "subject_id", r[0]),
                hadm_id=_int_field(path, line, "hadm_id", r[1]),
                itemid=_int_field(path, line, "itemid", r[2]),
                charttime=_int_field(path, line, "charttime", r[3]),
                flag=flag,
            )
        )
    for path, line, r in _read_rows(directory, "discharge_notes"):
        tables.discharge_notes.append(
            NoteRow(
                subject_id=_int_field(path, line, "subject_id", r[0]),
                hadm_id=_int_field(path, line, "hadm_id", r[1]),
                note_text=r[2],
            )
        )
    return tables


def validate_tables(tables: RawTables) -> None:
    """Check referential integrity and time ordering; raise IntegrityError."""
    known_adm = {a.hadm_id for a in tables.admissions}
    known_pat = {p.subject_id for p in tables.patients}
    for a in tables.admissions:
        if a.subject_id not in known_pat:
            raise IntegrityError(
                f"admission {a.hadm_id} references unknown patient {a.subject_id}"
            )
        if not a.admittime < a.dischtime:
            raise IntegrityError(
                f"admission {a.hadm_id}: admit time {a.admittime} not before "
                f"discharge time {a.dischtime}"
            )
    for name in ("diagnoses_icd", "procedures_icd", "labevents", "discharge_notes"):
        for row in getattr(tables, name):
            if row.hadm_id not in known_adm:
                raise IntegrityError(
                    f"{name} row references unknown admission {row.hadm_id}"
                )


def write_code_text_map(code_map: dict[tuple[str, int], str], path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("icd_code", "icd_version", "long_title"))
        for (code, version), title in code_map.items():
            writer.writerow((code, version, title))


def tables_equal(a: RawTables, b: RawTables) -> bool:
    return all(getattr(a, f.name) == getattr(b, f.name) for f in fields(RawTables))
