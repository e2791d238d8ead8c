"""Fixed vocabularies, CSV schemas, and sentinels shared by the pipeline.

Timestamps throughout the raw tables are integer minutes since EPOCH
(no time zones). Categorical vocabularies are fixed here so that the
generator and the feature encoder always agree; every categorical except
gender carries one extra trailing "missing" column, which is how the
admissions feature block reaches its fixed width of 78:

    4 numerics (age, month, LOS hours, days since previous)
    + gender (2)
    + admission_type (10+1) + admission_location (12+1)
    + discharge_location (15+1) + insurance (3+1) + language (2+1)
    + ethnicity (6+1) + marital_status (6+1)
    + previous_admission_type (10+1)
    = 78
"""

from datetime import datetime, timedelta

EPOCH = datetime(2100, 1, 1)

MINUTES_PER_HOUR = 60
MINUTES_PER_DAY = 24 * 60

# Sentinels for first admissions (no predecessor).
DAYS_SINCE_PREV_SENTINEL = -1.0
PREV_TYPE_NONE = "NONE"
# Empty CSV field = missing categorical value.
MISSING = ""

GENDERS = ("F", "M")

ADMISSION_TYPES = (
    "AMBULATORY OBSERVATION",
    "DIRECT EMER.",
    "DIRECT OBSERVATION",
    "ELECTIVE",
    "EU OBSERVATION",
    "EW EMER.",
    "OBSERVATION ADMIT",
    "SURGICAL SAME DAY ADMISSION",
    "TRANSFER",
    "URGENT",
)

ADMISSION_LOCATIONS = (
    "AMBULATORY SURGERY TRANSFER",
    "CLINIC REFERRAL",
    "EMERGENCY ROOM",
    "INFORMATION NOT AVAILABLE",
    "INTERNAL TRANSFER TO OR FROM PSYCH",
    "PACU",
    "PHYSICIAN REFERRAL",
    "POLICE/COURT",
    "PROCEDURE SITE",
    "TRANSFER FROM HOSPITAL",
    "TRANSFER FROM SKILLED NURSING FACILITY",
    "WALK-IN/SELF REFERRAL",
)

DISCHARGE_LOCATIONS = (
    "ACUTE HOSPITAL",
    "AGAINST ADVICE",
    "ASSISTED LIVING",
    "CHRONIC/LONG TERM ACUTE CARE",
    "FEDERAL HEALTH CARE FACILITY",
    "HEALTHCARE FACILITY",
    "HOME",
    "HOME HEALTH CARE",
    "HOSPICE",
    "OTHER FACILITY",
    "PSYCH FACILITY",
    "REHAB",
    "SHORT TERM HOSPITAL",
    "SKILLED NURSING FACILITY",
    "SWING BED",
)

INSURANCES = ("Medicaid", "Medicare", "Other")

LANGUAGES = ("ENGLISH", "OTHER")

ETHNICITIES = (
    "ASIAN",
    "BLACK/AFRICAN AMERICAN",
    "HISPANIC/LATINO",
    "OTHER",
    "UNKNOWN",
    "WHITE",
)

MARITAL_STATUSES = (
    "DIVORCED",
    "MARRIED",
    "SEPARATED",
    "SINGLE",
    "UNKNOWN",
    "WIDOWED",
)

# Fixed block names and canonical concatenation order.
BLOCK_ORDER = ("admissions", "diagnoses", "procedures", "labevents", "notes")

ADMISSIONS_BLOCK_WIDTH = 78

CSV_SCHEMAS = {
    "admissions": (
        "subject_id",
        "hadm_id",
        "admittime",
        "dischtime",
        "deathtime",
        "admission_type",
        "admission_location",
        "discharge_location",
        "insurance",
        "language",
        "marital_status",
        "ethnicity",
    ),
    "patients": ("subject_id", "gender", "anchor_age"),
    "diagnoses_icd": ("subject_id", "hadm_id", "seq_num", "icd_code", "icd_version"),
    "procedures_icd": ("subject_id", "hadm_id", "seq_num", "icd_code", "icd_version"),
    "labevents": ("subject_id", "hadm_id", "itemid", "charttime", "flag"),
    "discharge_notes": ("subject_id", "hadm_id", "note_text"),
}

TABLE_FILES = {name: f"{name}.csv" for name in CSV_SCHEMAS}

LAB_FLAGS = ("normal", "abnormal")


def minutes_to_datetime(minutes: int) -> datetime:
    return EPOCH + timedelta(minutes=int(minutes))


def month_of(minutes: int) -> int:
    return minutes_to_datetime(minutes).month
