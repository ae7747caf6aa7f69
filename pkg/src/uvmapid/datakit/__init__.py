"""Dataset manifests, balance checks and the generate-and-select pipeline."""

from .manifest import (
    GENDERS,
    RACES,
    BalanceReport,
    DatasetManifest,
    DatasetRecord,
    Violation,
    balance_report,
    load_manifest,
    parse_manifest,
    save_manifest,
    validate_manifest,
)

__all__ = [
    "GENDERS",
    "RACES",
    "BalanceReport",
    "DatasetManifest",
    "DatasetRecord",
    "Violation",
    "balance_report",
    "load_manifest",
    "parse_manifest",
    "save_manifest",
    "validate_manifest",
]
