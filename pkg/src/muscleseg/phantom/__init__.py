"""Synthetic cohorts and tube phantoms standing in for annotated MRI."""
from .cohort import (AGE_BANDS, COHORT_COLUMNS, CohortSpec, SexCoefficients, SubjectRecord, load_coefficients,
                     plant_volumes, read_cohort_csv, sample_cohort, subject_from_row, write_cohort_csv)
from .geometry import (DESK_SPACING, FULL_SPACING, GeometryError, PhantomGeometry, TubeParams, fit_tube,
                       grid_dims_for_crop, sample_geometry, subject_seed, synthesize_cohort_member,
                       synthesize_subject)

__all__ = [
    "AGE_BANDS", "COHORT_COLUMNS", "CohortSpec", "DESK_SPACING", "GeometryError", "FULL_SPACING",
    "PhantomGeometry", "SexCoefficients", "SubjectRecord", "TubeParams", "fit_tube", "grid_dims_for_crop",
    "load_coefficients", "plant_volumes", "read_cohort_csv", "sample_cohort", "sample_geometry",
    "subject_from_row", "subject_seed", "synthesize_cohort_member", "synthesize_subject", "write_cohort_csv",
]
