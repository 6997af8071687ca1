"""Cohort statistics: group summaries, correlation, t-tests, agreement, spline smooths."""
from .gam import LAMBDA_GRID, GamFit, gam_fit
from .report import CohortRow, StatsReport, cohort_summary, column, rows_from_subjects, write_report
from .svg import Plot
from .tests import (BlandAltmanResult, DegenerateInputError, TestResult, bland_altman, format_p, imi,
                    pearson_test, t_test_one_sample, t_test_two_sample)
from ..voxgrid import dsc

__all__ = [
    "BlandAltmanResult", "CohortRow", "DegenerateInputError", "GamFit", "LAMBDA_GRID", "Plot", "StatsReport",
    "TestResult", "bland_altman", "cohort_summary", "column", "dsc", "format_p", "gam_fit", "imi",
    "pearson_test", "rows_from_subjects", "t_test_one_sample", "t_test_two_sample", "write_report",
]
