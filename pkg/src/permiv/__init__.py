"""Heteroskedasticity- and identification-robust permutation tests for linear IV regression."""
from permiv.exceptions import *  # noqa: F401,F403
from permiv.inference import (
    ALL_TESTS,
    ConfidenceSet,
    GridSpec,
    TestResult,
    breusch_pagan,
    confidence_set,
    first_stage_f,
    run_test,
    run_tests,
    tsls,
)
from permiv.kernels import MomentSet, ar_stat, clr_critical_value, clr_stat, lm_stat, moments
from permiv.model import IVData, reduced_form, residualize, validate
from permiv.permstats import PermContext, par1, par2, pclr, plm, pns
from permiv.permutation import (
    PermutationPlan,
    RandomizationOutcome,
    hoeffding_variance,
    perm_moment_oracle,
    permutation_matrix,
    permutation_stream,
    randomization_decision,
)
from permiv.simulation import RejectionTable, SimDesign, generate, rejection_table

__version__ = "0.1.0"
