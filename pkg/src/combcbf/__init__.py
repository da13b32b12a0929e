"""Combinatorial and backup control barrier function safety filters.

Generalized combinatorial CBF-QPs join several certified safe sets under one
continuous filter; the aggregated implicit variant does the same for safe sets
generated by backup controllers.  Two spacecraft scenarios (attitude keep-out
and orbit station keeping) and a simulation harness exercise them.
"""
from .backup_cbf import (BackupPolicy, ImplicitCbfEval, RowSet, aggregated_value, assemble_implicit_constraints,
                         eval_implicit_cbf, eval_implicit_cbfs, membership, single_backup_rows)
from .cbf_core import (Barrier, BarrierBundle, ClassKappaE, CompositeSpec, ContractError, ControlAffineModel,
                       ScaleFunction, active_indices, bundle_from_barriers, order_statistic, tight_indices)
from .compatibility import CompatibilityReport, compatibility_margin, grid_audit, slater_margin
from .harness import ScenarioConfig, SafetyFilter, compare_variants, make_scenario, run_closed_loop
from .ode_flow import VectorField, finite_diff_sensitivity, flow_arrays, integrate_flow
from .qp_filter import (FilterResult, InputSet, QpProblem, QpSolution, Status, box_input, filter_aggregated_implicit,
                        filter_backup_single, filter_combinatorial, filter_gen_combinatorial, filter_standard,
                        polytope_from_ball, solve_qp)

__version__ = "0.1.0"
