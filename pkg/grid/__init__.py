"""
Power-system layer: case ingestion, power flow and optimal power flow.
"""

from .case_ingest import (
    AdmittanceMatrix,
    Branch,
    Bus,
    CaseFormatError,
    Generator,
    Network,
    NetworkValidationError,
    build_ybus,
    dumps_network,
    load_network,
    loads_network,
    parse_case,
    parse_case_text,
    save_network,
    with_branch_status,
)
from .opf import (
    ConstraintSlack,
    OpfProblem,
    OpfSolution,
    ViolationReport,
    audit_solution,
    check_operating_point,
    constraint_slacks,
    solve_opf,
    total_cost,
)
from .powerflow import PfSpec, PfState, PowerFlowError, PvSetpoint, recover_full_state, solve_pf

__all__ = [
    "AdmittanceMatrix",
    "Branch",
    "Bus",
    "CaseFormatError",
    "Generator",
    "Network",
    "NetworkValidationError",
    "build_ybus",
    "dumps_network",
    "load_network",
    "loads_network",
    "parse_case",
    "parse_case_text",
    "save_network",
    "with_branch_status",
    "ConstraintSlack",
    "OpfProblem",
    "OpfSolution",
    "ViolationReport",
    "audit_solution",
    "check_operating_point",
    "constraint_slacks",
    "solve_opf",
    "total_cost",
    "PfSpec",
    "PfState",
    "PowerFlowError",
    "PvSetpoint",
    "recover_full_state",
    "solve_pf",
]
