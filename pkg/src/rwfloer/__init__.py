"""Closed orbits of Hamiltonians driven by random walks, their laws and Floer cylinders."""

from .sample_space import (CoinSequence, WalkPath, clt_distance, enumerate_endpoints, holder_seminorm,
                           make_walk, sample_coin_block, sample_coins, walk_eval)
from .torus_phase import (CutoffSpec, FourierTerm, HamiltonianSpec, choose_R, eval_H, eval_K_omega,
                          grad_H, grad_K_omega, pendulum, product_cosine)
from .orbit_solver import (ClosedOrbit, Divergence, FamilyCollapse, MaxIterations, OrbitEnsemble,
                           OrbitFamily, SingularJacobian, find_orbit_family, integrate_flow,
                           load_ensemble, newton_closed_orbit, save_ensemble, solve_ensemble,
                           symplectic_action)
from .floer import ContinuationStall, FloerCylinder, cylinder_energy, floer_residual, solve_cylinder
from .measure_lab import (EmpiricalMeasure, GridMismatch, accumulate, action_of_measure,
                          measure_distance, read_measure, tightness_report, write_measure)
from .fokker_planck import (CFLViolation, FPGrid, NonConvergence, fp_adjoint, fp_apply,
                            periodic_solve, weak_residual)

__version__ = "0.1.0"
