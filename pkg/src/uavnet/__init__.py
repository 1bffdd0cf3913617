"""Deterministic simulator of blockchain-coordinated UAV fleets for
post-disaster response: flocking mobility, an aerial radio model, hybrid
delegated-stake/BFT consensus, on-chain coordination contracts, and an
attack/resilience evaluation harness."""

from .channel import (ChannelError, ChannelParams, LinkBudget, LinkMatrix,
                      link_budget, link_matrix, path_loss, shannon_rate, snr)
from .consensus import (Block, ConsensusError, ConsensusMessage, ConsensusParams,
                        ConsensusState, EvidenceRecord, KeyRegistry, Mempool,
                        PreparedCert, RoundOutcome, Transaction, dpos_round,
                        draw_proposer, epoch_validators, expected_proposer,
                        finalize, genesis_block, ledger_json_lines, make_message,
                        make_pre_prepare, on_timeout, pbft_handle,
                        proposer_probability, propose_block, quorum_size,
                        select_validators, sign_tx, tx_valid, validator_score,
                        verify_commit_cert)
from .contracts import (ALL_RIGHTS, ContractSet, Finding, GridGeometry,
                        Permission, PermissionRegistry, SearchAndRescueState,
                        access_check, assign_search_grid, check_invariants,
                        make_call_payload, report_findings, update_uav_status)
from .flocking import (FlockingError, FlockingParams, Obstacle, ProximityGraph,
                       UavState, avoid_obstacle_filter, build_proximity_graph,
                       control_input, desired_direction, misalignment_residual,
                       sigma_norm, step)
from .metrics import MetricsRecorder, quantile, summarize
from .security import (ATTACK_KINDS, AttackSpec, DEFAULT_INTENSITY, RiskError,
                       RiskParams, RiskTrace, aggregate_risk,
                       analytic_resilience, default_attack, empirical_resilience,
                       interference_peak_time, risk_components,
                       sample_risk_trace)
from .simcore import (FleetSimulation, ScenarioConfig, ScenarioError,
                      SimulationResult, build_fleet, load_scenario,
                      parse_scenario_text, run_simulation, scaled_flock_counts)

__version__ = "0.1.0"
