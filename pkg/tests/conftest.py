"""Shared builders for replica clusters and a synchronous message pump."""

from collections import deque
from typing import Dict, List, Optional, Sequence

from uavnet.consensus import (ConsensusParams, ConsensusState, KeyRegistry,
                              Mempool, ConsensusMessage, expected_proposer,
                              finalize, genesis_block, make_pre_prepare,
                              pbft_handle)


def build_registry(ids: Sequence[int], scheme: str = "keyed_hash") -> KeyRegistry:
    reg = KeyRegistry(scheme)
    for uid in ids:
        reg.register(uid, b"test-cluster")
    return reg


def build_cluster(n: int,
                  stakes: Optional[Dict[int, float]] = None,
                  registry: Optional[KeyRegistry] = None,
                  **params_overrides) -> List[ConsensusState]:
    """n replicas over validators 0..n-1, genesis already finalized."""
    params = ConsensusParams(n_delegates=n, **params_overrides)
    ids = list(range(n))
    reg = registry if registry is not None else build_registry(ids)
    states = []
    for uid in ids:
        st = ConsensusState(
            node_id=uid,
            params=params,
            registry=reg,
            validators=list(ids),
            stake_book=dict(stakes) if stakes else {},
            mempool=Mempool(reg, params.mempool_capacity),
        )
        assert finalize(st, genesis_block())
        states.append(st)
    return states


def pump(states: Sequence[ConsensusState],
         initial: Sequence[ConsensusMessage],
         now_us: int = 0,
         limit: int = 10_000) -> int:
    """Deliver messages to every replica until quiet; returns the count.

    Delivery includes the sender: replicas tally their own votes at emission,
    so the echo is a no-op, and a proposer bootstraps by receiving its own
    proposal like everyone else.
    """
    queue = deque(initial)
    seen = 0
    while queue:
        msg = queue.popleft()
        seen += 1
        if seen > limit:
            raise RuntimeError("message pump did not quiesce")
        for st in states:
            queue.extend(pbft_handle(st, msg, now_us))
    return seen


def run_height(states: Sequence[ConsensusState], now_us: int = 0) -> None:
    """Drive one fault-free height to commit on every replica."""
    height = states[0].height
    proposer = expected_proposer(states[0], height, 0)
    prop_state = next(s for s in states if s.node_id == proposer)
    pp = make_pre_prepare(prop_state, now_us)
    assert pp is not None
    pump(states, [pp], now_us)
    for st in states:
        assert st.height == height + 1, f"node {st.node_id} stuck at {st.height}"
