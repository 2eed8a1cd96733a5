import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sheafflow.graph import CausalGraph, EdgeSpec, NodeSpec, Shift
from sheafflow.flow import FlowConfig, FlowState
from sheafflow.measures import ParticleCloud, sample_gaussian
from sheafflow.sinkhorn import SinkhornConfig


def demo_graph(weight: float = 1.0) -> CausalGraph:
    """The 3-node conflict graph: A->B->C routed to [8,0], A->C to [0,8]."""
    nodes = [NodeSpec("A", 2), NodeSpec("B", 2), NodeSpec("C", 2)]
    edges = [
        EdgeSpec("A", "B", Shift([4.0, 4.0]), weight),
        EdgeSpec("B", "C", Shift([4.0, -4.0]), weight),
        EdgeSpec("A", "C", Shift([0.0, 8.0]), weight),
    ]
    return CausalGraph(nodes, edges)


def demo_state(n: int, seed: int = 0) -> FlowState:
    return FlowState(
        step=0,
        clouds={
            "A": sample_gaussian([0.0, 0.0], [1.0, 1.0], n, seed=seed + 11),
            "B": sample_gaussian([0.0, 0.0], [1.0, 1.0], n, seed=seed + 12),
            "C": sample_gaussian([8.0, 0.0], [1.0, 1.0], n, seed=seed + 13),
        },
    )


def flow_config(**kw) -> FlowConfig:
    defaults = dict(
        eta=0.01,
        epsilon=0.1,
        steps=100,
        seed=7,
        snapshot_every=10,
        sinkhorn=SinkhornConfig(epsilon=1.0, max_iters=60, tol=1e-4, check_every=10),
    )
    defaults.update(kw)
    return FlowConfig(**defaults)


def random_clouds(n: int, m: int, d: int, seed: int, offset: float = 0.5):
    rng = np.random.default_rng(seed)
    src = ParticleCloud.uniform(rng.standard_normal((n, d)))
    dst = ParticleCloud.uniform(rng.standard_normal((m, d)) + offset)
    return src, dst


@pytest.fixture(scope="session")
def tmp_artifacts(tmp_path_factory):
    return tmp_path_factory.mktemp("artifacts")
