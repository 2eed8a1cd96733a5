import numpy as np
import pytest

from conftest import demo_graph, demo_state, flow_config
from oracles import dense_operator_matrix
from sheafflow.flow import FlowState, run_flow
from sheafflow.graph import CausalGraph, EdgeSpec, NodeSpec, Shift, SmoothResidual
from sheafflow.hodge import (
    EdgeCochain,
    TangentField,
    build_aligners,
    coboundary,
    coboundary_adjoint,
    extremal_eigen_estimate,
    harmonic_residual,
    inner_edges,
    inner_nodes,
    laplacian_operator,
    sheaf_laplacian_apply,
)
from sheafflow.measures import ParticleCloud, pushforward, sample_gaussian
from sheafflow.sinkhorn import SinkhornConfig
from sheafflow.solvers import conjugate_gradient


def tight_cfg(eps=0.05):
    return flow_config(
        epsilon=eps, sinkhorn=SinkhornConfig(epsilon=1.0, max_iters=8000, tol=1e-9)
    )


def random_field(state, seed):
    rng = np.random.default_rng(seed)
    return TangentField(
        {n: rng.standard_normal(c.points.shape) for n, c in state.clouds.items()}
    )


def random_cochain(state, graph, seed):
    rng = np.random.default_rng(seed)
    return EdgeCochain(
        [
            rng.standard_normal((state.clouds[e.src].n, state.clouds[e.dst].dim))
            for e in graph.edges
        ]
    )


@pytest.fixture(scope="module")
def demo_setup():
    g = demo_graph()
    state = demo_state(n=20)
    aligners = build_aligners(state, g, tight_cfg())
    return g, state, aligners


class TestCoboundary:
    def test_zero_field(self, demo_setup):
        g, state, aligners = demo_setup
        dV = coboundary(TangentField.zeros(state), state, g, aligners)
        for blk in dV.blocks:
            assert np.allclose(blk, 0.0)

    def test_identity_same_support(self):
        # identity mechanism onto the same points with tiny epsilon makes
        # the aligner the identity pairing: (dV)_e = V_u - V_v
        rng = np.random.default_rng(0)
        pts = rng.standard_normal((15, 2)) * 2.0
        g = CausalGraph(
            [NodeSpec("u", 2), NodeSpec("v", 2)],
            [EdgeSpec("u", "v", Shift([0.0, 0.0]))],
        )
        state = FlowState(0, {
            "u": ParticleCloud.uniform(pts), "v": ParticleCloud.uniform(pts)
        })
        cfg = tight_cfg(eps=0.005)
        aligners = build_aligners(state, g, cfg)
        V = random_field(state, 1)
        dV = coboundary(V, state, g, aligners)
        assert np.allclose(dV.blocks[0], V.blocks["u"] - V.blocks["v"], atol=1e-8)

    def test_exact_section_in_kernel(self):
        # v's cloud is the exact pushforward; V_v = J V_u gives dV ~ 0
        rng = np.random.default_rng(2)
        mech = SmoothResidual(
            rng.normal(size=(5, 2)), rng.normal(size=(2, 5)), rng.normal(size=5), 0.5
        )
        pts = rng.standard_normal((12, 2)) * 2.0
        u = ParticleCloud.uniform(pts)
        v = pushforward(u, mech)
        g = CausalGraph(
            [NodeSpec("u", 2), NodeSpec("v", 2)], [EdgeSpec("u", "v", mech)]
        )
        state = FlowState(0, {"u": u, "v": v})
        aligners = build_aligners(state, g, tight_cfg(eps=0.002))
        Vu = rng.standard_normal((12, 2))
        V = TangentField({"u": Vu, "v": mech.jvp(pts, Vu)})
        dV = coboundary(V, state, g, aligners)
        assert np.abs(dV.blocks[0]).max() <= 1e-10
        LV = sheaf_laplacian_apply(V, state, g, aligners)
        assert max(np.abs(b).max() for b in LV.blocks.values()) <= 1e-8


class TestAdjoint:
    def test_zero_cochain(self, demo_setup):
        g, state, aligners = demo_setup
        W = EdgeCochain([np.zeros((state.clouds[e.src].n, 2)) for e in g.edges])
        out = coboundary_adjoint(W, state, g, aligners)
        for blk in out.blocks.values():
            assert np.allclose(blk, 0.0)

    def test_single_particle_dense_transpose(self):
        g = CausalGraph(
            [NodeSpec("u", 2), NodeSpec("v", 2)], [EdgeSpec("u", "v", Shift([1.0, 0.0]))]
        )
        state = FlowState(0, {
            "u": ParticleCloud.uniform([[0.0, 0.0]]),
            "v": ParticleCloud.uniform([[1.5, 0.5]]),
        })
        aligners = build_aligners(state, g, tight_cfg())
        # uniform single-particle weights make the weighted adjoint the
        # plain euclidean transpose of the dense coboundary matrix
        D = np.zeros((2, 4))
        for k in range(4):
            x = np.zeros(4)
            x[k] = 1.0
            V = TangentField({"u": x[:2].reshape(1, 2), "v": x[2:].reshape(1, 2)})
            D[:, k] = coboundary(V, state, g, aligners).blocks[0][0]
        rng = np.random.default_rng(3)
        W = EdgeCochain([rng.standard_normal((1, 2))])
        out = coboundary_adjoint(W, state, g, aligners)
        expected = D.T @ W.blocks[0][0]
        got = np.concatenate([out.blocks["u"][0], out.blocks["v"][0]])
        assert np.allclose(got, expected, atol=1e-12)

    def test_adjoint_identity_100_trials(self, demo_setup):
        g, state, aligners = demo_setup
        for seed in range(100):
            V = random_field(state, 10 + seed)
            W = random_cochain(state, g, 1000 + seed)
            lhs = inner_edges(coboundary(V, state, g, aligners), W, state, g)
            rhs = inner_nodes(V, coboundary_adjoint(W, state, g, aligners), state)
            assert abs(lhs - rhs) <= 1e-10 * (1.0 + abs(lhs) + abs(rhs))


class TestLaplacian:
    def test_quadratic_form_is_coboundary_norm(self, demo_setup):
        g, state, aligners = demo_setup
        for seed in range(100):
            V = random_field(state, 20 + seed)
            LV = sheaf_laplacian_apply(V, state, g, aligners)
            quad = inner_nodes(V, LV, state)
            dV = coboundary(V, state, g, aligners)
            norm2 = inner_edges(dV, dV, state, g)
            assert quad >= -1e-12
            assert abs(quad - norm2) <= 1e-10 * (1.0 + norm2)

    def test_dense_psd(self, demo_setup):
        g, state, aligners = demo_setup
        apply_op, dim = laplacian_operator(state, g, aligners)
        M = dense_operator_matrix(apply_op, dim)
        assert np.allclose(M, M.T, atol=1e-10)
        eigs = np.linalg.eigvalsh(M)
        assert eigs.min() >= -1e-10

    def test_extremal_eigs_match_dense(self):
        g = demo_graph()
        state = demo_state(n=8)
        aligners = build_aligners(state, g, tight_cfg())
        apply_op, dim = laplacian_operator(state, g, aligners)
        eigs = np.linalg.eigvalsh(dense_operator_matrix(apply_op, dim))
        lam_max = extremal_eigen_estimate(state, g, aligners, "max", iters=20000)
        lam_min = extremal_eigen_estimate(state, g, aligners, "min", iters=200)
        assert abs(lam_max - eigs.max()) <= 1e-6 * max(1.0, eigs.max())
        assert abs(lam_min - eigs.min()) <= 1e-6 * max(1.0, eigs.max())
        assert lam_min >= -1e-10

    def test_disconnected_node_zero_operator(self):
        g = CausalGraph([NodeSpec("A", 2)], [])
        state = FlowState(0, {"A": sample_gaussian([0, 0], [1, 1], 6, seed=4)})
        aligners = build_aligners(state, g, tight_cfg())
        lam = extremal_eigen_estimate(state, g, aligners, "max", iters=50)
        assert lam == 0.0

    def test_hodge_split(self, demo_setup):
        # solve Lap X = Lap V by CG; the remainder V - X lies in Ker(d)
        # and is orthogonal to Im(d*)
        g, state, aligners = demo_setup
        apply_op, dim = laplacian_operator(state, g, aligners)
        from sheafflow.hodge import _flatten, _unflatten

        names = list(g.node_names)
        V = random_field(state, 50)
        v = _flatten(V, state, names)
        rhs = apply_op(v)
        x, res, ok = conjugate_gradient(apply_op, rhs, tol=1e-12, max_iters=5000)
        assert ok
        V_harm = _unflatten(v - x, state, names)
        dV = coboundary(V_harm, state, g, aligners)
        assert np.sqrt(inner_edges(dV, dV, state, g)) <= 1e-6
        for seed in range(5):
            W = random_cochain(state, g, 60 + seed)
            dstarW = coboundary_adjoint(W, state, g, aligners)
            assert abs(inner_nodes(V_harm, dstarW, state)) <= 1e-6


class TestHarmonicResidual:
    def test_coherent_graph_zero_by_convention(self):
        rng = np.random.default_rng(5)
        pts = rng.standard_normal((10, 2)) * 2.0
        g = CausalGraph(
            [NodeSpec("u", 2), NodeSpec("v", 2)], [EdgeSpec("u", "v", Shift([0.0, 0.0]))]
        )
        state = FlowState(0, {"u": ParticleCloud.uniform(pts), "v": ParticleCloud.uniform(pts)})
        R, stat = harmonic_residual(state, g, tight_cfg(eps=0.002))
        assert stat == 0.0

    def test_two_anchor_midpoint_cancellation(self):
        # single atoms: anchors at -2 and +2 both feed X at 0; the adjoint
        # contributions on X cancel exactly at the midpoint equilibrium
        g = CausalGraph(
            [NodeSpec("L", 1), NodeSpec("R", 1), NodeSpec("X", 1)],
            [EdgeSpec("L", "X", Shift([0.0])), EdgeSpec("R", "X", Shift([0.0]))],
        )
        state = FlowState(0, {
            "L": ParticleCloud.uniform([[-2.0]]),
            "R": ParticleCloud.uniform([[2.0]]),
            "X": ParticleCloud.uniform([[0.0]]),
        })
        cfg = tight_cfg(eps=0.5)
        aligners = build_aligners(state, g, cfg)
        R, stat = harmonic_residual(state, g, cfg, aligners)
        assert np.isclose(R.blocks[0][0, 0], -4.0, atol=1e-9)  # 2*(-2 - 0)
        assert np.isclose(R.blocks[1][0, 0], 4.0, atol=1e-9)
        dstar = coboundary_adjoint(R, state, g, aligners)
        assert abs(dstar.blocks["X"][0, 0]) <= 1e-9

    def test_stationarity_drops_along_flow(self):
        # demo conflict at reduced scale: the converged state's residual is
        # much closer to harmonic than the initial one
        g = demo_graph()
        state = demo_state(n=80)
        probe = tight_cfg(eps=0.1)
        _, stat0 = harmonic_residual(state, g, probe)
        noisy_cfg = flow_config(steps=300, seed=5)
        mid, _ = run_flow(g, state, noisy_cfg)
        settle_cfg = flow_config(steps=120, noise_scale=0.0, seed=6)
        settled, _ = run_flow(g, FlowState(0, mid.clouds), settle_cfg)
        _, stat1 = harmonic_residual(settled, g, probe)
        assert stat1 <= 0.2 * stat0
