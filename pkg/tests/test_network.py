import numpy as np
import pytest

from evmarket.network import (CostSpec, NetworkError, PowerNetwork,
                              RouteStorage, UtilitySpec, build_shift_factors,
                              validate_network)


def dc_flow_oracle(edges, n, injections):
    """Direct DC power-flow solve: B theta = p with theta fixed at bus 0."""
    B = np.zeros((n, n))
    for (i, j, x) in edges:
        w = 1.0 / x
        B[i, i] += w
        B[j, j] += w
        B[i, j] -= w
        B[j, i] -= w
    theta = np.zeros(n)
    theta[1:] = np.linalg.solve(B[1:, 1:], injections[1:])
    return np.array([(theta[i] - theta[j]) / x for (i, j, x) in edges])


class TestBuildShiftFactors:
    def test_two_bus_single_line(self):
        H = build_shift_factors([(0, 1, 1.3)], n=2, slack_bus=0)
        np.testing.assert_allclose(H, [[0.0, -1.0]], atol=1e-12)

    def test_triangle_equal_reactance(self):
        edges = [(0, 1, 1.0), (1, 2, 1.0), (0, 2, 1.0)]
        H = build_shift_factors(edges, n=3, slack_bus=0)
        p = np.array([1.0, -1.0, 0.0])
        flows = H @ p
        assert flows[0] == pytest.approx(2.0 / 3.0, abs=1e-12)
        np.testing.assert_allclose(flows, dc_flow_oracle(edges, 3, p), atol=1e-12)

    def test_star_network_matches_dense_solve(self):
        edges = [(0, 1, 0.5), (0, 2, 1.0), (0, 3, 2.0)]
        H = build_shift_factors(edges, n=4, slack_bus=0)
        rng = np.random.default_rng(7)
        for _ in range(5):
            p = rng.normal(size=4)
            p -= p.mean()
            np.testing.assert_allclose(H @ p, dc_flow_oracle(edges, 4, p), atol=1e-9)

    def test_tree_matches_oracle(self):
        edges = [(0, 1, 0.7), (1, 2, 1.1), (1, 3, 0.4), (3, 4, 2.3)]
        H = build_shift_factors(edges, n=5, slack_bus=2)
        rng = np.random.default_rng(3)
        for _ in range(10):
            p = rng.normal(size=5)
            p -= p.mean()
            np.testing.assert_allclose(H @ p, dc_flow_oracle(edges, 5, p), atol=1e-9)

    def test_slack_invariance_on_balanced_injections(self):
        edges = [(0, 1, 1.0), (1, 2, 2.0), (0, 2, 0.5), (2, 3, 1.5)]
        H0 = build_shift_factors(edges, n=4, slack_bus=0)
        H3 = build_shift_factors(edges, n=4, slack_bus=3)
        rng = np.random.default_rng(11)
        for _ in range(10):
            p = rng.normal(size=4)
            p -= p.mean()
            np.testing.assert_allclose(H0 @ p, H3 @ p, atol=1e-9)

    def test_disconnected_graph_rejected(self):
        with pytest.raises(NetworkError, match="disconnected"):
            build_shift_factors([(0, 1, 1.0)], n=4, slack_bus=0)

    def test_nonpositive_reactance_rejected(self):
        with pytest.raises(NetworkError, match="reactance"):
            build_shift_factors([(0, 1, -1.0)], n=2, slack_bus=0)

    def test_invalid_slack_rejected(self):
        with pytest.raises(NetworkError, match="slack"):
            build_shift_factors([(0, 1, 1.0)], n=2, slack_bus=5)


class TestValidateNetwork:
    def test_reference_two_bus_is_clean(self, twobus_net):
        report = validate_network(twobus_net)
        assert report.ok
        assert not report.issues

    def test_negative_quadratic_cost_flagged(self):
        net = PowerNetwork.from_specs(
            n=2, H=[[0.0, -1.0]], f_bar=[10.0],
            costs={(0, 0): CostSpec(a=-1.0, b=5.0)},
            utilities={(1, 1): UtilitySpec(c=8.0, cap=1.0)},
        )
        report = validate_network(net)
        codes = [i.code for i in report.errors]
        assert "cost-convexity" in codes

    def test_unbounded_linear_utility_warns(self):
        # marginal utility 100 with no cap; best generator tops out below it
        net = PowerNetwork.from_specs(
            n=2, H=[[0.0, -1.0]], f_bar=[10.0],
            costs={(0, 1): CostSpec(a=1.0, b=5.0, cap=10.0)},
            utilities={(1, 1): UtilitySpec(c=100.0)},
        )
        report = validate_network(net)
        assert report.ok  # warning, not error
        assert any(i.code == "unbounded" for i in report.warnings)

    def test_capped_or_priced_out_utility_is_fine(self):
        net = PowerNetwork.from_specs(
            n=2, H=[[0.0, -1.0]], f_bar=[10.0],
            costs={(0, 1): CostSpec(a=1.0, b=5.0)},  # uncapped, a > 0
            utilities={(1, 1): UtilitySpec(c=100.0)},
        )
        assert not validate_network(net).warnings

    def test_nonpositive_line_capacity_flagged(self):
        net = PowerNetwork.from_specs(
            n=2, H=[[0.0, -1.0]], f_bar=[0.0],
            costs={(0, 0): CostSpec(a=1.0, b=1.0)},
            utilities={},
        )
        assert any(i.code == "line-capacity" for i in validate_network(net).errors)


class TestRouteStorage:
    def test_matrix_round_trip(self):
        M = np.array([[0.1, 0.2], [0.0, 0.4]])
        rs = RouteStorage.from_matrix(M)
        np.testing.assert_allclose(rs.as_matrix(), M)
        assert rs.get(0, 1) == pytest.approx(0.2)
        assert rs.total() == pytest.approx(0.7)

    def test_negative_rejected(self):
        with pytest.raises(NetworkError):
            RouteStorage(n=2, values=np.array([0.0, -0.5, 0.0, 0.0]))

    def test_normalization_validation(self):
        rs = RouteStorage(n=2, values=np.array([0.0, 1.5, 0.0, 0.0]))
        issues = rs.validate()
        assert issues and "exceeds" in issues[0]

    def test_values_immutable(self):
        rs = RouteStorage.zeros(2)
        with pytest.raises(ValueError):
            rs.values[0] = 1.0
