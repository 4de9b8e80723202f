import numpy as np
import pytest

from iab_route_lab.network import Network, TopologyConfig


def hand_net(num_donors, num_iab, num_ues, links, **bounds):
    """Network with explicit (child, parent, delay) links and dummy positions."""
    cfg = TopologyConfig(num_donors=num_donors, num_iab=num_iab, num_ues=num_ues, **bounds)
    n = cfg.num_bs + num_ues
    pos = np.column_stack([np.arange(n, dtype=float), np.zeros(n)])
    net = Network(cfg, pos)
    for child, parent, d in links:
        net.add_link(child, parent, d)
    return net


@pytest.fixture
def triangle():
    """Donor A=0, IAB B=1, UE D=2: A-B 1, B-D 1, A-D 3."""
    return hand_net(1, 1, 1, [(1, 0, 1), (2, 1, 1), (2, 0, 3)])


SMALL = TopologyConfig(num_donors=1, num_iab=3, num_ues=9)


# one line per acceptance criterion, filled in by tests/test_acceptance.py
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
