import pytest

from circuitse import builtin_case, generate_se_case, solve_power_flow, synthetic_case
from circuitse.casegen import NoiseSpec
from circuitse.grid import Branch, Bus, Gen, GridCase
from circuitse.interface import BusKind
from circuitse.runtime import Runtime

# enough PMUs on a 14-bus case that the estimate has a phase reference
PMU_RICH = dict(frac_pmu_perfect=0.2, frac_pmu_noisy=0.1)


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run statistical and large-case tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture()
def runtime():
    r = Runtime()
    yield r
    r._close_loop()  # avoid "unclosed event loop" warnings when runtimes are garbage collected


@pytest.fixture(scope="session")
def case14():
    return builtin_case("case14")


@pytest.fixture(scope="session")
def case14_pf(case14):
    return solve_power_flow(case14)


@pytest.fixture(scope="session")
def zero_noise_se(case14, case14_pf):
    return generate_se_case(case14_pf, case14, NoiseSpec.zero_noise(**PMU_RICH), seed=3)


@pytest.fixture(scope="session")
def noisy_se(case14, case14_pf):
    return generate_se_case(case14_pf, case14, NoiseSpec(**PMU_RICH), seed=11)


@pytest.fixture(scope="session")
def synthetic60():
    return synthetic_case(60, seed=5)


@pytest.fixture(scope="session")
def synthetic60_se(synthetic60):
    return generate_se_case(solve_power_flow(synthetic60), synthetic60, NoiseSpec(**PMU_RICH), seed=5)


@pytest.fixture()
def three_bus():
    """Slack, one pv generator and one load on a meshed triangle with a tapped transformer."""
    return GridCase(
        base_mva=100.0,
        buses=(
            Bus(1, BusKind.SLACK),
            Bus(2, BusKind.PV, pd=0.1),
            Bus(3, BusKind.PQ, pd=0.5, qd=0.2, bs=0.05),
        ),
        branches=(
            Branch(1, 2, r=0.01, x=0.1, b_chg=0.02),
            Branch(2, 3, r=0.02, x=0.15, b_chg=0.01),
            Branch(1, 3, r=0.0, x=0.2, tap=0.98, shift=0.05),
        ),
        gens=(Gen(1, vset=1.02), Gen(2, pg=0.3, vset=1.01)),
        name="three_bus",
    )
