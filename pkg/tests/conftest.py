import pytest

from radar_tr.config import PipelineConfig
from radar_tr.map_store import TeachGraph
from radar_tr.odometry import run_teach
from radar_tr.scenarios import load_corridor
from radar_tr.sim import simulate_sequence
from support import build_loop_runs


@pytest.fixture(scope="session")
def loop_runs():
    """The 200 m loop rendered once per session; pipeline runs are memoised per config."""
    return build_loop_runs()


@pytest.fixture(scope="session")
def corridor():
    """(World, Trajectory, SimConfig) of the shipped corridor scenario."""
    return load_corridor()


@pytest.fixture(scope="session")
def corridor_scans(corridor):
    world, traj, sim = corridor
    return simulate_sequence(world, traj, sim)[0]


@pytest.fixture(scope="session")
def corridor_teach(corridor_scans):
    """(TeachRun, TeachGraph) of the shipped corridor with the default config."""
    run = run_teach(corridor_scans, PipelineConfig())
    return run, TeachGraph(run.state.nodes)


def pytest_terminal_summary(terminalreporter):
    from support import ACCEPTANCE

    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
