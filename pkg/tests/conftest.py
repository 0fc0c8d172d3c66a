import numpy as np
import pytest

from teledex.kinematics import forward_keypoints, load_model
from teledex.pipeline import SyntheticOperator
from teledex.retarget import HumanHandFrame

_ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n, title = marker.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        previous = _ACCEPTANCE.get(n, (title, "PASS"))[1]
        verdict = "PASS" if report.outcome == "passed" and previous == "PASS" else "FAIL"
        _ACCEPTANCE[n] = (title, verdict)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        title, verdict = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} {verdict}: {title}")


@pytest.fixture(scope="session")
def planar2():
    return load_model("planar2")


@pytest.fixture(scope="session")
def human():
    return load_model("human")


@pytest.fixture(scope="session")
def o6():
    return load_model("o6")


@pytest.fixture(scope="session")
def l10():
    return load_model("l10")


@pytest.fixture(scope="session")
def operator(human):
    return SyntheticOperator(human)


@pytest.fixture(scope="session")
def grasp_frames(operator):
    """100 control cycles of the unperturbed synthetic grasp."""
    return [operator.frame(0.04 * k) for k in range(100)]


def fk_frame(model, theta, t=0.0):
    return HumanHandFrame(t, forward_keypoints(model, np.asarray(theta, dtype=float)))


def planar_grid_argmin(target, prev, alpha_smooth, l1=0.04, l2=0.03):
    """Exhaustive search of the planar finger's cost on the 1e-3 rad grid over its limit box.

    ``target`` maps keypoint j (1 = middle, 2 = tip) to its position; FK is closed form.
    """
    t1 = np.linspace(-0.5, 1.5, 2001)[:, None]
    t2 = np.linspace(0.0, 2.0, 2001)[None, :]
    mx, my = l1 * np.cos(t1), l1 * np.sin(t1)
    tx, ty = mx + l2 * np.cos(t1 + t2), my + l2 * np.sin(t1 + t2)
    cost = (mx - target[1][0]) ** 2 + (my - target[1][1]) ** 2 + target[1][2] ** 2
    cost = cost + (tx - target[2][0]) ** 2 + (ty - target[2][1]) ** 2 + target[2][2] ** 2
    cost = cost + alpha_smooth * ((t1 - prev[0]) ** 2 + (t2 - prev[1]) ** 2)
    i, j = np.unravel_index(np.argmin(cost), cost.shape)
    return np.array([t1[i, 0], t2[0, j]]), float(cost[i, j])
