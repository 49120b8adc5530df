import numpy as np
import pytest

from relabund.model import CountTable, EffortSpec, ParameterSet

ACCEPTANCE_LINES: list[tuple[int, bool, str]] = []


def random_params(rng, I, J, equal_p0=True, unmonitored=(), scale=20.0, e1_scale=5.0):
    """Random constrained parameters with species 0 as reference."""
    n = rng.uniform(0.5, 2.0, (I, J)) * scale
    e0 = rng.uniform(0.5, 2.0, J)
    e1 = e1_scale * rng.uniform(0.5, 2.0, J)
    p0 = np.ones(I) if equal_p0 else rng.uniform(0.3, 2.0, I)
    p0[0] = 1.0
    p0[list(unmonitored)] = 0.0
    return ParameterSet(n, np.column_stack([e0, e1]), np.column_stack([p0, np.ones(I)]))


def draw_table(rng, params):
    x = rng.poisson(params.intensities())
    mon0 = params.p_tilde[:, 0] > 0
    return CountTable.from_arrays(x[:, :, 0], x[:, :, 1], mon0)


def effort_of(params):
    return EffortSpec(params.e_tilde[:, 0])


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def acceptance_log():
    def record(number: int, passed: bool, detail: str):
        ACCEPTANCE_LINES.append((number, bool(passed), detail))
        print(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


def separable_scenario():
    """Two homogeneous-habitat sites with intensity ``L[i, j] * g`` and retention ``p[i, k] * phi_k``.

    Returns the scenario and the expected cell means computed by quadrature.
    """
    from scipy import integrate

    from relabund.simulate import Rect, SpatialScenario, compile_field

    sites = [Rect(0.0, 1.0, 0.0, 1.0), Rect(1.0, 3.0, 0.0, 1.0)]
    g = "exp(-((x - 1.0)**2 + y**2) / 2)"
    phi = ["0.5 + 0.5 * sin(pi * y)", "exp(-x / 3)"]
    levels = np.array([[20.0, 12.0], [8.0, 30.0]])
    p = np.array([[0.6, 0.9], [0.3, 0.5]])
    intensity = [compile_field(f"where(x < 1, {a}, {b}) * {g}") for a, b in levels]
    retention = [[compile_field(f"{p[i, k]} * ({phi[k]})") for i in range(2)] for k in range(2)]
    scenario = SpatialScenario(sites, intensity, levels.max(axis=1), retention)

    gf = compile_field(g)
    phif = [compile_field(f) for f in phi]
    E = np.array([
        [
            integrate.dblquad(lambda y, x: float(gf(x, y) * phif[k](x, y)), r.x0, r.x1, r.y0, r.y1, epsabs=1e-12)[0]
            for k in range(2)
        ]
        for r in sites
    ])
    mean = levels[:, :, None] * E[None, :, :] * p[:, None, :]
    return scenario, mean
