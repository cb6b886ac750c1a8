import time

import numpy as np
import pytest

from isosft.solver import SolverConfig, TemplateFit, fit_template
from isosft.surfnet import SurfNet
from isosft.synth import make_sequence


@pytest.fixture(scope="session")
def sheet_fit():
    """Template fit of the default 130 x 100 mm, 13 x 10 sheet. Every
    default sequence shares this template, so one fit serves them all."""
    template = make_sequence(frames=1).template
    start = time.perf_counter()
    fit = fit_template(template, SolverConfig())
    return template, fit, time.perf_counter() - start


# one line per acceptance criterion, echoed after the test session
VERDICTS = {}


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[n])


def affine_net(A, c, bias=40.0):
    """A [2, 2, 3] net computing ``A p + c``: the hidden softplus units sit
    at ``p + bias``, where softplus is the identity to within e^-bias."""
    A, c = np.asarray(A, float), np.asarray(c, float)
    theta = np.concatenate([np.eye(2).ravel(), [bias, bias], A.ravel(),
                            c - bias * A.sum(axis=1)])
    return SurfNet([2, 2, 3], theta)


def affine_fit(mesh, A, c):
    """An exact TemplateFit for a planar mesh ``A p + c``."""
    net = affine_net(A, c)
    P = mesh.param_coords
    G = np.broadcast_to(np.asarray(A).T @ np.asarray(A), (len(P), 2, 2))
    err = float(np.linalg.norm(net.eval(P) - mesh.vertices, axis=1).mean())
    return TemplateFit(net, P.copy(), G.copy(), err)
