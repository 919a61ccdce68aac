import sys

import numpy as np
import pytest

import basisid as b


@pytest.fixture(scope="session")
def checklist(pytestconfig):
    """Reporter for the acceptance tests: one verdict line per criterion,
    written past pytest's output capture so the checklist is visible in a
    plain ``pytest -v`` log."""
    capman = pytestconfig.pluginmanager.getplugin("capturemanager")

    def report(num, label, ok, detail="", verdict=None):
        verdict = verdict or ("PASS" if ok else "FAIL")
        tail = f" — {detail}" if detail else ""
        line = f"\n[acceptance] criterion {num} ({label}): {verdict}{tail}\n"
        if capman is not None:
            with capman.global_and_fixture_disabled():
                sys.stdout.write(line)
                sys.stdout.flush()
        else:
            sys.stdout.write(line)
            sys.stdout.flush()

    return report


@pytest.fixture(scope="session")
def warm_kernel():
    """Run one tiny identification so the compiled filter is warm before
    anything timing-sensitive executes."""
    data, _ = b.generate_example1(T=40, seed=0)
    basis = b.BasisSpec.fourier(3, 3.0)
    init = b.initial_model(data, basis)
    cfg = b.PsaemConfig(N=3, K=2, init_model=init, seed=0)
    b.psaem_identify(data, cfg)
    return True


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
