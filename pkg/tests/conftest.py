import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from chainterp.chain import ChainConfig, build_instance_chain  # noqa: E402
from chainterp.cli import main  # noqa: E402
from chainterp.harmonize import fit_layer_concepts, layer_features  # noqa: E402
from chainterp.netcore import LEVELS  # noqa: E402
from chainterp.synthetic import make_workspace  # noqa: E402


@pytest.fixture(scope="session")
def workspace():
    return make_workspace(seed=0)


@pytest.fixture(scope="session")
def banks(workspace):
    net = workspace.net
    layers = {net.level_map[lvl] for lvl in LEVELS}
    feats = layer_features(net, workspace.manifest, layers)
    return {lvl: fit_layer_concepts(net, workspace.manifest, net.level_map[lvl], features=feats[net.level_map[lvl]])
            for lvl in LEVELS}


@pytest.fixture(scope="session")
def full_tree(workspace, banks):
    scene = sorted(workspace.full_samples)[0]
    sid = workspace.full_samples[scene][0]
    return build_instance_chain(workspace.net, workspace.tensors[sid], banks, ChainConfig(), sid)


@pytest.fixture(scope="session")
def demo_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("demo")
    assert main(["demo", "--out", str(out)]) == 0
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.write_sep("=", "acceptance criteria")
        for num in sorted(results):
            terminalreporter.write_line(results[num])
