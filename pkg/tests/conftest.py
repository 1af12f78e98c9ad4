from dataclasses import dataclass

import pytest

from labelaug.data_model import DatasetManifest
from labelaug.synthetic import GroundTruth, SyntheticSpec, generate_multilabel_maps
from labelaug.uncertainty_head import HeadParams, TrainConfig, train


@dataclass
class TrainedRun:
    manifest: DatasetManifest
    truth: GroundTruth
    params: HeadParams


@pytest.fixture(scope="session")
def small_run(tmp_path_factory):
    """Curated multi-label synthetic set with a head trained on its single labels."""
    spec = SyntheticSpec(K=4, C=32, samples_per_class=40, multilabel_fraction=0.3, seed=3)
    manifest, truth = generate_multilabel_maps(spec, tmp_path_factory.mktemp("small_run"))
    params = train(manifest, TrainConfig(seed=3))
    return TrainedRun(manifest, truth, params)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
