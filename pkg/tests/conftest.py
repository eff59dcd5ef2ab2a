import pytest

from sift.synthetic import SynthConfig, generate_dataset

TINY = SynthConfig(
    n_patients=6,
    abnormal_fraction=0.34,
    slices_per_volume=12,
    slice_shape=(64, 64),
    lesion_intensity_boost=0.4,
    lesion_radius_range=(3, 5),
    lesion_z_extent=5,
    seed=3,
)


@pytest.fixture(scope="session")
def tiny_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    generate_dataset(TINY, out)
    return out


@pytest.fixture(scope="session")
def tiny_manifest(tiny_dir):
    from sift.data import load_manifest

    return load_manifest(tiny_dir / "manifest.csv")


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
