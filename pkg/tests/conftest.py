import numpy as np
import pytest
import torch

from moco_priors.volume import DatasetManifest, generate_phantom, write_volume


@pytest.fixture(autouse=True, scope="session")
def _single_thread():
    torch.set_num_threads(1)


def write_phantom_dataset(root, n_subjects=6, size=(32, 32, 16), n_shapes=6, seed=0):
    """IXI-named NIfTI phantoms plus manifest.json; returns the manifest."""
    entries = {}
    for i in range(n_subjects):
        sid = f"PH{i:03d}"
        entries[sid] = {}
        for contrast, v in generate_phantom(seed * 1000 + i, size, n_shapes, subject_id=sid).items():
            name = f"{sid}-SYN-{i:04d}-{contrast.value}.nii"
            write_volume(v, root / name)
            entries[sid][contrast.value] = name
    manifest = DatasetManifest(entries=entries, root=str(root))
    manifest.save(root / "manifest.json")
    return manifest


@pytest.fixture(scope="session")
def phantom_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("phantoms")
    write_phantom_dataset(root)
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}


@pytest.fixture
def acceptance(request):
    """Record ``(criterion, passed, detail)``; echoed in the terminal summary."""
    results = request.config.stash[ACCEPTANCE]

    def record(number, passed, detail=""):
        results[number] = (bool(passed), detail)
        print(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        passed, detail = results[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
