import numpy as np
import pytest

from scenelink import synth


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture(scope="session")
def exact_scene():
    """Noiseless random-similarity capture; ground truth recoverable exactly."""
    return synth.generate(seed=7, scale=400.0, noise_px=0.0)


@pytest.fixture(scope="session")
def noisy_scene():
    """Capture with 0.5 px corner noise on the default rig."""
    return synth.generate(seed=19, noise_px=0.5)


@pytest.fixture(scope="session")
def identity_scene():
    """Scan frame already coincides with CAD (s=1, R=I, t=0)."""
    return synth.generate(seed=3, preset="identity")


@pytest.fixture(scope="session")
def rig():
    """Bare assembly without any capture."""
    glb, manifest, asm = synth.build_rig_assembly()
    return glb, manifest, asm
