import numpy as np
import pytest

from restorevar.codec import Codec, CodecConfig

# Small-model CLI flags shared by the pipeline and determinism tests.
TINY = ["--n_train", "8", "--n_val", "0", "--n_test", "4", "--vocab", "64", "--codec_steps", "6",
        "--codec_batch", "4", "--depth", "1", "--dim", "32", "--heads", "2", "--var_steps", "3",
        "--var_batch", "4", "--lrt_depth", "1", "--lrt_dim", "16", "--lrt_heads", "2", "--lrt_steps", "3",
        "--lrt_batch", "4", "--ft_steps", "2", "--ft_batch", "4"]

# criterion number -> (passed, detail), filled in by tests/test_acceptance.py
CRITERIA: dict[int, tuple[bool, str]] = {}


def record(num: int, passed: bool, detail: str) -> None:
    CRITERIA[num] = (bool(passed), detail)
    print(f"criterion {num}: {'PASS' if passed else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(CRITERIA):
        passed, detail = CRITERIA[num]
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


def perturbed_codec(seed: int = 0, vocab: int = 512) -> Codec:
    """Untrained codec with a spread-out codebook and non-identity phi convs."""
    rng = np.random.default_rng(seed)
    codec = Codec(CodecConfig(vocab=vocab), seed=seed)
    q = codec.quantizer
    q.codebook.weight.data = (0.5 * rng.standard_normal(q.codebook.weight.shape)).astype(np.float32)
    for phi in q.phis:
        phi.conv.weight.data = (0.05 * rng.standard_normal(phi.conv.weight.shape)).astype(np.float32)
        phi.conv.bias.data = (0.01 * rng.standard_normal(phi.conv.bias.shape)).astype(np.float32)
    return codec


@pytest.fixture(scope="session")
def codec():
    return perturbed_codec(0)
