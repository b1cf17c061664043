import os

# Must happen before numpy is imported anywhere: single-threaded BLAS keeps
# results bit-identical regardless of how many client workers run.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

from pathlib import Path

import pytest

REPO_ROOT = Path(__file__).resolve().parent.parent
MNIST_DIR = Path(os.environ.get("FEDDW_MNIST_DIR", REPO_ROOT / "data" / "mnist"))


@pytest.fixture(scope="session")
def mnist_dir() -> Path:
    if not (MNIST_DIR / "train-images-idx3-ubyte.gz").exists() and not (
        MNIST_DIR / "train-images-idx3-ubyte"
    ).exists():
        pytest.fail(
            f"MNIST data missing from {MNIST_DIR}; run scripts/fetch_mnist.py "
            "or point FEDDW_MNIST_DIR at a directory with the IDX files"
        )
    return MNIST_DIR
