import numpy as np
import pytest
import torch


@pytest.fixture(autouse=True)
def _fixed_torch_state():
    # tests control their own seeds; keep the ambient state predictable anyway
    torch.manual_seed(12345)
    np.random.seed(12345)
    yield
