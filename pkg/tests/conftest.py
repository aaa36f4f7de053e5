import pytest
import torch

from sketchdensity import config, dataset

torch.set_num_threads(1)

TINY_MODEL = {
    "resolution": 32,
    "mdtn_widths": "4,8,8,8,16",
    "merge_widths": "4,8,8,8,8",
    "residual_blocks": 1,
    "disc_channels": 4,
    "mdsg_base_channels": 4,
    "mdsg_bottleneck_channels": 8,
}


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """Eight training and four evaluation scenes at 32 x 32."""
    root = tmp_path_factory.mktemp("tiny") / "data"
    dataset.prepare_synthetic(root, num_train=8, num_eval=4, resolution=32, seed=3)
    return root


@pytest.fixture
def tiny_config():
    return config.Config().with_overrides(
        run={"epochs_mdtn": 2, "epochs_mdsg": 2, "epochs_finetune": 2, "batch_size": 4},
        model=TINY_MODEL)
