import numpy as np
import pytest

from fewseg3d import data
from fewseg3d.diffusion import DLConfig, dl_init
from fewseg3d.engine import RunConfig
from fewseg3d.intrinsic import ILConfig, il_init


@pytest.fixture(scope="session")
def mini_corpus(tmp_path_factory):
    return data.build_corpus(tmp_path_factory.mktemp("mini"), n_scenes=4,
                             n_classes=4, diversity=1.0, seed=11,
                             points_per_instance=160)


@pytest.fixture(scope="session")
def tiny_il():
    return il_init(ILConfig(widths=(8, 8), out_dim=16, k=4), seed=1)


@pytest.fixture(scope="session")
def tiny_dl():
    cfg = DLConfig(width=16, point_embed=8, n_patches=16, patch_k=8, layers=1,
                   heads=2, mlp_hidden=16, t_embed=8, denoise_widths=(16, 16, 16),
                   timesteps=10)
    return dl_init(cfg, seed=2)


@pytest.fixture()
def mini_config(tmp_path):
    return RunConfig.from_dict({
        "data": "", "out_dir": str(tmp_path / "runs"),
        "n_way": 2, "k_shot": 1, "split": "S0",
        "episodes": 3, "eval_episodes": 3, "seeds": [0],
        "n_points": 128, "fps_seeds": 3,
        "optimizer": {"lr": 1e-3, "decay_factor": 0.5, "decay_interval": 2},
        "pam": {"iterations": 2, "variant": "pushpull", "width": 16},
        "loss": {"lambda": 1.0},
    })
