import numpy as np
import pytest
import torch
from PIL import Image

from wrib.config import ModelConfig, TrainConfig, desk_config

TRAIN_PHOTOS = [
    "astronaut", "coffee", "chelsea", "rocket",
    "hubble_deep_field", "immunohistochemistry", "retina", "colorwheel",
]


def tiny_model(**kw) -> ModelConfig:
    base = dict(
        image_size=64,
        widths=(4, 8, 8, 16, 16),
        blocks=(1, 1, 1, 2),
        k_slices=2,
        token_channels=4,
        lstm_hidden=16,
        disc_widths=(4, 8, 8, 8, 8, 8),
    )
    base.update(kw)
    return ModelConfig(**base)


def tiny_train_config(**kw) -> TrainConfig:
    model = kw.pop("model", tiny_model())
    base = dict(batch_size=2, iters_sr=0, iters_ft=0, lr_g=1e-3, lr_d=1e-3, lambda_mrf=0.0,
                checkpoint_every=0, model=model)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture
def tiny_cfg():
    return tiny_model()


@pytest.fixture
def tiny_train_cfg(tmp_path):
    return tiny_train_config(run_dir=str(tmp_path / "run"))


@pytest.fixture
def desk_cfg(tmp_path):
    return desk_config(run_dir=str(tmp_path / "run"))


@pytest.fixture(scope="session")
def photos():
    skdata = pytest.importorskip("skimage.data")
    return {name: getattr(skdata, name)() for name in TRAIN_PHOTOS}


@pytest.fixture(scope="session")
def photo_root(tmp_path_factory, photos):
    """Dataset tree: 8 training photos, 4 test images cut from them."""
    root = tmp_path_factory.mktemp("scenery")
    (root / "train").mkdir()
    (root / "test").mkdir()
    for name, arr in photos.items():
        Image.fromarray(arr).save(root / "train" / f"{name}.png")
    for i, name in enumerate(TRAIN_PHOTOS[:4]):
        arr = photos[name]
        Image.fromarray(np.ascontiguousarray(arr[:, ::-1])).save(root / "test" / f"test_{i}.jpg", quality=95)
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rand_image(*shape, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return (torch.rand(*shape, generator=g, dtype=torch.float64) * 2 - 1).to(dtype)


# acceptance criteria report: (number, title, passed, detail)
ACCEPTANCE: list[tuple[int, str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num, title, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {num:>2}. {title}: {detail}")
