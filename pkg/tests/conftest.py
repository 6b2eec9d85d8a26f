import numpy as np
import pytest

from headspan.cameras import orbit_camera
from headspan.surfels import SurfelSet


def random_surfels(n, seed=0, sh_coeffs=4, scale_range=(0.12, 0.4)) -> SurfelSet:
    rng = np.random.default_rng(seed)
    centers = rng.normal(0, 0.4, (n, 3))
    q = rng.normal(0, 1, (n, 4))
    q /= np.linalg.norm(q, axis=-1, keepdims=True)
    ls = np.log(rng.uniform(*scale_range, (n, 2)))
    logits = rng.normal(0, 1.0, n)
    coeffs = rng.normal(0, 0.2, (n, sh_coeffs, 3))
    return SurfelSet(centers, q, ls, logits, coeffs)


@pytest.fixture
def small_camera():
    return orbit_camera((0, 0, 0), 15.0, 8.0, 3.0, 32, 32)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """2 lifestages x 6 frames at 32x32 on a coarse template."""
    from headspan.data import generate_synthetic, load_dataset

    root = tmp_path_factory.mktemp("tinydata")
    generate_synthetic(root, num_lifestages=2, frames_per_lifestage=6,
                       image_size=32, seed=5, template_subdivisions=2)
    return load_dataset(root / "manifest.json")


def tiny_train_config(**overrides):
    from headspan.basis import PruneSchedule
    from headspan.encoding import HashGridConfig
    from headspan.training import DensifyConfig, TrainConfig

    kwargs = dict(
        warmup_iterations=8,
        formal_iterations=30,
        hash_config=HashGridConfig(levels=4, table_size=2 ** 12,
                                   features_per_entry=2,
                                   coarsest_resolution=4,
                                   finest_resolution=32),
        num_bases=2,
        seed=1,
        checkpoint_interval=0,
        densify=DensifyConfig(interval=0),
        prune_schedule=PruneSchedule(threshold=1e-4, start_iteration=10000,
                                     interval=10000),
    )
    kwargs.update(overrides)
    return TrainConfig(**kwargs)


def make_tiny_trainer(dataset, workdir, **cfg_overrides):
    from headspan.model import PersonalizedModel
    from headspan.training import Trainer

    cfg = tiny_train_config(**cfg_overrides)
    model = PersonalizedModel.create(
        dataset.template, dataset.lifestage_names,
        cfg.num_bases or len(dataset.lifestage_names), cfg.hash_config,
        np.random.default_rng(cfg.seed), sh_degree=cfg.sh_degree,
        blend_jitter=cfg.blend_weight_jitter)
    return Trainer(model, dataset, cfg, workdir)
