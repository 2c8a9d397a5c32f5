import numpy as np
import pytest

from dynglr import dataio
from dynglr.pipeline import ArchPreset, PipelineConfig

# Small everything: two hidden layers per net, a couple of epochs. Enough to
# exercise every stage without making the unit suite slow.
TINY_ARCH = ArchPreset(metric_hidden=(8, 4), update_hidden=(8, 4),
                       embed_lr=(0.02, 0.01), embed_epochs=2,
                       weight1_lr=(0.02, 0.01), weight1_epochs=2,
                       update_lr=(0.002, 0.001), update_epochs=2,
                       weight2_lr=(0.01, 0.002), weight2_epochs=2)


def tiny_config(variant="G-12312", seed=0, **overrides):
    defaults = dict(variant=variant, seed=seed, arch=TINY_ARCH,
                    triplets_per_graph=20, embedding_dim=4,
                    gamma_candidates=(2, 4, 6), rank_sample_k=48,
                    rank_sample_batches=6, rank_coverage=1.0)
    defaults.update(overrides)
    return PipelineConfig(**defaults)


def blob_dataset(n=300, dim=4, separation=4.0, seed=0, noise_rate=0.0):
    rng = np.random.default_rng(seed)
    half = n // 2
    feats = np.vstack([rng.normal(-separation / 2, 1.0, (half, dim)),
                       rng.normal(separation / 2, 1.0, (n - half, dim))])
    labels = np.concatenate([-np.ones(half), np.ones(n - half)])
    ds = dataio.from_arrays(feats, labels, seed=seed)
    if noise_rate > 0:
        ds = dataio.inject_label_noise(ds, dataio.NoiseSpec(rate=noise_rate, seed=seed))
    else:
        ds = dataio.inject_label_noise(ds, dataio.NoiseSpec(rate=0.0, seed=seed))
    return ds


@pytest.fixture(scope="session")
def blobs():
    return blob_dataset()


@pytest.fixture(scope="session")
def noisy_blobs():
    return blob_dataset(noise_rate=0.2, seed=1)
