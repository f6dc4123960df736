"""
A 3-D map of prototype activations
==================================

Each test patch becomes the vector of its max similarity to every prototype; the
vectors are embedded in 3-D and coloured by class. Trains its own small model first.
"""

from pathlib import Path

import numpy as np

from protoparts import (BackboneConfig, DatasetManifest, ProtoPNet, TrainConfig, activation_vectors,
                        build_dataset, embed, fit, knn_purity)
from protoparts.embedding import EmbeddingConfig, plot_embedding

ds = build_dataset(DatasetManifest(patches_per_class=60, seed=1))
model = ProtoPNet.create(BackboneConfig(block_channels=[8, 16, 32], add_on_dim=32),
                         ds.manifest.classes, seed=1, stats=ds.stats)
fit(model, ds.train, TrainConfig(epochs_warmup=1, epochs_joint=2, push_every=2, epochs_last_layer=2),
    ds.stats, push_set=ds.train)

vectors = activation_vectors(model, ds.test.images, ds.stats)
coords = embed(vectors, EmbeddingConfig(k_neighbors=10, seed=1))

# how often does a point share its class with its 10 embedded neighbours?
print("knn purity", knn_purity(coords, ds.test.labels, k=10))
print("random layout", knn_purity(np.random.default_rng(1).normal(size=coords.shape), ds.test.labels, k=10))

names = [ds.manifest.classes[k] for k in ds.test.labels]
plot_embedding(Path("activation-map.png"), coords, names, ds.manifest.classes)
