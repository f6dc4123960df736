"""
Train a prototype classifier and explain one prediction
=======================================================

A reduced run on the synthetic six-class patches; well under a minute on one core.
"""

from pathlib import Path

import numpy as np

from protoparts import BackboneConfig, DatasetManifest, ProtoPNet, TrainConfig, build_dataset, explain, fit
from protoparts.data import augment_set
from protoparts.training import accuracy

out = Path("demo-out")
ds = build_dataset(DatasetManifest(patches_per_class=60, seed=0))
train = augment_set(ds.train, 2, seed=0)

# small backbone, short staged schedule: warmup, joint with pushes, last layer
model = ProtoPNet.create(BackboneConfig(block_channels=[8, 16, 32], add_on_dim=32),
                         ds.manifest.classes, seed=0, stats=ds.stats)
fit(model, train, TrainConfig(epochs_warmup=1, epochs_joint=2, push_every=2, epochs_last_layer=3),
    ds.stats, val=ds.test, push_set=ds.train)
print("test accuracy", accuracy(model, ds.test, ds.stats))
print("prototype diversity", model.metadata["prototype_diversity"])

# where did the top prototypes fire, and what are they sensitive to?
report = explain(model, ds.test.images[0], k=3, input_id="first-test", out_dir=out)
print("predicted", report.predicted_name, "true", ds.manifest.classes[ds.test.labels[0]])
for ev in report.evidence:
    top = max(ev.descriptor_profile, key=ev.descriptor_profile.get)
    print(f"  prototype {ev.prototype_id:2d}  contribution {ev.contribution:7.3f}  most sensitive to {top}")

# per-class weights of the final layer: own-class entries dominate after the L1 stage
w = model.head.weight.data
own = w[model.prototypes.class_of, np.arange(model.prototypes.count)]
print("mean own-class weight", own.mean())
