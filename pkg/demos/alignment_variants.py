"""What the alignment step costs and what it buys.

Edge convolutions mix each reference feature with its neighbors' features.
The variants differ in how a neighbor's feature is brought into the
reference point's frame first:

  edgeconv  no alignment (the baseline)
  aeconv1   a learned per-edge matrix acting on the neighbor feature
  aeconv2   frame entries fed to the MLP directly (breaks invariance!)
  aeconv3   frame-relative geometry concatenated to the MLP input

The table below prints parameter and multiply counts, then measures how
far logits drift under rotation for each variant with random weights.
"""
import numpy as np

import aecnn.geometry as geo
from aecnn import Model, NetworkConfig, count_operations, count_parameters

rng = np.random.default_rng(19)
cloud = geo.normalize(geo.PointCloud(rng.normal(size=(256, 3)))).points
rotations = [geo.sample_arbitrary_rotation(rng) for _ in range(8)]

print(f"{'variant':10s} {'params':>10s} {'macs/sample':>12s} {'logit drift':>12s}")
for variant in ("edgeconv", "aeconv1", "aeconv2", "aeconv3"):
    config = NetworkConfig(variant=variant).validated()
    params = count_parameters(config)
    macs = count_operations(config)["total_macs"]

    model = Model(config, seed=0)
    batch = np.stack([cloud] + [cloud @ r.T for r in rotations])
    logits = model.predict_logits_batch(batch)
    drift = np.abs(logits - logits[0]).max()
    print(f"{variant:10s} {params:>10,} {macs:>12,} {drift:>12.2e}")

print("\naeconv2 drifts because the frame matrices it consumes co-rotate")
print("with the input; the other variants only ever see frame-relative")
print("quantities. aeconv1 buys its matrix-valued alignment with roughly")
print("10x the parameters of aeconv3 at the same widths.")
