"""Train the toy BEV transformer on one client's local data and watch the
masked cross-entropy fall and the IoU rise.

Run:  python demos/local_training.py
"""

import os

for v in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS"):
    os.environ.setdefault(v, "1")

import numpy as np

from camfed import autodiff as ad
from camfed.masking import amcm_mask
from camfed.metrics import iou
from camfed.model import ModelConfig, ToyBevt, init_params
from camfed.optim import AdamW
from camfed.world import build_client_dataset, rig_from_preset


def main():
    config = ModelConfig()
    rig = rig_from_preset("car")
    dataset = build_client_dataset(rig, 120, seed=3)
    mask = amcm_mask(rig, config.bev_grid, config.world_extent)
    model = ToyBevt(config, init_params(config, seed=0))
    opt = AdamW(model.params.n)
    rng = np.random.default_rng(0)

    print(f"{len(dataset.train)} train / {len(dataset.test)} test points, "
          f"{model.params.n} parameters")
    for epoch in range(30):
        order = rng.permutation(len(dataset.train))
        losses = []
        for lo in range(0, len(order), 4):
            batch = [dataset.train[i] for i in order[lo:lo + 4]]
            model.zero_grads()
            logits = model.forward_batch([p.views for p in batch], rig, mask)
            per = [model.loss(lg, p.bev_gt, mask)
                   for lg, p in zip(logits, batch)]
            total = ad.scale(ad.add_n(per), 1.0 / len(per))
            model.backward(total, mask)
            opt.step(model.params, lr=5e-3)
            losses.append(total.item())
        if epoch % 5 == 4:
            scores = [iou(model.forward(p.views, rig, mask).data, p.bev_gt,
                          mask) for p in dataset.test]
            print(f"epoch {epoch + 1:3d}: loss {np.mean(losses):.4f}  "
                  f"test IoU {np.mean(scores):.4f}")


if __name__ == "__main__":
    main()
