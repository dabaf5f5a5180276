# %% [markdown]
# Masking and reconstructing synthetic faces
#
# Train a small patch autoencoder on one population, then deploy it on
# masked images of identities it never saw. Runs in well under a minute.

# %%
import numpy as np

from facemae import autoenc, irmloss
from facemae.patchmask import PatchGrid, make_mask, mask_image
from facemae.synthfaces import SynthConfig, gen_dataset

train = gen_dataset(SynthConfig(n_ids=20, imgs_per_id=10, seed=1))
deploy = gen_dataset(SynthConfig(n_ids=10, imgs_per_id=5, seed=2))
print(train.pixels.shape, deploy.pixels.shape)

# %% 75% of the 16 patches are hidden; every image gets its own mask
grid = PatchGrid.for_image(32, 32, 8)
pats = [make_mask(grid, "random", 0.75, seed=i) for i in range(deploy.n_images)]
print("visible patches of image 0:", pats[0].visible)

# %% pixel-MSE model vs feature-matching model
tc = irmloss.TrainConfig(epochs=10, base_lr=1e-3)
models = {}
for mode in ("mse", "irm"):
    models[mode], hist = irmloss.train_facemae(train, irm_cfg=irmloss.IrmConfig(mode=mode), train_cfg=tc)
    print(f"{mode}: loss {hist.loss[0]:.3f} -> {hist.loss[-1]:.3f}")

# %% masked-pixel error on the unseen population
zero = np.stack([mask_image(deploy.pixels[i], pats[i], 8) for i in range(deploy.n_images)])
print("zero fill", autoenc.mse_loss(zero, deploy.pixels, pats, 8))
for mode, params in models.items():
    recon, _ = autoenc.forward_batch(params, deploy.pixels, pats)
    print(mode, autoenc.mse_loss(recon, deploy.pixels, pats, 8))

# %% rough ASCII view of one face: original / masked / mse reconstruction
recon, _ = autoenc.forward_batch(models["mse"], deploy.pixels[:1], pats[:1])
ramp = " .:-=+*#%@"
for row in range(0, 32, 2):
    line = ""
    for img in (deploy.pixels[0], zero[0], recon[0]):
        line += "".join(ramp[min(9, int(v * 10))] for v in img[row, ::2, 0]) + "   "
    print(line)
