# %% [markdown]
# Leakage risk and verification accuracy of a released dataset
#
# The pinned pipeline: train on one population, release reconstructions of
# another, then ask two questions. Can real photos of the released people
# find them in the release (risk)? Does a recognizer trained on the release
# still verify real photos (accuracy)? Takes about half a minute.

# %%
from facemae import pipeline
from facemae.config import PipelineConfig, dump_config

cfg = PipelineConfig()
print(dump_config(cfg))

# %%
report = pipeline.run_pipeline(cfg)
print(report.utility_csv())
print(report.privacy_csv(cfg.k))

# %% the trade-off in one table
for name in report.accuracy:
    print(f"{name:>9}  accuracy {report.accuracy[name]:.4f}  risk@K={cfg.k} {report.risk[name]:.3f}")
