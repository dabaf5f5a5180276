# %% [markdown]
# How much can be hidden?
#
# Retrain and redeploy at several mask ratios. Higher ratios leak less but
# eventually starve the recognizer. About a minute.

# %%
from facemae import pipeline
from facemae.config import PipelineConfig

cfg = PipelineConfig()
rows = pipeline.run_sweep(cfg, PipelineConfig.float_list(cfg.sweep_ratios))
print(pipeline.sweep_csv(rows))

# %%
for ratio, acc, risk in rows:
    print(f"{ratio:4.2f} {'#' * int(acc * 40):<40} acc {acc:.3f}   {'*' * int(risk * 40):<40} risk {risk:.3f}")
