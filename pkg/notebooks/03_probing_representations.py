# %% [markdown]
# # Probing the representations
#
# After training we freeze the encoder and fit a fresh logistic probe that
# tries to recover `s` from the embeddings. Without the adversary the leaked
# feature survives into the representation; with a strong adversary the probe
# drops toward chance. One seed and a shortened schedule keep this quick, so
# expect the numbers to be noisier than the five-seed acceptance run.

# %%

from fairprice.config import parse_text, preset, with_overrides
from fairprice.experiments import run_debias
from fairprice.training import probe_adversary

cfg = with_overrides(parse_text(preset("benchmark")), "train", max_epochs=1000)
setup = cfg.setup()

# %% [markdown]
# The raw features are almost perfectly separable.

# %%
table = setup.dataset.table
print("probe on raw X:", probe_adversary(table.X, table.s).accuracy)

# %%
res = run_debias(setup, [0.0, setup.train.phi], seeds=[0])
for c in res.cells:
    m = c.metrics
    print(f"phi {c.key['phi']:5g}: probe acc {m['probe_accuracy']:.3f}  jsd {m['jsd']:.3f}  "
          f"pi {m['pi_avg']:.3f}  p_diff {m['p_diff']:.3f}")
