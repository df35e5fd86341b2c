# %% [markdown]
# # Market mechanics
#
# A two-block stochastic block model with linear demand, plus the
# neighbor-relative perception term on top. No training here: we only push prices
# through the market and look at what comes out.

# %%
import numpy as np

from fairprice.config import parse_text, preset
from fairprice.market import metrics, optimal_uniform_price, perception, price_difference

cfg = parse_text(preset("benchmark"))
setup = cfg.setup()
graph, table = setup.dataset.graph, setup.dataset.table
print(graph.n, "customers,", graph.num_edges, "edges, mean degree", graph.degree.mean().round(2))
print("group sizes", np.bincount(table.s))

# %% [markdown]
# Willingness to pay depends on the features and on the protected attribute.
# The first feature is a noisy copy of `s`, so group membership leaks into X.

# %%
g = setup.market.demand.wtp_param(table.X, table.s)
for grp in (0, 1):
    print(f"group {grp}: mean wtp {g[table.s == grp].mean():7.2f}")
print("corr(x0, s) =", np.corrcoef(table.X[:, 0], table.s)[0, 1].round(3))

# %% [markdown]
# The best single price, found on a 0.1 grid. With one price for everyone
# nobody pays more than their neighbors, so the perception terms vanish.

# %%
p_star, pi_star = optimal_uniform_price(table, setup.market)
flat = metrics(graph, table, setup.market, np.full(graph.n, p_star))
print(f"uniform price {p_star:.1f}, profit per customer {pi_star:.3f}")
print(flat)

# %% [markdown]
# Now charge group 1 twenty units more. Customers whose neighbors pay less
# feel overcharged (delta > 0) and buy less; the penalty side is steeper
# (beta > alpha), so the net effect on demand is negative.

# %%
p = np.full(graph.n, p_star) + 20.0 * table.s
delta = price_difference(graph, p)
eta = perception(delta, setup.market.perception)
print("delta range", delta.min().round(2), delta.max().round(2))
print("degree-weighted delta sum", float(graph.degree @ delta))
print(metrics(graph, table, setup.market, p))
