# %% [markdown]
# # Balance check and covariate screening
#
# Before estimating, two questions about the covariates. Did randomization
# leave them balanced? A forest tries to predict the arm from them, and its
# out-of-bag accuracy is compared with the accuracy on shuffled labels.
# Which ones carry independent information? Near-constant columns go first,
# then one member of each highly correlated pair.

# %%
import numpy as np

from etrials import TrialDataset
from etrials.covariates import classification_permutation_test, select_features

rng = np.random.default_rng(0)
n = 120
arm = rng.permutation(np.arange(n) % 2)
prior = rng.random(n)
covariates = {
    "prior_score": prior,
    "prior_score_pct": 100 * prior + rng.normal(0, 0.5, n),   # near duplicate
    "time_on_task": rng.gamma(2.0, 20.0, n),
    "school_year": np.full(n, 2021.0),                          # constant
    "grade": [f"g{6 + k % 3}" for k in range(n)],
}
ds = TrialDataset.from_columns([f"s{k}" for k in range(n)], arm, 0.5, rng.random(n),
                               [f"c{k % 8}" for k in range(n)], covariates, categorical=("grade",))

# %%
balance = classification_permutation_test(ds, n_permutations=199, seed=1)
print(f"OOB accuracy {balance.observed_statistic:.3f}, "
      f"permutation median {np.median(balance.permutation_statistics):.3f}, p = {balance.p_value:.3f}")

# %% [markdown]
# A covariate that leaks the arm is caught with the smallest attainable
# p-value, 1 / (permutations + 1).

# %%
leaky = TrialDataset.from_columns(ds.student_id, ds.arm, 0.5, ds.proximal_outcome, ds.cluster_id,
                                  {"leak": ds.arm.astype(float)})
print("leaky covariate p =", classification_permutation_test(leaky, 199, seed=1).p_value)

# %%
selection = select_features(ds, variance_threshold=1e-8, correlation_threshold=0.9)
print("kept:", selection.kept)
print("near-zero variance:", selection.dropped_near_zero_variance)
for name, partner, r in selection.dropped_high_correlation:
    print(f"dropped {name} (|r| = {r:.3f} with {partner})")
