"""Walk through the zoning pipeline on a synthetic forest plot.

Run with ``python notebooks/01_synthetic_zoning.py``. Each step prints a
short summary so the script reads top to bottom like a notebook.
"""

import numpy as np

from biodiv_zoner import BasisSystem, FitConfig, SyntheticScenario, adjusted_rand_index, fit_em
from biodiv_zoner.diversity import ProfilePoints, cell_profiles, default_qgrid
from biodiv_zoner.smoothing import coefficient_matrix, fit_profiles
from biodiv_zoner.spatial_basis import spatial_basis_for_sites
from biodiv_zoner.synth import simulate_abundances, simulate_labels

# %% A 10 x 14 lattice split into three bands, each fed by its own species pool.
scenario = SyntheticScenario(seed=4)
labels, _ = simulate_labels(scenario)
grid = simulate_abundances(labels, scenario=scenario)
print("cells per true zone:", np.bincount(labels))

# %% Hill-number profiles on the default q grid, one row per non-empty cell.
qgrid = default_qgrid()
ids, H = cell_profiles(grid.matrix(), qgrid)
print(f"{len(ids)} profiles over q in [0, {qgrid.Q}]; richness range {H[:, 0].min():.0f}-{H[:, 0].max():.0f}")

# %% Monotone smoothing turns every profile into a fixed-length coefficient vector.
basis = BasisSystem(15, 5.0)
profiles = fit_profiles([ProfilePoints(qgrid, h) for h in H], basis, cell_ids=ids.tolist())
betas = coefficient_matrix(profiles)
print("worst smoothing rmse:", max(p.rmse for p in profiles))

# Columns are put on a common scale before clustering.
sd = betas.std(axis=0)
Z = (betas - betas.mean(axis=0)) / np.where(sd > 0, sd, 1.0)

# %% Thin-plate basis over cell centroids drives the spatial mixing weights.
sb = spatial_basis_for_sites(scenario.spec.centroids()[ids], L=16)
print(f"spatial basis: L={sb.L}, explained fraction {sb.explained_fraction:.3f}")

# %% Spatial and non-spatial fits at K=3.
for spatial in (True, False):
    model = fit_em(Z, sb.psi, 3, FitConfig(lambda1=0.1, lambda2=0.1, seed=4, spatial=spatial))
    ari = adjusted_rand_index(model.labels, labels[ids])
    print(f"spatial={spatial}: ARI {ari:.3f}, {model.n_iter} iterations, loglik {model.loglik:.1f}")
