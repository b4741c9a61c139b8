"""
Balancing weights for a continuous treatment
============================================

The weight for each unit is the marginal treatment density over the
fitted conditional one.  Units whose dose is unusual given their
covariates and location count for more; ratios near one mean the dose
was nearly unconfounded to begin with.
"""

import warnings

import numpy as np

from spatialcausal.synthgen import LineGraphConfig, gen_line_graph
from spatialcausal.effects import (SpatialDataset, balancing_weights, fit_gps,
                                   marginal_density, weight_diagnostics)

ds, _ = gen_line_graph(LineGraphConfig(n=200, x_dim=4))

# conditional dose model: linear mean in covariates and position
gps = fit_gps(ds, 0)
print("conditional fit: slopes", np.round(gps.coef[:-1], 3),
      "intercept", round(gps.coef[-1], 3))
print("residual sd:", round(gps.sigma_resid, 3))

# marginal via kernel density estimate, bandwidth by Silverman's rule
marginal = marginal_density(ds, 0)
print("kde bandwidth:", round(marginal.bandwidth, 4))
grid = np.linspace(ds.treatments.min() - 1.0, ds.treatments.max() + 1.0, 2001)
print("kde mass:", round(float(np.trapezoid(marginal.density(grid), grid)), 4))

w = balancing_weights(ds, 0, gps, marginal)
print("normalized weights: mean", w.normalized.mean(),
      "range", (round(w.normalized.min(), 3), round(w.normalized.max(), 3)))

diag = weight_diagnostics(w)
print("effective sample size:", round(diag["ess"], 1), "of", diag["n"])

# positivity: a dose no covariate profile can explain has GPS mass ~ 0
t = ds.treatments.copy()
t[0, 0] = 30.0
broken = SpatialDataset(treatments=t, patches=ds.patches,
                        confounders=ds.confounders, coords=ds.coords,
                        outcomes=ds.outcomes, d_s=ds.d_s)
with warnings.catch_warnings(record=True) as caught:
    warnings.simplefilter("always")
    bad = balancing_weights(broken, 0, fit_gps(broken, 0),
                            marginal_density(broken, 0))
print("violation indices:", bad.positivity_violations)
print("warning raised:", any("positivity" in str(c.message) for c in caught))
