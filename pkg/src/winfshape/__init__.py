"""W^{1,inf} shape optimisation of an obstacle in stationary Navier-Stokes flow."""
