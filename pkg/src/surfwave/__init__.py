"""surfwave: a spectral laboratory for free-surface viscous flow coupled to a
bulk-soluble surfactant.

The package integrates the perturbation form of the flattened free-boundary
Navier-Stokes / surfactant system on a periodic slab, computes its equilibria
and linear spectra, and measures the structural quantities (masses, energies,
dissipations, exchange positivity, decay rates) that characterize the model.
"""

__version__ = "0.1.0"
