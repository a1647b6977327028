"""Grid toolkit for the one-phase free boundary problem of the p(x)-Laplacian.

Modules:
    grid, exponent, operators, norms -- lattice functions, variable exponents,
        operator evaluation and variable exponent norms.
    barriers -- explicit radial barriers and their sampled certification.
    solver -- Dirichlet, shifted, linearized Neumann and energy solvers.
    viscosity -- discrete touching tests.
    flatness -- slab flatness, Harnack ratios and the blow-up iteration.
    experiments, plotting, cli -- configuration driven runs.
"""

__version__ = "0.1.0"
