"""Interior eigenvalues of sparse symmetric matrices by adaptive Chebyshev filtering."""

from .cheb_filter import (
    ChebFilter,
    ConfigurationError,
    SpectrumBounds,
    SpmvCounter,
    adaptive_degree,
    build_filter,
    c_m_constant,
    chebyshev_step_coeffs,
    clenshaw_apply,
    damped_bound,
    eval_filter_scalar,
    initial_degree,
    j_theta,
    lanczos_damping,
    projector_bound,
    undamped_bound,
)
from .dense_kernels import (
    EigDecomposition,
    NotPositiveDefinite,
    cholesky,
    cholesky_qr,
    rayleigh_ritz,
    sym_eig,
)
from .eigensolver import (
    SolveResult,
    SolverConfig,
    SolverState,
    compute_residuals,
    estimate_eigcount,
    estimate_spectrum_bounds,
    solve,
    spurious_threshold,
)
from .sparse_core import (
    CsrMatrix,
    MatrixMarketError,
    TiledMatrix,
    csr_spmv,
    csr_to_tiled,
    maspmm,
    naive_spmm,
    parse_matrix_market,
    read_matrix_market,
)

__version__ = "0.1.0"
