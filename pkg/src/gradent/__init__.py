"""Deep Gaussian process emulation with closed-form gradient posteriors
and gradient-entropy sequential design."""

from .dgp import (
    DgpConfig,
    DgpModel,
    DgpTheta,
    SamplerError,
    dgp_gradient,
    dgp_gradient_batch,
    dgp_predict,
    dgp_predict_batch,
    ess_update,
    gibbs_sweep,
    load_dgp,
    save_dgp,
    sem_train,
)
from .design import (
    AcqPoint,
    DesignConfig,
    DesignState,
    DesignTrace,
    alm_step,
    entropy_criterion,
    gradent_step,
    pareto_front,
    run_design,
    update_lipschitz,
    write_acquisition_log,
)
from .gp import (
    GaussianPrediction,
    GpFitError,
    GpModel,
    GradientPosterior,
    gp_condition,
    gp_fit,
    gp_gradient,
    gp_predict,
)
from .gradnorm import (
    GradNormDist,
    exceedance_prob,
    gradnorm_sq_moments,
    make_dist,
    noncentral_chi_cdf,
)
from .lgp import (
    LgpModel,
    LinkTerms,
    dsigma2_dx,
    lgp_gradient_cov,
    lgp_gradient_mean,
    lgp_predict,
    link_terms,
    psi,
    xi,
)
from .mathcore import (
    CholFactor,
    FactorizationError,
    KernelParams,
    chol_factor,
    chol_solve,
    correlation_matrix,
    kernel_eval,
    kernel_grad,
    kernel_hessian_diag,
    maximin_lhs,
    std_normal_cdf,
)
from .testbeds import (
    DivergenceError,
    OdeConfig,
    Testbed,
    fd_gradient,
    lorenz63_nusselt,
    make_lorenz_testbed,
    make_plateau_testbed,
    make_sin_testbed,
    plateau,
    sin_testfn,
    transition_lines_lorenz,
)

__version__ = "0.1.0"
