"""L2RU: structured state-space models with a prescribed L2-gain bound."""

import jax

# Certificates are checked at 1e-9 margins; single precision is not enough.
jax.config.update("jax_enable_x64", True)

from . import errors  # noqa: E402
from .lti import (GainCertificate, LtiSystem, bounded_real_check_strict,  # noqa: E402
                  bounded_real_residual, hinf_norm, lmi_gain,
                  simulate_recursive, simulate_scan, trajectory_gain_ratio)
from .psi import PsiFreeParams, cayley, init_long_memory, psi_gamma  # noqa: E402
from .kappa import (EigenInitRanges, KappaFreeParams, kappa_gamma,  # noqa: E402
                    realify, sample_eigen_params)
from .mlp import MlpParams, mlp_forward, mlp_lipschitz_lower_bound  # noqa: E402
from .model import (L2ruFreeParams, L2ruModel, LayerParams, build,  # noqa: E402
                    certified_gain, forward)

__version__ = "0.1.0"
