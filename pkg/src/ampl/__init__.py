"""Posterior-leakage auditing and adaptive calibration for metric-DP perturbation."""

from .space import (
    CostMatrix,
    DataError,
    JointModel,
    SecretSpace,
    build_joint,
    build_space,
    cost_matrix,
    distance,
)
from .mechanism import (
    Channel,
    LevelwiseMechanism,
    MdpCertificate,
    build_em_channel,
    certify_mdp,
    compose_levels,
    sample,
)
from .inference import (
    PosteriorVector,
    ZeroEvidenceError,
    marginal_output,
    posterior_joint_exact,
    posterior_single,
)
from .leakage import LeakageSample, check_bounded, lipschitz_bound, mpl_value
from .audit import AuditReport, empirical_rate, hoeffding_certificate, recommend_delta, sample_triples
from .remap import RemapTable, bayes_remap, post_remap_posterior, remap_channel

__version__ = "0.1.0"
