"""Branch-and-bound verification of disjunctive box specifications."""

from .engine import (
    FALSIFIED, UNKNOWN, VERIFIED, Budget, PgdConfig, VerifyResult, check_witness, falsify,
    falsify_boxes, split, split_scores, verify,
)
from .spec import BoxExclusion, BoxInclusion, Conjunction, DisjunctiveSpec, ExprNonNeg, SpecError
from .tasks import (
    CertificateError, box_invariance_spec, contraction_certificate, contraction_spec, contraction_template,
    invariance_certificate, invariance_spec, invariance_template, lyapunov_digest, max_levelset,
    verify_box_invariance, verify_contraction, verify_forward_invariance,
)
