"""Reconstruction-risk and mutual-information proxies for what a client sends.

A gradient-sharing client transmits p numbers; a topology-sharing client
transmits the 48-entry descriptor. Both are compared to the n * d numbers
of raw data the client holds.
"""

import math
from dataclasses import dataclass

from .errors import ConfigError
from .tda import DESCRIPTOR_DIM

DEFAULT_ALPHA_C = 0.1

# reference client: 100 samples, 20 features, a 21-parameter model,
# and a 210-dimensional gradient for the information proxy
REFERENCE_N = 100
REFERENCE_D = 20
REFERENCE_P = 21
REFERENCE_MI_DIM = 210


@dataclass(frozen=True)
class PrivacyProfile:
    n: int
    d: int
    p: int
    m: int = DESCRIPTOR_DIM
    alpha_c: float = DEFAULT_ALPHA_C

    def __post_init__(self):
        if self.n < 1 or self.d < 1:
            raise ConfigError("n and d must be >= 1")
        if self.p < 0 or self.m < 0 or self.alpha_c < 0:
            raise ConfigError("p, m and alpha_c must be >= 0")


def rho_gradient(profile):
    """min(1, p / (n d))."""
    return min(1.0, profile.p / (profile.n * profile.d))


def rho_topo(profile):
    """alpha_c * m / (n d)."""
    return profile.m * profile.alpha_c / (profile.n * profile.d)


def mi_proxy(dim, alpha_c=DEFAULT_ALPHA_C):
    """log2(1 + dim * alpha_c) bits."""
    if dim < 0 or alpha_c < 0:
        raise ConfigError("dim and alpha_c must be >= 0")
    return math.log2(1.0 + dim * alpha_c)


def risk_reduction(profiles):
    """Mean gradient risk over mean descriptor risk."""
    profiles = list(profiles)
    if not profiles:
        raise ConfigError("need at least one profile")
    grad = sum(rho_gradient(p) for p in profiles) / len(profiles)
    topo = sum(rho_topo(p) for p in profiles) / len(profiles)
    return grad / topo if topo > 0 else math.inf


def profile_row(client_id, profile):
    return {
        "client_id": client_id,
        "n": profile.n,
        "d": profile.d,
        "p": profile.p,
        "rho_grad": rho_gradient(profile),
        "rho_topo": rho_topo(profile),
        "mi_grad": mi_proxy(profile.p, profile.alpha_c),
        "mi_topo": mi_proxy(profile.m, profile.alpha_c),
    }


def reference_profiles(alpha_c=DEFAULT_ALPHA_C):
    """Two fixed reference configurations.

    ``implied_rho`` is a 100-sample, 20-feature client with a 21-parameter
    model; ``implied_mi`` is the same client sending a 210-dimensional
    gradient, which is about 4.5 bits under the information proxy.
    """
    return {
        "implied_rho": PrivacyProfile(REFERENCE_N, REFERENCE_D, REFERENCE_P, alpha_c=alpha_c),
        "implied_mi": PrivacyProfile(REFERENCE_N, REFERENCE_D, REFERENCE_MI_DIM, alpha_c=alpha_c),
    }
