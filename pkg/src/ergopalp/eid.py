"""Expected Information Density for stiffness mapping.

The density mixes an exploitation part (gradient norm of the predicted
stiffness plus the stiffness itself) with an exploration part (GP standard
deviation). Each part is normalised on its own before mixing with ``alpha``.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidArgument
from .field import ScalarGrid, gradient_norm, integrate, normalize_density, uniform_density


def normalized_or_uniform(grid: ScalarGrid) -> ScalarGrid:
    """Integral-normalised copy, or the uniform density if the integral is zero."""
    if integrate(grid) > 0:
        return normalize_density(grid)
    return uniform_density(grid.spec)


def compose_eid(mean: ScalarGrid, std: ScalarGrid, alpha: float) -> ScalarGrid:
    if mean.spec != std.spec:
        raise InvalidArgument("mean and std grids must share a GridSpec")
    if not 0.0 <= alpha <= 1.0:
        raise InvalidArgument(f"alpha must lie in [0, 1], got {alpha}")
    g_hat = normalized_or_uniform(gradient_norm(mean))
    mu_hat = normalized_or_uniform(mean.with_values(np.maximum(mean.values, 0.0)))
    sigma_hat = normalized_or_uniform(std)
    mixed = (1.0 - alpha) * (g_hat.values + mu_hat.values) + alpha * sigma_hat.values
    return normalize_density(mean.with_values(mixed))
