"""Exception types shared across the package.

Three failure families, kept deliberately coarse:

* ConfigurationError: the caller asked for something invalid before any
  work started (bad field value, malformed config file, unknown preset).
* ContractError: an internal invariant was violated mid-computation
  (shape mismatch, double backward, manifest/blob disagreement).
* AnalysisError: a post-hoc fit or estimate is ill-posed (too few
  points, no curve overlap).

Numerical blow-ups during training raise the builtin FloatingPointError
so the trainer can distinguish "diverged" from "broken".
"""


class ConfigurationError(ValueError):
    """Invalid user-supplied configuration."""


class ContractError(RuntimeError):
    """An internal invariant no longer holds."""


class AnalysisError(RuntimeError):
    """A curve fit or estimate cannot be computed from the given data."""
