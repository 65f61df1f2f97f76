"""Typed errors shared across walklab modules."""


class WalklabError(Exception):
    """Base class for all walklab errors."""


class BudgetExceeded(WalklabError):
    """A memory or work cap was hit; never a silent truncation."""

    def __init__(self, what, limit, needed=None):
        self.what = what
        self.limit = limit
        self.needed = needed
        msg = f"budget exceeded: {what} (limit {limit}"
        if needed is not None:
            msg += f", needed {needed}"
        super().__init__(msg + ")")


class GroupMismatch(WalklabError):
    """Operands live on different groups."""


class HullDegenerate(WalklabError):
    """Zero is not interior to the hull of the abelianized support;
    no multiplicative centering exists."""


class NotCentered(WalklabError):
    """An operation requiring a centered density got a non-centered one."""


class UniformityFailed(WalklabError):
    """A density sequence violates its shared lower/upper envelope."""


class NoValidV(WalklabError):
    """No symmetric identity neighborhood V with V*V inside W supports a minorant."""


class NoConvergence(WalklabError):
    """Iterative norm estimation stalled; carries the best bracket seen."""

    def __init__(self, iterations, bracket):
        self.iterations = iterations
        self.bracket = bracket
        super().__init__(
            f"no convergence after {iterations} iterations; bracket {bracket}"
        )


class DegenerateFunction(WalklabError):
    """A test function with zero gradient cannot enter a ratio."""


class SingularResolvent(WalklabError):
    """Resolvent requested at (or too close to) an eigenvalue."""


class CorruptCache(WalklabError):
    """A cache entry failed its header or hash check."""


class ConfigError(WalklabError):
    """Malformed experiment configuration."""

    def __init__(self, message, field=None):
        self.field = field
        super().__init__(message if field is None else f"{field}: {message}")
