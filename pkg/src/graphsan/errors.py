"""Exception types shared across the package."""


class GraphsanError(Exception):
    """Base class for all library errors."""


class FormatError(GraphsanError):
    """Malformed bundle file; message carries file name and line number."""


class ConsistencyError(GraphsanError):
    """Bundle contents violate a structural invariant."""


class EditConflict(GraphsanError):
    """Edge edit targets the wrong state (deleting a non-edge, inserting an edge)."""


class DimensionError(GraphsanError):
    """Requested dimensionality exceeds what the data supports."""


class NonFinite(GraphsanError):
    """A loss or gradient became NaN/Inf during optimization."""


class EmptySubset(GraphsanError):
    """An index subset that must be nonempty is empty."""


class EmptyFocus(GraphsanError):
    """No normal validation or test node is left to compute the outer loss on."""


class OutOfRange(GraphsanError):
    """Scalar argument outside its documented range."""


class InvalidTemperature(GraphsanError):
    """Softmax temperature must be positive."""


class SingularCovariance(GraphsanError):
    """Mixture covariance not invertible even after regularization."""


class MissingFeatures(GraphsanError):
    """Operation requires node features but the graph has none."""


class BundleMismatch(GraphsanError):
    """Two results do not refer to the same underlying graph."""


class InsufficientAdversarialEdges(GraphsanError):
    """Fixture construction needs more true adversarial edges than exist."""


class SpecError(GraphsanError):
    """Experiment spec invalid; message carries the offending field path."""


class EmptyAttackSet(GraphsanError):
    """Sanitation metrics need a nonempty attacker edit set."""
