"""Exception taxonomy shared across the package."""


class ArvisError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(ArvisError, ValueError):
    """Operand shapes are incompatible."""


class ParameterError(ArvisError, ValueError):
    """A numeric argument is outside its legal range."""


class NumericsError(ArvisError, ArithmeticError):
    """A tensor op produced a non-finite value."""


class VocabularyError(ArvisError, ValueError):
    """A token id falls outside its declared range."""


class CapacityError(ArvisError, RuntimeError):
    """Sequence exceeds the model's maximum length."""


class CacheError(ArvisError, RuntimeError):
    """Cache contents disagree with the sequence being decoded."""


class PoolExhaustedError(CacheError):
    """The block pool has no free blocks left."""


class InvalidHandleError(CacheError):
    """A cache handle was used after free, or with the wrong pool."""


class CheckpointError(ArvisError, RuntimeError):
    """Base for checkpoint load failures."""


class CheckpointMagicError(CheckpointError):
    """File does not start with the expected magic bytes."""


class CheckpointVersionError(CheckpointError):
    """Format version is not supported."""


class CheckpointTruncatedError(CheckpointError):
    """File ended before all declared tensors were read."""


class CheckpointConsistencyError(CheckpointError):
    """Stored config disagrees with stored tensor shapes."""


class DegenerateDistributionError(ArvisError, ValueError):
    """All candidate logits are -inf; nothing can be sampled."""


class ProgressStallError(ArvisError, RuntimeError):
    """Jacobi decoding exceeded its iteration guard without finishing."""


class DegenerateBatchError(ArvisError, ValueError):
    """Loss mask selects no positions."""


class TrainingDivergenceError(ArvisError, RuntimeError):
    """A gradient went non-finite; the optimizer step was aborted."""


class RolloutStateError(ArvisError, RuntimeError):
    """GRPO update attempted without stored rollout log-probabilities."""


class PipelineError(ArvisError, RuntimeError):
    """A training stage is missing its prerequisite checkpoint."""


class RenderError(ArvisError, ValueError):
    """Scene cannot be placed on the requested grid."""


class VerifierError(ArvisError, ValueError):
    """Prompt does not parse under the template grammar."""


class ConfigError(ArvisError, ValueError):
    """Bad configuration key, value, or command line."""
