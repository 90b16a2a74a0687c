"""Exception hierarchy shared across the package."""


class GcpError(Exception):
    """Base class for all package errors."""


# graph construction
class GraphError(GcpError, ValueError):
    pass


class CycleDetected(GraphError):
    pass


class MultipleRoots(GraphError):
    pass


class MultipleOutputs(GraphError):
    pass


class UnreachableNode(GraphError):
    pass


class DuplicateId(GraphError):
    pass


class InvalidCardinality(GraphError):
    pass


# model / training
class DimensionMismatch(GcpError, ValueError):
    pass


class MissingAnnotation(GcpError, ValueError):
    pass


class EmptyDataset(GcpError, ValueError):
    pass


class RootNodeHasNoDistribution(GcpError, ValueError):
    pass


# acquisition
class InvalidDistribution(GcpError, ValueError):
    pass


class PoolTooSmall(GcpError, ValueError):
    pass


class LengthMismatch(GcpError, ValueError):
    pass


class NodeSetMismatch(GcpError, ValueError):
    pass


class BudgetExceedsPool(GcpError, ValueError):
    pass


# counterfactual reruns
class MissingTruth(GcpError, ValueError):
    pass


class InvalidNode(GcpError, ValueError):
    pass


# oracles and data
class OracleError(GcpError):
    pass


class OracleUnavailable(OracleError):
    pass


class MalformedOracleOutput(OracleError):
    pass


class MalformedResponse(MalformedOracleOutput):
    pass


class OracleTimeout(OracleError):
    pass


class BudgetExhausted(OracleError):
    pass


class UnknownSample(OracleError, KeyError):
    pass


class InvalidTable(GcpError, ValueError):
    pass


class ParseError(GcpError, ValueError):
    pass


class MixedDimensions(GcpError, ValueError):
    pass


# persistence
class CheckpointIOError(GcpError, OSError):
    pass


class VersionMismatch(GcpError, ValueError):
    pass


class EmptyTestSet(GcpError, ValueError):
    pass
