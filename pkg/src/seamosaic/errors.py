"""Exception types raised across the mapping pipeline."""


class SeamosaicError(Exception):
    """Base class for all pipeline errors."""


# --- camera geometry ---

class BehindCamera(SeamosaicError):
    """Point has non-positive depth in the camera frame."""


class NoConvergence(SeamosaicError):
    """Iterative undistortion failed to converge within the iteration cap."""


# --- visual odometry ---

class TooFewMatches(SeamosaicError):
    """Feature matching produced fewer matches than the configured minimum."""


class InitializationFailed(SeamosaicError):
    """Bootstrap of the first pose block failed (degenerate motion or too few inliers)."""


class TrackingLost(SeamosaicError):
    """Frame registration failed; the acquisition must be restarted."""


class DivergedAdjustment(SeamosaicError):
    """Bundle adjustment cost increased across too many consecutive rejected steps."""


class MissingPose(SeamosaicError):
    """Replay trajectory has no pose for a requested frame id."""


# --- plane fitting ---

class TooFewPoints(SeamosaicError):
    """Fewer than three points supplied to the plane fitter."""


class DegenerateGeometry(SeamosaicError):
    """All sampled plane hypotheses were collinear."""


class InsufficientInliers(SeamosaicError):
    """Best plane hypothesis has less support than the configured minimum."""


class EmptyCloud(SeamosaicError):
    """No points available where at least one is required."""


# --- mosaicing ---

class DegenerateHint(SeamosaicError):
    """Both the hint axis and its fallback are near-parallel to the plane normal."""


class CameraOnPlane(SeamosaicError):
    """Camera center lies on the projection plane; the homography is degenerate."""


class EmptyFootprint(SeamosaicError):
    """Projected image footprint on the plane has zero area."""


# --- point-cloud projection ---

class EmptyChunk(SeamosaicError):
    """Every grid ray was rejected; nothing to project."""


class DuplicateFrame(SeamosaicError):
    """A cloud chunk for this frame id was already accumulated."""


class IoFailure(SeamosaicError):
    """Filesystem write failed."""


# --- streaming ---

class ClientOverflow(SeamosaicError):
    """A client queue exceeded its bound; the client must be disconnected."""


class UnknownCommand(SeamosaicError):
    """Client sent a command outside the supported set."""


# --- orchestration ---

class ConfigError(SeamosaicError):
    """Run configuration is invalid."""


class InputError(SeamosaicError):
    """Input dataset is missing or malformed."""


class InvalidSpec(SeamosaicError):
    """Synthetic scene or trajectory specification is invalid."""


class DegenerateConfiguration(SeamosaicError):
    """Point correspondences are too degenerate for a similarity fit."""
