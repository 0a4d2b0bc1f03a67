"""Exception types shared across the toolkit."""


class SvrkitError(Exception):
    """Base class for all svrkit errors."""


class GeometryError(SvrkitError):
    """Grids, stacks or motion fields have incompatible shapes or axes."""


class DegenerateFitError(SvrkitError):
    """Point set is too small or coplanar for an affine/rigid fit."""


class FormatError(SvrkitError):
    """A file does not conform to one of the supported formats."""


class ConfigError(SvrkitError):
    """Invalid or unknown configuration key/value."""


class AllHolesError(SvrkitError):
    """Hole filling was asked to extrapolate from zero observations."""
