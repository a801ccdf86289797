"""Exception hierarchy.  Each class carries the CLI exit code it maps to."""


class VPError(Exception):
    exit_code = 1


class DomainError(VPError, ValueError):
    """A chart map or integrator was asked to cross a singular time."""

    exit_code = 3


class SingularKernelError(VPError):
    """Unsoftened kernel evaluated at a target coinciding with a source."""

    exit_code = 3


class NumericalGuardError(VPError):
    """An integrator guard tripped (singular bracket, ill-conditioning, ...)."""

    exit_code = 3

    def __init__(self, message, last_good=None, sample=None):
        super().__init__(message)
        self.last_good = last_good
        self.sample = sample


class CertificateError(VPError):
    """A convergence certificate failed, so the gated object is withheld."""

    exit_code = 2

    def __init__(self, message, gate=None, history=None):
        super().__init__(message)
        self.gate = gate
        self.history = history


class ConfigError(VPError, ValueError):
    exit_code = 4
