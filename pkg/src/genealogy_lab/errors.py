"""Exception hierarchy. Every error carries a module-qualified ``code``."""


class GenealogyError(Exception):
    module = "genealogy_lab"

    @property
    def code(self):
        return f"{self.module}.{type(self).__name__}"


# core
class CoreError(GenealogyError):
    module = "core"


class NotUltrametric(CoreError, ValueError):
    pass


class NegativeMass(CoreError, ValueError):
    pass


class DimensionMismatch(CoreError, ValueError):
    pass


class EmptySpace(CoreError, ValueError):
    pass


class BudgetExceeded(CoreError, RuntimeError):
    pass


class ComponentTooTall(CoreError, ValueError):
    pass


class TopTooTall(CoreError, ValueError):
    pass


class EmptyBase(CoreError, ValueError):
    pass


class NonMonotoneMap(CoreError, ValueError):
    pass


# forward
class ForwardError(GenealogyError):
    module = "forward"


class InvalidKernel(ForwardError, ValueError):
    pass


class ZeroPopulation(ForwardError, ValueError):
    pass


class InconsistentAncestry(ForwardError, ValueError):
    pass


class ParticleBudgetExceeded(ForwardError, RuntimeError):
    pass


# dual
class DualError(GenealogyError):
    module = "dual"


class MassPathGap(DualError, ValueError):
    pass


class OrderMismatch(DualError, ValueError):
    pass


class EmptyLocation(DualError, ValueError):
    pass


# girsanov
class GirsanovError(GenealogyError):
    module = "girsanov"


class LogGap(GirsanovError, ValueError):
    pass


class ParameterMismatch(GirsanovError, ValueError):
    pass


class EffectiveSampleSizeTooLow(GirsanovError, RuntimeError):
    pass


# infdiv
class InfdivError(GenealogyError):
    module = "infdiv"


class KernelNotBoundaryVanishing(InfdivError, ValueError):
    pass


# cli
class ConfigInvalid(GenealogyError, ValueError):
    module = "cli"
