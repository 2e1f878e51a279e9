#
# ###################################################################################################################
#
#    E Q U A T I O N   R E G I S T R Y
#
# ###################################################################################################################
#
# Every PDE kind the generator knows maps to one equation class. Classes register themselves with the
# `register_equation` decorator when `pdet.spectral.equations` is imported, and are looked up by kind here, so the
# solver loop never branches on the PDE name.
#

from typing import Dict, Type

_PDE_KIND_TO_EQUATION = {}  # type: Dict[str, Type]


def register_equation(*pde_kinds: str):
    def decorator(cls: Type) -> Type:
        for pde_kind in pde_kinds:
            _PDE_KIND_TO_EQUATION[pde_kind] = cls
        return cls

    return decorator


def equation_class(pde_kind: str) -> Type:
    from ..exceptions import SolverSpecError

    try:
        return _PDE_KIND_TO_EQUATION[pde_kind]
    except KeyError:
        raise SolverSpecError(f'Unknown PDE kind {pde_kind!r}, expected one of {sorted(_PDE_KIND_TO_EQUATION)}')
