from nofis.errors import CatalogError
from nofis.problems.cube import Cube
from nofis.problems.function import FunctionProblem
from nofis.problems.halfspace import Halfspace
from nofis.problems.leaf import Leaf
from nofis.problems.levy import Levy
from nofis.problems.powell import Powell
from nofis.problems.ring import Ring
from nofis.problems.rosenbrock import Rosenbrock

CATALOG = {cls.name: cls for cls in (Leaf, Cube, Rosenbrock, Levy, Powell, Ring, Halfspace)}


def make_problem(name, **kwargs):
    """Builds a catalog problem by name; keyword arguments override its defaults."""
    try:
        cls = CATALOG[name]
    except KeyError:
        raise CatalogError('unknown problem {!r}, expected one of {}'.format(name, sorted(CATALOG))) from None
    return cls(**kwargs)
