"""Two-stage (global + focal) radiance fields on an anchored hash grid.

Submodules are imported explicitly (``from focalfield.trainer import ...``)
so that the CLI can configure threading before numpy loads.
"""

__version__ = "0.1.0"
