"""Multi-density sketch-to-image translation at desk scale.

Modules: ``sketch_extraction`` (key-density sketches), ``synthetic_data``
(toy scenes with analytic oracles), ``mdsg`` (density-conditioned sketch
generator), ``mdtn`` (sketch + reference to image), ``training``,
``evaluation`` and ``cli``.
"""

__version__ = "0.1.0"
