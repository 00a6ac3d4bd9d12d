"""splatmo: differentiable Gaussian splatting with motion-blur and
rolling-shutter compensation, plus a synthetic-data toolkit.

The rasterization inner loops live in ``splatmo.kernels`` (compiled core
with a pure-numpy fallback); everything else is plain numpy.
"""

__version__ = "0.1.0"
