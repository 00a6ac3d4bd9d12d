import os

import numpy
from setuptools import setup

# The compiled rasterization core is optional: if it cannot be built the
# package falls back to the pure-numpy kernels at import time.
try:
    if not os.path.exists("src/splatmo/kernels/_core.pyx"):
        raise ImportError
    from Cython.Build import cythonize
    from setuptools import Extension

    extensions = cythonize(
        [
            Extension(
                "splatmo.kernels._core",
                ["src/splatmo/kernels/_core.pyx"],
                extra_compile_args=["-O3", "-ffp-contract=off"],
                include_dirs=[numpy.get_include()],
            )
        ],
        language_level=3,
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions)
