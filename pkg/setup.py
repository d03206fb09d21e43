"""Build script for the optional compiled compositing kernels.

The package works without the extension (a numpy fallback is selected at
import time); building it just makes rendering and gradient evaluation
faster.
"""

import numpy
from setuptools import setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

ext_modules = []
if cythonize is not None:
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "splatstream._composite",
                ["src/splatstream/_composite.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={
            "language_level": 3,
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )

setup(ext_modules=ext_modules)
