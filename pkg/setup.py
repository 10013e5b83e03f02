"""Build script for the optional compiled kernels.

The package is fully functional without the extension (a pure-Python
fallback is selected at import time); building it just makes the hot
loops fast. `pip install -e . --no-build-isolation` compiles in place.
"""

import numpy
from Cython.Build import cythonize
from setuptools import Extension, setup

extensions = [
    Extension(
        "shmnet._kernels._native",
        ["src/shmnet/_kernels/_native.pyx"],
        include_dirs=[numpy.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        # keep floating point bit-identical with the Python fallback
        extra_compile_args=["-ffp-contract=off"],
    )
]

setup(ext_modules=cythonize(extensions, language_level=3))
