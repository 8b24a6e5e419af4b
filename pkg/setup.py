"""Build script for the optional compiled kernels.

The extension is optional: if Cython or a C compiler is missing the package
installs without it and falls back to the pure-Python kernels at import.
"""

import os

from setuptools import setup

ext_modules = []
if os.environ.get("NVRC_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "nvrc._ckernels",
                    ["src/nvrc/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    # no FMA contraction: table arithmetic must match the numpy path bit for bit
                    extra_compile_args=["-O3", "-ffp-contract=off", "-fno-fast-math"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
