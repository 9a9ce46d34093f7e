"""Build the optional Cython kernel module.

The package works without it: ``r2p.kernels`` falls back to the pure
Python/numpy implementations when ``r2p._ckernels`` cannot be imported.
"""
import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("R2P_NO_EXT", "") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "r2p._ckernels",
                    ["src/r2p/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    # no -march=native: FMA contraction would change rounding
                    # relative to the numpy fallback
                    extra_compile_args=["-O3", "-fno-fast-math"],
                )
            ],
            compiler_directives={
                "language_level": "3",
                "boundscheck": False,
                "wraparound": False,
                "cdivision": True,
                "initializedcheck": False,
            },
        )

setup(ext_modules=ext_modules)
