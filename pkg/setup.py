"""Build the optional compiled kernel core.

The package works without it: ``kdm._backend`` falls back to the numpy
implementation when ``kdm._ckernels`` cannot be imported.
"""
import os

from setuptools import setup

ext_modules = []
if not os.environ.get("KDM_NO_EXT"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "kdm._ckernels",
                    ["src/kdm/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    # no -ffast-math: summation order must stay sequential
                    extra_compile_args=["-O3", "-ffp-contract=off"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
