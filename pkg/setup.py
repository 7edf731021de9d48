"""Builds the optional compiled kernels; the package works without them."""

import os

from setuptools import setup

ext_modules = []
if os.environ.get("GZSL_MOE_NO_EXT", "") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [Extension("gzsl_moe._ckernels", ["src/gzsl_moe/_ckernels.pyx"],
                       include_dirs=[np.get_include()], extra_compile_args=["-O3", "-ffp-contract=off"])],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
