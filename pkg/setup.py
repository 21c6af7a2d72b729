# Builds the optional Cython kernels; the package falls back to numpy when
# the extension is missing (HOPATTN_NO_EXT=1 skips the build entirely).
import os

from setuptools import setup

ext_modules = []
if not os.environ.get("HOPATTN_NO_EXT"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "hopattn._kernels",
                    ["src/hopattn/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
