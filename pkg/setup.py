"""Builds the optional compiled rasterizer kernels.

The package works without the extension (a numpy reference backend is
selected at import time); set MESHSPLAT_SKIP_EXT=1 to skip compilation.
"""

import os

from setuptools import Extension, setup


def extensions():
    if os.environ.get("MESHSPLAT_SKIP_EXT") == "1":
        return []
    import numpy
    from Cython.Build import cythonize

    ext = Extension(
        "meshsplat.raster._kernels",
        sources=["src/meshsplat/raster/_kernels.pyx"],
        include_dirs=[numpy.get_include()],
        extra_compile_args=["-O3", "-fopenmp", "-march=native", "-funroll-loops", "-ffp-contract=off"],
        extra_link_args=["-fopenmp"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    return cythonize([ext], language_level=3)


setup(ext_modules=extensions())
