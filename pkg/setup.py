"""Build script for the optional compiled kernel extension.

The package is fully functional without the extension (a numpy fallback is
selected at import time); the extension only accelerates the hot kernels.
"""

from setuptools import Extension, setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize

    ext = Extension(
        "tdtmle._ckernels",
        ["src/tdtmle/_ckernels.pyx"],
        include_dirs=[numpy.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3"],
        optional=True,
    )
    ext_modules = cythonize([ext], language_level=3)
except ImportError:
    pass

setup(ext_modules=ext_modules)
