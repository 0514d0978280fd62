import os

from setuptools import Extension, setup

_PYX = os.path.join("src", "ctxasr", "kernels", "_ctc_speed.pyx")

try:
    import numpy
    from Cython.Build import cythonize

    if os.path.exists(_PYX):
        ext_modules = cythonize(
            [Extension("ctxasr.kernels._ctc_speed", [_PYX],
                       include_dirs=[numpy.get_include()],
                       define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")])],
            language_level=3,
        )
    else:
        ext_modules = []
except ImportError:
    # Pure-python fallback is selected at import time when the compiled
    # kernels are unavailable; the package still works without Cython.
    ext_modules = []

setup(ext_modules=ext_modules)
