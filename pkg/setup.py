"""Builds the optional compiled kernels.

The package works without them (a numpy fallback is selected at import),
so any failure here downgrades to a plain pure-python install instead of
aborting. Contraction is disabled to keep the compiled arithmetic
bit-identical to the numpy path.
"""
import sys

from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize
    from setuptools.extension import Extension

    ext_modules = cythonize(
        [
            Extension(
                "vistok._kernels._core",
                sources=["src/vistok/_kernels/_core.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3", "-ffp-contract=off"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except Exception as exc:  # pragma: no cover
    sys.stderr.write(f"skipping compiled kernels ({exc}); numpy fallback will be used\n")
    ext_modules = []

setup(ext_modules=ext_modules)
