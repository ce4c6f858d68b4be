"""Builds the optional compiled kernel extension.

The package works without it: tsgen.nn.kernels falls back to the numpy
reference implementations when the extension is missing, so a failed
compile only costs speed, not functionality.
"""

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

ext_modules = []
if cythonize is not None:
    ext_modules = cythonize(
        [
            Extension(
                "tsgen.nn._ckernels",
                ["src/tsgen/nn/_ckernels.pyx"],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
