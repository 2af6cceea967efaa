"""Build script for the optional compiled convolution kernels.

The package works without the extension (a numpy fallback is selected at
import time), so a failed compile only costs speed, not correctness.
"""

from setuptools import setup

try:
    import numpy
    from Cython.Build import cythonize

    ext_modules = cythonize(
        ["src/moesr/kernels/_native.pyx"],
        compiler_directives={
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "language_level": "3",
        },
    )
    for ext in ext_modules:
        ext.include_dirs.append(numpy.get_include())
        ext.extra_compile_args = ["-O3"]
except Exception as exc:  # pragma: no cover - build-environment dependent
    print(f"skipping native kernel build: {exc}")
    ext_modules = []

setup(ext_modules=ext_modules)
