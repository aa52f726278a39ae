"""Build script for the optional compiled kernel extension.

The package is fully functional without the extension (a NumPy fallback is
selected at import time); building it just makes the per-timestep kernels
faster.  Compilation failures are therefore non-fatal.
"""

import sys

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class optional_build_ext(build_ext):
    """build_ext that degrades to the pure-Python install on failure."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # compiler missing, etc.
            self._warn(exc)

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            self._warn(exc)

    @staticmethod
    def _warn(exc):
        print(
            f"WARNING: building the compiled kernels failed ({exc}); "
            "falling back to the NumPy kernel backend.",
            file=sys.stderr,
        )


def make_extensions():
    import numpy as np
    from Cython.Build import cythonize

    ext = Extension(
        "localspike._ckernels",
        sources=["src/localspike/_ckernels.pyx"],
        include_dirs=[np.get_include()],
        # -ffp-contract=off keeps the compiled kernels bit-identical to the
        # NumPy fallback (no FMA contraction), which the test suite asserts.
        extra_compile_args=["-O3", "-ffp-contract=off"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    return cythonize([ext], language_level=3)


setup(
    ext_modules=make_extensions(),
    cmdclass={"build_ext": optional_build_ext},
)
