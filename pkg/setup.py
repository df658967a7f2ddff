"""Build script for the optional compiled kernels.

The package works without the extension; ``pairtrace.kernels`` falls back
to the NumPy implementations when ``pairtrace._kernels`` cannot be imported.
"""
import os

from setuptools import setup
from setuptools.command.build_ext import build_ext

ext_modules = []
if not os.environ.get("PAIRTRACE_NO_EXT"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "pairtrace._kernels",
                    ["src/pairtrace/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    # no -ffast-math / -march=native: results must match the
                    # NumPy fallback bit for bit
                    extra_compile_args=["-O3", "-ffp-contract=off"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={
                "language_level": "3",
                "boundscheck": False,
                "wraparound": False,
                "cdivision": True,
            },
        )
    except ImportError:
        ext_modules = []


class OptionalBuildExt(build_ext):
    """Skip the extension instead of failing the install when no compiler is present."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # pragma: no cover - depends on toolchain
            print(f"warning: compiled kernels not built ({exc}); using NumPy fallback")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:  # pragma: no cover
            print(f"warning: failed to build {ext.name} ({exc}); using NumPy fallback")


setup(ext_modules=ext_modules, cmdclass={"build_ext": OptionalBuildExt})
