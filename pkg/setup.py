"""Build the optional Cython kernel extension.

If compilation fails the package still installs; ``xnor_forge.kernels``
falls back to the numpy implementation at import.
"""
import os
import sys

import numpy as np
from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    def run(self):
        try:
            super().run()
        except Exception as exc:  # noqa: BLE001
            print(f"warning: C kernels not built ({exc}); using numpy fallback", file=sys.stderr)

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:  # noqa: BLE001
            print(f"warning: failed to build {ext.name}: {exc}", file=sys.stderr)


def extensions():
    if os.environ.get("XNOR_FORGE_NO_EXT"):
        return []
    from Cython.Build import cythonize

    ext = Extension(
        "xnor_forge._ckernels",
        ["src/xnor_forge/_ckernels.pyx"],
        include_dirs=[np.get_include(), "src/xnor_forge"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3"],
    )
    return cythonize([ext], compiler_directives={"language_level": "3"})


setup(ext_modules=extensions(), cmdclass={"build_ext": OptionalBuildExt})
