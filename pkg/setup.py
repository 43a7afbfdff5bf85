"""Build script for the compiled assignment kernel.

The extension is optional at runtime: moeforge.assignment falls back to a
pure numpy implementation of the same algorithm when the import fails.
"""

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "moeforge._lapjv",
                ["src/moeforge/_lapjv.pyx"],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
