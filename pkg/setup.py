# Build with: python setup.py build_ext --inplace
# The compiled kernel module is optional; divsym falls back to the
# pure-Python implementation when it is missing or fails to build.

from setuptools import setup

ext_modules = []
try:
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [Extension("divsym._kernels", ["src/divsym/_kernels.pyx"],
                   extra_compile_args=["-O2"], optional=True)],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    pass

setup(ext_modules=ext_modules)
