import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("COTOPE_NO_EXT", "") != "1":
    try:
        from Cython.Build import cythonize
    except ImportError:
        cythonize = None
    if cythonize is not None:
        ext = Extension(
            "cotope._kernels._ckernels",
            ["src/cotope/_kernels/_ckernels.pyx"],
            # Kahan summation must not be reassociated or contracted.
            extra_compile_args=["-O2", "-fno-fast-math", "-ffp-contract=off"],
            optional=True,
        )
        ext_modules = cythonize([ext], language_level=3)

setup(ext_modules=ext_modules)
