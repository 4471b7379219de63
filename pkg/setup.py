import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

cython_directives = {
    "language_level": 3,
    "boundscheck": False,
    "wraparound": False,
    "cdivision": True,
    "initializedcheck": False,
}

ext = Extension(
    "cri._ckernels",
    ["src/cri/_ckernels.pyx"],
    include_dirs=[np.get_include()],
    extra_compile_args=["-O3"],
    optional=True,
)

setup(ext_modules=cythonize([ext], compiler_directives=cython_directives))
