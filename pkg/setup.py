import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

extensions = [
    Extension(
        "distembed._kernels",
        ["src/distembed/_kernels.pyx"],
        include_dirs=[np.get_include()],
        # no -ffast-math: results must match the Python fallback bit for bit
        extra_compile_args=["-O3", "-ffp-contract=off"],
    )
]

setup(ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"}))
