import numpy as np
from setuptools import setup

# The compiled kernels are optional: dangle.kernels falls back to the numpy
# reference implementations when the extension is absent.
try:
    from Cython.Build import cythonize
    from setuptools import Extension

    extensions = cythonize(
        [
            Extension(
                "dangle.kernels._fast",
                ["src/dangle/kernels/_fast.pyx"],
                include_dirs=[np.get_include()],
            )
        ],
        language_level=3,
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions)
