from setuptools import setup, Extension
from Cython.Build import cythonize
import numpy as np

ext = Extension(
    "drpets._kernels._core",
    ["src/drpets/_kernels/_core.pyx"],
    include_dirs=[np.get_include()],
    extra_compile_args=["-O3", "-march=native", "-fno-math-errno", "-fopenmp"],
    extra_link_args=["-fopenmp"],
)

setup(ext_modules=cythonize([ext], language_level=3))
