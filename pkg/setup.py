import numpy
from setuptools import Extension, setup
from Cython.Build import cythonize

setup(
    ext_modules=cythonize(
        [
            Extension(
                "pilotmae._kernels._cyk",
                ["src/pilotmae/_kernels/_cyk.pyx"],
                extra_compile_args=["-O3", "-fopenmp", "-march=native", "-ffast-math"],
                extra_link_args=["-fopenmp", "-lmvec", "-lm"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
)
