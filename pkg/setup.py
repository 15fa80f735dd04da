import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

# -ffp-contract=off: the float32 dataflow emulation relies on one rounding per
# arithmetic step; FMA contraction would change results vs. the numpy fallback.
ext = Extension(
    "atomdet._kernels",
    ["src/atomdet/_kernels.pyx"],
    include_dirs=[np.get_include()],
    extra_compile_args=["-O3", "-ffp-contract=off"],
    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
)

setup(ext_modules=cythonize([ext], language_level="3"))
