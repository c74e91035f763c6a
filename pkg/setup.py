import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

ext_modules = []
if cythonize is not None:
    conv_ext = Extension(
        "fourroom_lab.kernels._convcore",
        ["src/fourroom_lab/kernels/_convcore.pyx", "src/fourroom_lab/kernels/convkernels.c"],
        include_dirs=[np.get_include(), "src/fourroom_lab/kernels"],
        extra_compile_args=["-O3", "-march=native", "-funroll-loops"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    # The package works without the compiled core (numpy fallback kernels).
    conv_ext.optional = True
    ext_modules = cythonize([conv_ext], language_level="3")

setup(ext_modules=ext_modules)
