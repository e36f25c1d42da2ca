import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    # Pure-python install; alquery._kernels falls back to the numpy path.
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "alquery._simkern",
                ["src/alquery/_simkern.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
