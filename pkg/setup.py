from setuptools import Extension, setup

try:
    import numpy as np
    from Cython.Build import cythonize
except ImportError:  # build without the compiled kernels; numpy fallback is used
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "vaeloop.numerics._kernels_c",
                ["src/vaeloop/numerics/_kernels_c.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        language_level=3,
    )

setup(ext_modules=ext_modules)
