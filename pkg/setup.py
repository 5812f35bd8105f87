from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "spectral_surgeon._fnv_native",
                ["src/spectral_surgeon/_fnv_native.pyx"],
                extra_compile_args=["-O3"],
                optional=True,
            )
        ],
        language_level=3,
    )
except ImportError:
    # No Cython: the package falls back to the pure-Python checksum at import.
    ext_modules = []

setup(ext_modules=ext_modules)
