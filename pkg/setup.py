from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "abmcmc._core",
                ["src/abmcmc/_core.pyx"],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    # Pure-python fallback is selected at import time when the compiled
    # core is absent, so an extension-less install is still functional.
    ext_modules = []

setup(ext_modules=ext_modules)
