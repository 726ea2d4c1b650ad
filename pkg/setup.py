from setuptools import Extension, setup
from Cython.Build import cythonize

extensions = [
    Extension(
        "shrvq.kernels._assign",
        ["src/shrvq/kernels/_assign.pyx"],
        extra_compile_args=["-O3"],
    )
]

setup(ext_modules=cythonize(extensions, language_level="3"))
