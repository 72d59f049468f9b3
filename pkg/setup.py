from setuptools import setup

try:
    from Cython.Build import cythonize
except ImportError:  # build without the compiled kernel; the interpreted one is used
    ext_modules = []
else:
    from setuptools import Extension

    ext_modules = cythonize(
        [Extension("stacksafe._ckernel", ["src/stacksafe/_ckernel.pyx"])],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
