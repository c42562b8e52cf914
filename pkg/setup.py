"""Build the optional Cython kernel module.

The extension is marked optional: when Cython or a C compiler is missing the
package still installs and ``maskfuse`` falls back to its pure-Python kernels.
"""
import platform

from setuptools import Extension, setup

compile_args = ["-O3"]
if platform.machine().lower() in ("x86_64", "amd64"):
    # hardware popcount; every x86-64 CPU since 2008 has it
    compile_args.append("-mpopcnt")

try:
    from Cython.Build import cythonize
except ImportError:
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "maskfuse._ext",
                ["src/maskfuse/_ext.pyx"],
                extra_compile_args=compile_args,
                optional=True,
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
