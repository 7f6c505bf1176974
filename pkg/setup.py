"""Build the optional Cython kernel extension.

The package works without the extension (a pure-Python fallback is selected
at import time), so a failed compile must not fail the install.  Set
PURPLE_SKIP_EXT=1 to skip the build deliberately.
"""

import os

from setuptools import setup

ext_modules = []
if not os.environ.get("PURPLE_SKIP_EXT"):
    try:
        from Cython.Build import cythonize

        ext_modules = cythonize(
            "src/purple/_kernels/_plc.pyx",
            compiler_directives={"language_level": "3"},
        )
    except Exception as exc:  # pragma: no cover - build-env dependent
        print(f"purple: skipping Cython extension ({exc}); pure-Python kernels will be used")

setup(ext_modules=ext_modules)
