"""Mixed finite elements for geometrically exact beams with discontinuous rotations."""

import os

import jax

# element kernels are differentiated in double precision
jax.config.update("jax_enable_x64", True)
jax.config.update("jax_platforms", "cpu")
# compiled point kernels are reused across processes
_cache = os.environ.get("MIXEDBEAM_JAX_CACHE", os.path.join(os.path.expanduser("~"), ".cache", "mixedbeam", "jax"))
if _cache:
    jax.config.update("jax_compilation_cache_dir", _cache)
    jax.config.update("jax_persistent_cache_min_compile_time_secs", 0.5)

__version__ = "0.1.0"
