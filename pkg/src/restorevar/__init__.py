"""Scale-space autoregressive image restoration at desk scale: multi-scale VQ
codec, next-scale AR restoration transformer, latent refiner and
continuous-latent decoder fine-tuning."""
import os

# BLAS thread count must be pinned before numpy loads; single thread keeps
# reductions in a fixed order.
_threads = os.environ.get("RV_THREADS", "1")
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
