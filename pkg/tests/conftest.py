import os

# Pin BLAS threading before numpy is imported anywhere: single-threaded
# reductions keep every numeric result bit-reproducible across reruns.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")
