import os

# Pin BLAS threading before numpy loads: the determinism contracts
# (bit-identical repeated runs) are stated for a fixed thread count of 1.
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")
