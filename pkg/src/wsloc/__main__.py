import os

# cap BLAS threads before numpy is imported
_threads = os.environ.get("WSLOC_THREADS")
if _threads and _threads.isdigit():
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

from wsloc.cli import main  # noqa: E402

main()
