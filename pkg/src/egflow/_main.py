"""Console entry point; configures thread caps before numpy is imported."""


def main() -> None:
    import os
    import sys

    threads = os.environ.get("EGFLOW_THREADS")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ.setdefault(var, threads)

    from .cli import run_cli

    sys.exit(run_cli(sys.argv[1:]))
