"""Desk-scale mixture-of-experts routing testbed.

Trains small MoE language models on domain-separable corpora, applies four
load-balancing methods at configurable scope and strength, supports a
reference router as an upper-bound comparator, and measures routing purity
and expert utilization over full global batches.
"""

__version__ = "0.1.0"


def _tune_allocator() -> None:
    # glibc hands multi-MB numpy temporaries straight to mmap/munmap, which
    # costs a page-fault storm per training step; keep freed arenas instead.
    import ctypes
    import sys

    if not sys.platform.startswith("linux"):
        return
    try:
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        libc.mallopt(ctypes.c_int(-3), ctypes.c_int(1 << 30))   # M_MMAP_THRESHOLD
        libc.mallopt(ctypes.c_int(-1), ctypes.c_int(-1))        # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass


_tune_allocator()
