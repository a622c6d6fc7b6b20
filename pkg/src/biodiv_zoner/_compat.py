"""Optional numba acceleration for small inner loops."""


def njit(fn):
    try:
        import numba
    except ImportError:  # pragma: no cover - pure Python fallback
        return fn
    return numba.njit(cache=True)(fn)
