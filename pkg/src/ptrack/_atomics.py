"""Atomic integer fetch-and-add usable from nopython, nogil code."""

from numba import njit, types
from numba.core import cgutils
from numba.extending import intrinsic


@intrinsic
def _fetch_add(typingctx, arr, idx, val):
    if not (isinstance(arr, types.Array) and arr.dtype == types.int64 and arr.ndim == 1):
        return None
    sig = types.int64(arr, types.intp, types.int64)

    def codegen(context, builder, signature, args):
        arrty = signature.args[0]
        ary = context.make_array(arrty)(context, builder, args[0])
        ptr = cgutils.get_item_pointer(context, builder, arrty, ary, [args[1]])
        return builder.atomic_rmw("add", ptr, args[2], "seq_cst")

    return sig, codegen


@njit(nogil=True, cache=True)
def fetch_add(arr, idx, val):
    """Add ``val`` to ``arr[idx]`` atomically and return the previous value."""
    return _fetch_add(arr, idx, val)
