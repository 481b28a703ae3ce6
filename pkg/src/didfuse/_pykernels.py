"""Pure numpy conv1d kernels, used when the compiled extension is unavailable."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv1d_forward(x, w, b, stride):
    t_in, cin = x.shape
    cout, wcin, k = w.shape
    if wcin != cin:
        raise ValueError(f"kernel expects {wcin} input channels, got {cin}")
    if t_in < k:
        raise ValueError(f"input has {t_in} frames, kernel width is {k}")
    # windows: (T', Cin, K)
    win = sliding_window_view(x, k, axis=0)[::stride]
    cols = np.ascontiguousarray(win).reshape(win.shape[0], cin * k)
    y = cols @ w.reshape(cout, cin * k).T + b
    return y, cols


def conv1d_backward(dy, cols, w, t_in, stride):
    cout, cin, k = w.shape
    tout = dy.shape[0]
    db = dy.sum(axis=0)
    dw = (dy.T @ cols).reshape(cout, cin, k)
    dcols = (dy @ w.reshape(cout, cin * k)).reshape(tout, cin, k)
    dx = np.zeros((t_in, cin))
    span = stride * (tout - 1) + 1
    for j in range(k):
        dx[j:j + span:stride] += dcols[:, :, j]
    return dx, dw, db
