"""Compiled depthwise-convolution loops (the hot path of the cell operators)."""

import numba
import numpy as np


@numba.njit(cache=True, fastmath=False)
def depthwise_forward(xp, w, stride, dilation, ho, wo):
    b_n, c_n = xp.shape[0], xp.shape[1]
    kh, kw = w.shape[1], w.shape[2]
    y = np.zeros((b_n, c_n, ho, wo), dtype=xp.dtype)
    for b in range(b_n):
        for c in range(c_n):
            for i in range(kh):
                for j in range(kw):
                    wv = w[c, i, j]
                    r0 = i * dilation
                    s0 = j * dilation
                    for h in range(ho):
                        r = r0 + h * stride
                        for q in range(wo):
                            y[b, c, h, q] += wv * xp[b, c, r, s0 + q * stride]
    return y


@numba.njit(cache=True, fastmath=False)
def depthwise_backward(xp, w, g, stride, dilation, need_input):
    b_n, c_n = xp.shape[0], xp.shape[1]
    kh, kw = w.shape[1], w.shape[2]
    ho, wo = g.shape[2], g.shape[3]
    gw = np.zeros(w.shape, dtype=np.float64)
    gxp = np.zeros(xp.shape if need_input else (1, 1, 1, 1), dtype=xp.dtype)
    for b in range(b_n):
        for c in range(c_n):
            for i in range(kh):
                for j in range(kw):
                    wv = w[c, i, j]
                    r0 = i * dilation
                    s0 = j * dilation
                    acc = 0.0
                    for h in range(ho):
                        r = r0 + h * stride
                        for q in range(wo):
                            gv = g[b, c, h, q]
                            s = s0 + q * stride
                            acc += gv * xp[b, c, r, s]
                            if need_input:
                                gxp[b, c, r, s] += gv * wv
                    gw[c, i, j] += acc
    return gw.astype(xp.dtype), gxp
