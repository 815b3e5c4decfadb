# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Direct-loop 2-D convolution kernels (float64, NCHW layout).

Three kernels cover convolution and transposed convolution in both
directions: the forward pass, the adjoint with respect to the input, and
the adjoint with respect to the weights.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def conv2d_forward(double[:, :, :, ::1] x, double[:, :, :, ::1] w, int stride, int padding):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t O = w.shape[0], KH = w.shape[2], KW = w.shape[3]
    cdef Py_ssize_t HO = (H + 2 * padding - KH) // stride + 1
    cdef Py_ssize_t WO = (W + 2 * padding - KW) // stride + 1
    out_arr = np.zeros((B, O, HO, WO), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, o, c, i, j, oh, ow, ih, iw
    cdef double wv
    for b in range(B):
        for o in range(O):
            for c in range(C):
                for i in range(KH):
                    for j in range(KW):
                        wv = w[o, c, i, j]
                        for oh in range(HO):
                            ih = oh * stride + i - padding
                            if ih < 0 or ih >= H:
                                continue
                            for ow in range(WO):
                                iw = ow * stride + j - padding
                                if iw < 0 or iw >= W:
                                    continue
                                out[b, o, oh, ow] += wv * x[b, c, ih, iw]
    return out_arr


def conv2d_backward_input(double[:, :, :, ::1] gy, double[:, :, :, ::1] w, int stride,
                          int padding, int H, int W):
    cdef Py_ssize_t B = gy.shape[0], O = gy.shape[1], HO = gy.shape[2], WO = gy.shape[3]
    cdef Py_ssize_t C = w.shape[1], KH = w.shape[2], KW = w.shape[3]
    gx_arr = np.zeros((B, C, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t b, o, c, i, j, oh, ow, ih, iw
    cdef double wv
    for b in range(B):
        for o in range(O):
            for c in range(C):
                for i in range(KH):
                    for j in range(KW):
                        wv = w[o, c, i, j]
                        for oh in range(HO):
                            ih = oh * stride + i - padding
                            if ih < 0 or ih >= H:
                                continue
                            for ow in range(WO):
                                iw = ow * stride + j - padding
                                if iw < 0 or iw >= W:
                                    continue
                                gx[b, c, ih, iw] += wv * gy[b, o, oh, ow]
    return gx_arr


def conv2d_backward_weight(double[:, :, :, ::1] x, double[:, :, :, ::1] gy, int stride,
                           int padding, int KH, int KW):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t O = gy.shape[1], HO = gy.shape[2], WO = gy.shape[3]
    gw_arr = np.zeros((O, C, KH, KW), dtype=np.float64)
    cdef double[:, :, :, ::1] gw = gw_arr
    cdef Py_ssize_t b, o, c, i, j, oh, ow, ih, iw
    cdef double acc
    for o in range(O):
        for c in range(C):
            for i in range(KH):
                for j in range(KW):
                    acc = 0.0
                    for b in range(B):
                        for oh in range(HO):
                            ih = oh * stride + i - padding
                            if ih < 0 or ih >= H:
                                continue
                            for ow in range(WO):
                                iw = ow * stride + j - padding
                                if iw < 0 or iw >= W:
                                    continue
                                acc += x[b, c, ih, iw] * gy[b, o, oh, ow]
                    gw[o, c, i, j] = acc
    return gw_arr
